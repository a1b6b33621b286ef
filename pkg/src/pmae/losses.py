"""
Differentiable training objectives.

Pre-training minimises ``recon + bandwidth + sparsity``; fine-tuning
minimises ``pearson + lambda1 * psd``. Signal losses take ``(n,)`` or
``(B, n)`` tensors and average over the batch.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .spectral import BandLimits, DegenerateSpectrumWarning, peak_bin, psd

EPS = 1e-8


class TrainingDivergenceError(RuntimeError):
    """A loss component became NaN or infinite."""

    def __init__(self, component: str, value, where: str = ""):
        self.component = component
        msg = f"non-finite {component} loss ({value})"
        if where:
            msg += f" at {where}"
        super().__init__(msg)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 100.0


@dataclass(frozen=True)
class PeakPadding:
    delta_f: float = 0.1  # 6 bpm


def _batched(x: torch.Tensor) -> torch.Tensor:
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    return x[None] if x.dim() == 1 else x


def bandwidth_loss(x: torch.Tensor, fs: float, band: BandLimits = BandLimits()) -> torch.Tensor:
    """Share of spectral power outside ``band``, in [0, 1]."""
    x = _batched(x)
    s = psd(x, fs)
    mask = torch.from_numpy(s.band_mask(band)).to(x.device)
    total = s.power.sum(-1)
    outside = s.power[..., ~mask].sum(-1)
    return _safe_ratio(outside, total, "bandwidth").mean()


def sparsity_loss(x: torch.Tensor, fs: float, band: BandLimits = BandLimits(),
                  pad: PeakPadding = PeakPadding()) -> torch.Tensor:
    """Share of in-band power farther than ``pad.delta_f`` from the in-band peak.

    The peak location is chosen without gradient; only the power values are
    differentiated.
    """
    x = _batched(x)
    s = psd(x, fs)
    in_band = s.band_mask(band)
    if not in_band.any():
        raise ValueError("band contains no frequency bins")
    p_np = s.power.detach().cpu().numpy()
    far = np.zeros(p_np.shape, dtype=bool)
    for i in range(p_np.shape[0]):
        f_star = s.freqs[peak_bin(p_np[i], s.freqs, band)]
        far[i] = in_band & (np.abs(s.freqs - f_star) > pad.delta_f + 1e-9)
    mask_in = torch.from_numpy(in_band).to(x.device)
    far_t = torch.from_numpy(far).to(x.device)
    band_power = (s.power * mask_in).sum(-1)
    far_power = (s.power * far_t).sum(-1)
    return _safe_ratio(far_power, band_power, "sparsity").mean()


def _safe_ratio(num: torch.Tensor, den: torch.Tensor, name: str) -> torch.Tensor:
    zero = den <= 0
    if bool(zero.any()):
        warnings.warn(f"{name} loss: zero reference power, loss set to 0",
                      DegenerateSpectrumWarning, stacklevel=3)
    safe = torch.where(zero, torch.ones_like(den), den)
    return torch.where(zero, torch.zeros_like(num), num / safe)


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor = None,
                        recon_over: str = "masked") -> torch.Tensor:
    """Mean over selected tokens of the per-token mean squared error.

    ``pred`` and ``target`` are ``(..., N, P)`` or lattices ``(..., T, h, w, P)``;
    ``masked`` is a boolean selector over the token axis (True = masked).
    ``recon_over="all"`` ignores the selector.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    per_token = ((pred - target) ** 2).mean(-1)
    if recon_over == "all" or masked is None:
        if recon_over == "masked" and masked is None:
            raise ValueError("masked selector required when recon_over='masked'")
        sel = torch.ones_like(per_token, dtype=torch.bool)
    elif recon_over == "masked":
        sel = masked.to(per_token.device)
        if sel.shape != per_token.shape:
            sel = sel.reshape(per_token.shape[-sel.dim():]).expand_as(per_token)
    else:
        raise ValueError(f"recon_over must be 'all' or 'masked', got {recon_over!r}")
    n = sel.sum()
    if int(n) == 0:
        raise ValueError("no tokens selected for the reconstruction loss")
    return (per_token * sel).sum() / n


def pearson_loss(x: torch.Tensor, x_gt: torch.Tensor) -> torch.Tensor:
    """``1 - r`` between prediction and reference, averaged over the batch."""
    x, y = _batched(x), _batched(x_gt).to(dtype=_batched(x).dtype)
    if x.shape != y.shape or x.shape[-1] < 2:
        raise ValueError(f"pearson_loss needs equal lengths >= 2, got {tuple(x.shape)} and {tuple(y.shape)}")
    xc = x - x.mean(-1, keepdim=True)
    yc = y - y.mean(-1, keepdim=True)
    r = (xc * yc).sum(-1) / torch.sqrt((xc ** 2).sum(-1) * (yc ** 2).sum(-1) + EPS)
    return (1.0 - r).mean()


def psd_loss(x: torch.Tensor, x_gt: torch.Tensor, fs: float, normalize: bool = True) -> torch.Tensor:
    """L2 distance between the two power spectra.

    Both signals are mean-centred, so an offset in the prediction is not
    penalised. With ``normalize`` each spectrum is scaled to unit sum first,
    which keeps the term comparable across signal amplitudes.
    """
    x, y = _batched(x), _batched(x_gt)
    y = y.to(dtype=x.dtype)
    if x.shape != y.shape:
        raise ValueError(f"psd_loss needs equal shapes, got {tuple(x.shape)} and {tuple(y.shape)}")
    x = x - x.mean(-1, keepdim=True)
    y = y - y.mean(-1, keepdim=True)
    px, py = psd(x, fs).power, psd(y, fs).power
    if normalize:
        px = px / (px.sum(-1, keepdim=True) + EPS)
        py = py / (py.sum(-1, keepdim=True) + EPS)
    diff = px - py
    # sqrt(0) has an infinite slope; the floor keeps x == x_gt differentiable
    return torch.sqrt((diff ** 2).sum(-1) + EPS ** 2).mean() - EPS


def _check_finite(name: str, value, where: str) -> None:
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v):
        raise TrainingDivergenceError(name, v, where)


def pretrain_loss(recon, bw, sp, use_bandwidth: bool = True, use_sparsity: bool = True,
                  where: str = ""):
    """``recon + bw + sp`` with unit weights; disabled terms contribute nothing."""
    _check_finite("reconstruction", recon, where)
    total = recon
    if use_bandwidth:
        _check_finite("bandwidth", bw, where)
        total = total + bw
    if use_sparsity:
        _check_finite("sparsity", sp, where)
        total = total + sp
    return total


def finetune_loss(pearson, psd_term, w: LossWeights = LossWeights(), where: str = ""):
    _check_finite("pearson", pearson, where)
    _check_finite("psd", psd_term, where)
    return pearson + w.lambda1 * psd_term
