"""
Frequency-domain primitives shared by the losses, augmentation and evaluation.

All spectra are one-sided. ``power[k] = |DFT(x)[k]|**2 / n`` with the bins
that have a negative-frequency twin doubled, so ``power.sum() == (x**2).sum()``
for an unwindowed real signal.

Every function accepts either numpy arrays or torch tensors. Tensor input
stays on the autograd graph, which is how the training losses use ``psd``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

ArrayLike = Union[np.ndarray, torch.Tensor, list, tuple]

#: Physiological heart-rate band, 40 to 180 bpm.
HR_BAND_LO = 40.0 / 60.0
HR_BAND_HI = 3.0

MIN_LENGTH = 8
EPS = 1e-8


class DegenerateSpectrumWarning(UserWarning):
    """Raised (as a warning) when a spectrum carries no usable power."""


class EmptyBandError(ValueError):
    pass


@dataclass(frozen=True)
class BandLimits:
    lo: float = HR_BAND_LO
    hi: float = HR_BAND_HI

    def __post_init__(self):
        if not (0 < self.lo < self.hi):
            raise ValueError(f"band must satisfy 0 < lo < hi, got [{self.lo}, {self.hi}]")

    def check(self, fs: float) -> None:
        if self.hi > fs / 2 + 1e-12:
            raise ValueError(f"band upper edge {self.hi} Hz exceeds Nyquist {fs / 2} Hz")

    def to_bpm(self) -> tuple:
        return 60.0 * self.lo, 60.0 * self.hi


@dataclass
class Spectrum:
    """One-sided power spectrum.

    ``power`` and ``freqs`` share the container type of the input signal
    (numpy in, numpy out; tensor in, tensor out). ``power`` may carry a batch
    of leading dimensions; the last axis is frequency.
    """

    power: Union[np.ndarray, torch.Tensor]
    freqs: np.ndarray
    fs: float
    n: int

    @property
    def resolution(self) -> float:
        return self.fs / self.n

    def band_mask(self, band: BandLimits) -> np.ndarray:
        return band_mask(self.freqs, band)


def band_mask(freqs: np.ndarray, band: BandLimits, tol: float = 1e-9) -> np.ndarray:
    """Boolean selector of bins whose centre lies in ``[lo, hi]`` (inclusive)."""
    return (freqs >= band.lo - tol) & (freqs <= band.hi + tol)


def _as_tensor(x: ArrayLike) -> tuple:
    if isinstance(x, torch.Tensor):
        return x, True
    arr = np.asarray(x, dtype=np.float64)
    return torch.from_numpy(arr), False


def _window(name: Optional[str], n: int, like: torch.Tensor) -> Optional[torch.Tensor]:
    if name is None or name == "none":
        return None
    if name == "hann":
        return torch.hann_window(n, periodic=False, dtype=like.dtype, device=like.device)
    raise ValueError(f"unknown window {name!r}")


def psd(x: ArrayLike, fs: float, window: Optional[str] = None, nfft: Optional[int] = None) -> Spectrum:
    """One-sided power spectral density of ``x`` along its last axis.

    ``window`` and ``nfft`` (zero padding) are for evaluation only; the
    defaults give the rectangular, energy-conserving spectrum used by losses.
    """
    t, is_tensor = _as_tensor(x)
    n = t.shape[-1]
    if n < MIN_LENGTH:
        raise ValueError(f"signal length {n} is below the minimum of {MIN_LENGTH}")
    if fs <= 0:
        raise ValueError(f"sampling rate must be positive, got {fs}")
    if not torch.isfinite(t.detach()).all():
        raise ValueError("signal contains non-finite values")

    w = _window(window, n, t)
    if w is not None:
        t = t * w
    m = n if nfft is None else int(nfft)
    if m < n:
        raise ValueError(f"nfft={m} shorter than signal length {n}")

    spec = torch.fft.rfft(t, n=m, dim=-1)
    power = (spec.real ** 2 + spec.imag ** 2) / m
    n_bins = m // 2 + 1
    scale = torch.ones(n_bins, dtype=power.dtype, device=power.device)
    # bins 1..ceil(m/2)-1 have a negative-frequency twin
    scale[1:(m - 1) // 2 + 1] = 2.0
    power = power * scale

    freqs = np.arange(n_bins) * fs / m
    if not is_tensor:
        power = power.numpy()
    return Spectrum(power=power, freqs=freqs, fs=float(fs), n=m)


def _sum_last(p, mask=None):
    if mask is not None:
        p = p[..., mask]
    if isinstance(p, torch.Tensor):
        return p.sum(dim=-1)
    return p.sum(axis=-1)


def band_power_fraction(s: Spectrum, band: BandLimits, inside: bool = True):
    """Fraction of total power that falls inside (or outside) ``band``.

    A spectrum with zero total power returns 0 and emits a
    :class:`DegenerateSpectrumWarning`. ``inside`` and ``outside`` fractions
    of the same spectrum always add to one.
    """
    mask = s.band_mask(band)
    total = _sum_last(s.power)
    in_band = _sum_last(s.power, mask)
    degenerate = total <= 0
    if bool(np.any(np.asarray(degenerate.detach() if isinstance(degenerate, torch.Tensor) else degenerate))):
        warnings.warn("spectrum has zero total power", DegenerateSpectrumWarning, stacklevel=2)
    if isinstance(total, torch.Tensor):
        safe = torch.where(degenerate, torch.ones_like(total), total)
        frac_in = torch.where(degenerate, torch.zeros_like(total), in_band / safe)
        frac_out = torch.where(degenerate, torch.zeros_like(total), 1.0 - frac_in)
    else:
        safe = np.where(degenerate, 1.0, total)
        frac_in = np.where(degenerate, 0.0, in_band / safe)
        frac_out = np.where(degenerate, 0.0, 1.0 - frac_in)
        if np.ndim(frac_in) == 0:
            frac_in, frac_out = float(frac_in), float(frac_out)
    return frac_in if inside else frac_out


def peak_bin(power: np.ndarray, freqs: np.ndarray, band: BandLimits) -> int:
    """Index (into the full spectrum) of the strongest in-band bin.

    Powers within ``1e-12`` of the total of each other are treated as tied
    and the lowest frequency wins.
    """
    power = np.asarray(power, dtype=np.float64)
    idx = np.flatnonzero(band_mask(freqs, band))
    if idx.size == 0:
        raise EmptyBandError(f"no frequency bin falls in [{band.lo}, {band.hi}] Hz")
    sub = power[idx]
    tol = 1e-12 * max(float(power.sum()), np.finfo(float).tiny)
    best = np.flatnonzero(sub >= sub.max() - tol)[0]
    return int(idx[best])


def dominant_frequency(s: Spectrum, band: BandLimits, interpolate: bool = False) -> float:
    """Centre frequency of the strongest bin within ``band``.

    With ``interpolate`` the peak is refined by a parabola through the
    neighbouring bins; the default returns the bin centre.
    """
    p = s.power.detach().cpu().numpy() if isinstance(s.power, torch.Tensor) else np.asarray(s.power)
    if p.ndim != 1:
        raise ValueError("dominant_frequency expects a single spectrum")
    k = peak_bin(p, s.freqs, band)
    f = float(s.freqs[k])
    if interpolate and 0 < k < len(p) - 1:
        a, b, c = p[k - 1], p[k], p[k + 1]
        denom = a - 2 * b + c
        if denom != 0:
            f += 0.5 * (a - c) / denom * s.resolution
    return f


def hr_from_signal(x: ArrayLike, fs: float, band: BandLimits = BandLimits(), **psd_kwargs) -> float:
    """Heart rate in bpm from the dominant in-band spectral peak of ``x``."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return 60.0 * dominant_frequency(psd(x, fs, **psd_kwargs), band)


def snr_metric(
    pred: ArrayLike,
    gt_hr: float,
    fs: float,
    band: BandLimits = BandLimits(),
    half_width: float = 0.1,
    window: Optional[str] = None,
    nfft: Optional[int] = None,
) -> float:
    """Pulse signal-to-noise ratio in dB.

    Power within ``half_width`` Hz of the reference fundamental and of its
    second harmonic, divided by the remaining in-band power. When nothing is
    left in the denominator the ratio is clamped to +60 dB.
    """
    f0 = gt_hr / 60.0
    if not (band.lo - 1e-9 <= f0 <= band.hi + 1e-9):
        raise ValueError(f"reference HR {gt_hr} bpm lies outside the band")
    if isinstance(pred, torch.Tensor):
        pred = pred.detach().cpu().numpy()
    x = np.asarray(pred, dtype=np.float64)
    x = x - x.mean()
    s = psd(x, fs, window=window, nfft=nfft)
    freqs, power = s.freqs, s.power
    near = (np.abs(freqs - f0) <= half_width + 1e-9) | (np.abs(freqs - 2 * f0) <= half_width + 1e-9)
    signal = power[near].sum()
    noise = power[band_mask(freqs, band) & ~near].sum()
    if noise <= 0:
        return 60.0
    if signal <= 0:
        return -60.0
    return float(min(60.0, 10.0 * math.log10(signal / noise)))

