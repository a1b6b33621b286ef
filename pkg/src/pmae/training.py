"""
Pre-training and fine-tuning loops, learning-rate schedule and checkpoints.

All randomness inside a loop is derived from ``(seed, epoch, batch)``, never
from global state, so a run resumed from an epoch checkpoint continues
exactly as the uninterrupted run would.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .datagen import VideoClip, flip_augment, hr_resample_augment
from .losses import (LossWeights, PeakPadding, TrainingDivergenceError, bandwidth_loss,
                     finetune_loss, pearson_loss, pretrain_loss, psd_loss, reconstruction_loss,
                     sparsity_loss)
from .masking import make_mask, sample_step
from .model import ModelConfig, PeriodicMAE, reconstruction_targets
from .spectral import BandLimits

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class OptimConfig:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    batch_size: int = 8
    epochs: int = 30
    warmup_frac: float = 0.05
    lr_scaling: str = "none"  # "linear": base_lr * batch_size / 256
    seed: int = 0

    @property
    def warmup(self) -> int:
        return int(self.warmup_frac * self.epochs)

    @property
    def peak_lr(self) -> float:
        if self.lr_scaling == "linear":
            return self.base_lr * self.batch_size / 256.0
        if self.lr_scaling == "none":
            return self.base_lr
        raise ValueError(f"unknown lr_scaling {self.lr_scaling!r}")


def pretrain_optim(**kw) -> OptimConfig:
    """AdamW(0.9, 0.95), weight decay 0.05, base lr 0.1 under linear scaling,
    batch 4, 120 epochs."""
    d = dict(base_lr=0.1, beta1=0.9, beta2=0.95, weight_decay=0.05, batch_size=4,
             epochs=120, lr_scaling="linear")
    d.update(kw)
    return OptimConfig(**d)


def finetune_optim(**kw) -> OptimConfig:
    """AdamW, lr 0.001, batch 8, 30 epochs."""
    d = dict(base_lr=1e-3, beta1=0.9, beta2=0.999, weight_decay=0.05, batch_size=8,
             epochs=30, lr_scaling="none")
    d.update(kw)
    return OptimConfig(**d)


def schedule_lr(epoch: float, total: int, base_lr: float, warmup: int = 0) -> float:
    """Linear warm-up from 0 over ``warmup`` epochs, then half-cosine decay.

    ``epoch`` may be fractional; the loops call this once per iteration with
    ``epoch + batch / n_batches``.
    """
    if not (0 <= epoch < total):
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if not (0 <= warmup < total):
        raise ValueError(f"warmup {warmup} must lie in [0, {total})")
    if epoch < warmup:
        return base_lr * epoch / warmup
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup) / (total - warmup)))


def make_optimizer(model: torch.nn.Module, cfg: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.peak_lr, betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay)


def derive_seed(*parts) -> int:
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


def param_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class MaskSettings:
    strategy: str = "periodic"
    step_policy: str = "per-epoch"  # per-epoch | per-batch | fixed
    step: int = 2  # used when step_policy == "fixed"
    ratio: float = 0.75


@dataclass
class LossSettings:
    bandwidth: bool = True
    sparsity: bool = True
    recon_over: str = "masked"
    target_norm: bool = True
    lambda1: float = 100.0
    delta_f: float = 0.1
    psd_normalize: bool = True


class RunRecord:
    """Append-only per-epoch log, persisted as newline-delimited JSON."""

    def __init__(self, path=None, meta: Optional[dict] = None):
        self.path = Path(path) if path is not None else None
        self.epochs: List[dict] = []
        self.meta = dict(meta or {})
        self.checkpoints: List[str] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.meta:
                with open(self.path, "a") as fh:
                    fh.write(json.dumps({"type": "meta", **self.meta}, sort_keys=True) + "\n")

    def append(self, entry: dict) -> None:
        if self.epochs and entry["epoch"] <= self.epochs[-1]["epoch"]:
            raise ValueError("run records are append-only and ordered by epoch")
        self.epochs.append(dict(entry))
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps({"type": "epoch", **entry}, sort_keys=True) + "\n")

    def add_checkpoint(self, path) -> None:
        self.checkpoints.append(str(path))
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps({"type": "checkpoint", "path": str(path)}) + "\n")

    def series(self, key: str) -> List[float]:
        return [e[key] for e in self.epochs]

    @staticmethod
    def read(path) -> List[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: PeriodicMAE, optimizer: Optional[torch.optim.Optimizer] = None,
                    epoch: int = 0, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_json(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    config: ModelConfig
    state_dict: dict
    optimizer: Optional[dict]
    epoch: int
    extra: dict = field(default_factory=dict)

    def build_model(self, dtype=torch.float32) -> PeriodicMAE:
        model = PeriodicMAE(self.config).to(dtype)
        load_state_strict(model, self.state_dict)
        return model


def load_checkpoint(path, expect_config: Optional[ModelConfig] = None) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload['version']}, "
                              f"expected {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(json.loads(payload["model_config"]))
    if expect_config is not None:
        a, b = asdict(config), asdict(expect_config)
        diff = [k for k in a if k != "seed" and a[k] != b[k]]
        if diff:
            raise CheckpointError(f"{path}: model config mismatch in {', '.join(diff)}")
    return Checkpoint(config, payload["state_dict"], payload["optimizer"], payload["epoch"],
                      json.loads(payload.get("extra") or "{}"))


def load_state_strict(model: torch.nn.Module, state: dict) -> None:
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"parameter name mismatch: missing={missing} unexpected={unexpected}")
    for k, v in state.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise CheckpointError(f"shape mismatch for {k}: checkpoint {tuple(v.shape)} vs "
                                  f"model {tuple(own[k].shape)}")
    model.load_state_dict(state, strict=True)


# -- loops -------------------------------------------------------------------

def _check_output(name: str, t: torch.Tensor, where: str) -> None:
    if not bool(torch.isfinite(t.detach()).all()):
        raise TrainingDivergenceError(name, float("nan"), where)


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _common_fs(clips: Sequence[VideoClip]) -> float:
    fss = {c.fs for c in clips}
    if len(fss) != 1:
        raise ValueError(f"clips carry mixed sampling rates {sorted(fss)}")
    return fss.pop()


def set_reference_mode(threads: int = 1) -> None:
    """Single-threaded deterministic kernels, for bit-reproducible runs."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def pretrain_model(model: PeriodicMAE, clips: Sequence[VideoClip], optim: OptimConfig,
                   masking: MaskSettings = MaskSettings(), losses: LossSettings = LossSettings(),
                   band: BandLimits = BandLimits(), record: Optional[RunRecord] = None,
                   optimizer: Optional[torch.optim.Optimizer] = None, start_epoch: int = 0,
                   end_epoch: Optional[int] = None, on_epoch: Optional[Callable] = None):
    """Self-supervised pre-training; returns ``(optimizer, record)``.

    Each batch shares one mask plan. With the periodic strategy the step is
    drawn per epoch (or per batch) and the phase offset per batch.
    """
    if not clips:
        raise ValueError("pre-training needs at least one clip")
    cfg = model.config
    fs = _common_fs(clips)
    band.check(fs)
    record = record or RunRecord()
    optimizer = optimizer or make_optimizer(model, optim)
    frames_all = torch.from_numpy(np.stack([c.frames for c in clips]))
    pad = PeakPadding(losses.delta_f)
    dtype = next(model.parameters()).dtype
    end_epoch = optim.epochs if end_epoch is None else end_epoch

    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        model.train()
        sums = {"recon": 0.0, "bandwidth": 0.0, "sparsity": 0.0, "total": 0.0}
        steps = []
        batches = _batches(len(clips), optim.batch_size, optim.seed, epoch)
        lr = schedule_lr(epoch, optim.epochs, optim.peak_lr, optim.warmup)
        for b, idx in enumerate(batches):
            where = f"epoch {epoch} batch {b}"
            _set_lr(optimizer, schedule_lr(epoch + b / len(batches), optim.epochs, optim.peak_lr, optim.warmup))
            params = _mask_params(masking, optim.seed, epoch, b)
            if "step" in params:
                steps.append(params["step"])
            plan = make_mask(masking.strategy, cfg.T, cfg.grid, params,
                             seed=derive_seed(optim.seed, "mask", epoch, b))
            frames = frames_all[idx].to(dtype)
            out = model.forward_pretrain(frames, plan)
            _check_output("reconstruction", out["pixels"], where)
            _check_output("signal-head", out["signal"], where)
            target = reconstruction_targets(frames, normalize=losses.target_norm)
            B = frames.shape[0]
            pred = out["pixels"].reshape(B, -1, out["pixels"].shape[-1])
            target = target.reshape(B, -1, target.shape[-1])
            masked = out["index"].masked_selector()
            if losses.recon_over == "masked" and not bool(masked.any()):
                masked = None
            l_r = reconstruction_loss(pred, target, masked,
                                      recon_over=losses.recon_over if masked is not None else "all")
            l_b = bandwidth_loss(out["signal"], fs, band) if losses.bandwidth else torch.zeros((), dtype=dtype)
            l_s = sparsity_loss(out["signal"], fs, band, pad) if losses.sparsity else torch.zeros((), dtype=dtype)
            total = pretrain_loss(l_r, l_b, l_s, losses.bandwidth, losses.sparsity, where=where)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            for k, v in (("recon", l_r), ("bandwidth", l_b), ("sparsity", l_s), ("total", total)):
                sums[k] += float(v.detach())
        n = len(batches)
        entry = {"epoch": epoch, "stage": "pretrain", "lr": lr, "time_s": time.perf_counter() - t0,
                 **{k: v / n for k, v in sums.items()}}
        if steps:
            entry["steps"] = steps
        record.append(entry)
        logger.info("pretrain epoch %d  recon %.4f  bw %.4f  sp %.4f", epoch, entry["recon"],
                    entry["bandwidth"], entry["sparsity"])
        if on_epoch is not None:
            on_epoch(epoch, optimizer)
    return optimizer, record


def _mask_params(masking: MaskSettings, seed: int, epoch: int, batch: int) -> dict:
    if masking.strategy != "periodic":
        return {"ratio": masking.ratio}
    if masking.step_policy == "per-epoch":
        return {"step": sample_step(epoch, seed)}
    if masking.step_policy == "per-batch":
        return {"step": sample_step(derive_seed(epoch, batch), seed)}
    if masking.step_policy == "fixed":
        return {"step": masking.step}
    raise ValueError(f"unknown step_policy {masking.step_policy!r}")


def augment_clip(clip: VideoClip, band: BandLimits, seed: int, flip: bool = True,
                 resample: bool = True) -> VideoClip:
    if flip:
        clip = flip_augment(clip, seed=derive_seed(seed, "flip"))
    if resample:
        clip = hr_resample_augment(clip, band, seed=derive_seed(seed, "resample"))
    return clip


def finetune_model(model: PeriodicMAE, clips: Sequence[VideoClip], optim: OptimConfig,
                   losses: LossSettings = LossSettings(), band: BandLimits = BandLimits(),
                   augment: bool = True, record: Optional[RunRecord] = None,
                   optimizer: Optional[torch.optim.Optimizer] = None, start_epoch: int = 0,
                   end_epoch: Optional[int] = None, on_epoch: Optional[Callable] = None):
    """Supervised rPPG regression on unmasked clips; returns ``(optimizer, record)``."""
    if not clips:
        raise ValueError("fine-tuning needs at least one clip")
    missing = [c.clip_id for c in clips if c.ppg is None]
    if missing:
        raise ValueError(f"fine-tuning needs ppg labels; missing for {missing[:5]}")
    fs = _common_fs(clips)
    band.check(fs)
    record = record or RunRecord()
    optimizer = optimizer or make_optimizer(model, optim)
    weights = LossWeights(losses.lambda1)
    dtype = next(model.parameters()).dtype
    end_epoch = optim.epochs if end_epoch is None else end_epoch

    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        model.train()
        sums = {"pearson": 0.0, "psd": 0.0, "total": 0.0}
        batches = _batches(len(clips), optim.batch_size, optim.seed, epoch)
        lr = schedule_lr(epoch, optim.epochs, optim.peak_lr, optim.warmup)
        for b, idx in enumerate(batches):
            where = f"epoch {epoch} batch {b}"
            _set_lr(optimizer, schedule_lr(epoch + b / len(batches), optim.epochs, optim.peak_lr, optim.warmup))
            batch = [clips[i] for i in idx]
            if augment:
                batch = [augment_clip(c, band, derive_seed(optim.seed, "aug", epoch, int(i)))
                         for c, i in zip(batch, idx)]
            frames = torch.from_numpy(np.stack([c.frames for c in batch])).to(dtype)
            labels = torch.from_numpy(np.stack([c.ppg for c in batch])).to(dtype)
            pred = model.forward_rppg(frames)
            _check_output("rppg prediction", pred, where)
            l_t = pearson_loss(pred, labels)
            l_f = psd_loss(pred, labels, fs, normalize=losses.psd_normalize)
            total = finetune_loss(l_t, l_f, weights, where=where)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            for k, v in (("pearson", l_t), ("psd", l_f), ("total", total)):
                sums[k] += float(v.detach())
        n = len(batches)
        entry = {"epoch": epoch, "stage": "finetune", "lr": lr, "time_s": time.perf_counter() - t0,
                 "lambda1": losses.lambda1, **{k: v / n for k, v in sums.items()}}
        record.append(entry)
        logger.info("finetune epoch %d  pearson %.4f  psd %.4f", epoch, entry["pearson"], entry["psd"])
        if on_epoch is not None:
            on_epoch(epoch, optimizer)
    return optimizer, record


def predictor(model: PeriodicMAE) -> Callable[[np.ndarray], np.ndarray]:
    """Frozen inference callable mapping ``(T, H, W, 3)`` frames to a pulse trace."""
    model.eval()
    dtype = next(model.parameters()).dtype

    def predict(frames: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(frames)).to(dtype)[None]
            return model.forward_rppg(x)[0].cpu().numpy().astype(np.float64)

    return predict


def transfer_pretrained(model: PeriodicMAE, state: dict) -> None:
    """Copy every pre-trained tensor into ``model`` (names and shapes must match)."""
    load_state_strict(model, state)
