"""
Synthetic pulsatile video, on-disk dataset I/O, clip windowing and the
fine-tuning augmentations.

On-disk layout (read by :func:`load_dataset`, written by :func:`write_dataset`)::

    <root>/<clip_id>/frame_000000.npy   (or .png)
    <root>/<clip_id>/ppg.csv            one sample per row, first column
    <root>/<clip_id>/meta.json          {"fs": 30.0, "subject_id": "s01"}
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .spectral import BandLimits, hr_from_signal

logger = logging.getLogger(__name__)

_FRAME_RE = re.compile(r"^frame_(\d+)\.(npy|png)$")


class DatasetFormatError(Exception):
    pass


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    fs: float
    ppg: Optional[np.ndarray] = None
    subject_id: str = ""
    clip_id: str = ""
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {f.shape}")
        T, H, W, _ = f.shape
        if min(T, H, W) <= 0:
            raise ValueError("frames must be non-empty")
        if H % 16 or W % 16:
            raise ValueError(f"frame size {H}x{W} must be divisible by 16")
        if self.ppg is not None:
            self.ppg = np.asarray(self.ppg, dtype=np.float64)
            if self.ppg.shape != (T,):
                raise ValueError(f"ppg length {self.ppg.shape} does not match {T} frames")
        if self.fs <= 0:
            raise ValueError("fs must be positive")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.frames.shape[:3]


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int


@dataclass
class SynthSpec:
    hr_bpm: float = 72.0
    fs: float = 30.0
    T: int = 160
    H: int = 128
    W: int = 128
    skin_region: Optional[Rect] = None  # defaults to the central half of the frame
    pulse_amplitude: float = 0.02
    illumination_drift_amp: float = 0.0
    jitter_px: int = 0
    sensor_noise_std: float = 0.0
    seed: int = 0
    clip_id: str = ""
    subject_id: str = ""

    def region(self) -> Rect:
        if self.skin_region is not None:
            return self.skin_region
        return Rect(self.H // 4, self.W // 4, self.H // 2, self.W // 2)


def _base_pattern(H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    # background gradient plus an elliptical "face" with a little texture
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W]).reshape(2, 1, 1)
    bg = np.stack([0.25 + 0.2 * xx, 0.3 + 0.1 * yy, 0.35 + 0.15 * (1 - xx)], axis=-1)
    cy, cx = 0.5 + rng.uniform(-0.05, 0.05, size=2)
    ry, rx = 0.42, 0.34
    face = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    tone = np.array([0.62, 0.45, 0.36]) + rng.uniform(-0.08, 0.08, size=3)
    texture = 0.03 * np.sin(2 * np.pi * (3 * xx + 2 * yy + rng.uniform()))[..., None]
    img = np.where(face[..., None], tone + texture, bg)
    return img


def synth_clip(spec: SynthSpec) -> VideoClip:
    """Render one synthetic clip with a sinusoidal pulse in the skin region.

    The green channel of every skin pixel carries ``pulse_amplitude * s(k)``;
    red and blue carry weaker copies, roughly following haemoglobin absorption.
    Output is bit-identical for identical specs.
    """
    if not (40.0 <= spec.hr_bpm <= 180.0):
        raise ValueError(f"hr_bpm must lie in [40, 180], got {spec.hr_bpm}")
    if not (0.0 <= spec.pulse_amplitude <= 0.1):
        raise ValueError(f"pulse_amplitude must lie in [0, 0.1], got {spec.pulse_amplitude}")
    r = spec.region()
    if r.top < 0 or r.left < 0 or r.height <= 0 or r.width <= 0 \
            or r.top + r.height > spec.H or r.left + r.width > spec.W:
        raise ValueError(f"skin region {r} lies outside the {spec.H}x{spec.W} frame")

    rng = np.random.default_rng(spec.seed)
    base = _base_pattern(spec.H, spec.W, rng)
    k = np.arange(spec.T)
    s = np.sin(2 * np.pi * (spec.hr_bpm / 60.0) * k / spec.fs)

    frames = np.repeat(base[None], spec.T, axis=0)
    gain = spec.pulse_amplitude * np.array([0.4, 1.0, 0.25])
    sl = (slice(None), slice(r.top, r.top + r.height), slice(r.left, r.left + r.width))
    frames[sl] += s[:, None, None, None] * gain

    if spec.illumination_drift_amp > 0:
        f_drift = rng.uniform(0.05, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        drift = spec.illumination_drift_amp * np.sin(2 * np.pi * f_drift * k / spec.fs + phase)
        frames = frames * (1.0 + drift[:, None, None, None])
    if spec.jitter_px > 0:
        shifts = rng.integers(-spec.jitter_px, spec.jitter_px + 1, size=(spec.T, 2))
        for t, (dy, dx) in enumerate(shifts):
            frames[t] = np.roll(frames[t], (int(dy), int(dx)), axis=(0, 1))
    if spec.sensor_noise_std > 0:
        frames = frames + rng.normal(0.0, spec.sensor_noise_std, size=frames.shape)

    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    ppg = (s - s.mean()) / (s.std() + 1e-12)
    return VideoClip(frames=frames, fs=spec.fs, ppg=ppg,
                     subject_id=spec.subject_id or f"synth{spec.seed}",
                     clip_id=spec.clip_id or f"clip{spec.seed:06d}")


def synth_dataset(n_clips: int, seed: int = 0, hr_range=(45.0, 150.0), **spec_kwargs) -> List[VideoClip]:
    """``n_clips`` synthetic clips with heart rates drawn uniformly from ``hr_range``."""
    rng = np.random.default_rng(seed)
    hrs = rng.uniform(*hr_range, size=n_clips)
    seeds = rng.integers(0, 2 ** 31 - 1, size=n_clips)
    return [
        synth_clip(SynthSpec(hr_bpm=float(hr), seed=int(s), clip_id=f"clip{i:04d}",
                             subject_id=f"subj{i:04d}", **spec_kwargs))
        for i, (hr, s) in enumerate(zip(hrs, seeds))
    ]


def write_dataset(clips: Sequence[VideoClip], root, fmt: str = "npy") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        d = root / clip.clip_id
        d.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(clip.frames):
            if fmt == "npy":
                np.save(d / f"frame_{t:06d}.npy", frame.astype(np.float32))
            elif fmt == "png":
                from PIL import Image
                Image.fromarray(np.round(frame * 255).astype(np.uint8)).save(d / f"frame_{t:06d}.png")
            else:
                raise ValueError(f"unknown frame format {fmt!r}")
        if clip.ppg is not None:
            with open(d / "ppg.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                for v in clip.ppg:
                    w.writerow([repr(float(v))])
        with open(d / "meta.json", "w") as fh:
            json.dump({"fs": clip.fs, "subject_id": clip.subject_id}, fh)
    return root


def _read_frame(path: Path) -> np.ndarray:
    try:
        if path.suffix == ".npy":
            arr = np.load(path).astype(np.float32)
            return arr
        from PIL import Image
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return arr
    except Exception as exc:
        raise DatasetFormatError(f"cannot read frame {path}: {exc}") from exc


def _resize(frames: np.ndarray, size: int) -> np.ndarray:
    import torch
    import torch.nn.functional as F
    t = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out.permute(0, 2, 3, 1).numpy()


def load_clip(d: Path, resize: Optional[int] = None) -> VideoClip:
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise DatasetFormatError(f"missing meta.json in {d}")
    try:
        meta = json.loads(meta_path.read_text())
        fs = float(meta["fs"])
    except (ValueError, KeyError) as exc:
        raise DatasetFormatError(f"bad meta.json in {d}: {exc}") from exc

    frame_files = sorted((p for p in d.iterdir() if _FRAME_RE.match(p.name)),
                         key=lambda p: int(_FRAME_RE.match(p.name).group(1)))
    if not frame_files:
        raise DatasetFormatError(f"no frame files in {d}")
    frames = np.stack([_read_frame(p) for p in frame_files])
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise DatasetFormatError(f"frames in {d} are not HxWx3 images")
    if frames.max() > 1.0:
        frames = frames / 255.0
    if resize is not None:
        frames = _resize(frames, resize)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)

    ppg = None
    notes: List[str] = []
    ppg_path = d / "ppg.csv"
    if ppg_path.exists():
        with open(ppg_path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        try:
            ppg = np.array([float(r[0]) for r in rows], dtype=np.float64)
        except ValueError as exc:
            raise DatasetFormatError(f"non-numeric value in {ppg_path}: {exc}") from exc
        if len(ppg) != len(frames):
            n = min(len(ppg), len(frames))
            msg = f"{d.name}: {len(frames)} frames vs {len(ppg)} ppg samples, truncated to {n}"
            logger.warning(msg)
            notes.append(msg)
            frames, ppg = frames[:n], ppg[:n]

    return VideoClip(frames=frames, fs=fs, ppg=ppg, subject_id=str(meta.get("subject_id", "")),
                     clip_id=d.name, warnings=notes)


def load_dataset(root, resize: Optional[int] = None) -> List[VideoClip]:
    """Load every clip directory under ``root``, sorted by clip id."""
    root = Path(root)
    if not root.exists():
        raise DatasetFormatError(f"dataset root {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    return [load_clip(d, resize=resize) for d in dirs]


def window_clips(clips: Sequence[VideoClip], T_win: int, stride: int) -> List[VideoClip]:
    """Cut clips into contiguous ``T_win``-frame windows; short tails are dropped."""
    if T_win < 16:
        raise ValueError("T_win must be at least 16")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    out = []
    for clip in clips:
        for i, start in enumerate(range(0, clip.T - T_win + 1, stride)):
            sl = slice(start, start + T_win)
            out.append(replace(
                clip,
                frames=clip.frames[sl],
                ppg=None if clip.ppg is None else clip.ppg[sl],
                clip_id=f"{clip.clip_id}_w{i:03d}",
                warnings=list(clip.warnings),
            ))
    return out


def _resample_time(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``x`` along axis 0 at fractional ``positions``."""
    lo = np.floor(positions).astype(int)
    hi = np.minimum(lo + 1, len(x) - 1)
    w = (positions - lo).reshape((-1,) + (1,) * (x.ndim - 1))
    return (1 - w) * x[lo] + w * x[hi]


def hr_resample_augment(clip: VideoClip, band: BandLimits = BandLimits(), seed: int = 0,
                        hi_bpm: float = 90.0, lo_bpm: float = 75.0) -> VideoClip:
    """Time-rescale fast or slow clips toward the 75-90 bpm region.

    Above ``hi_bpm`` the clip is stretched by a factor drawn from
    ``[1, hr/lo_bpm]``; below ``lo_bpm`` it is compressed by a factor from
    ``[1, hi_bpm/hr]`` and mirror-padded back to the original length.
    """
    if clip.ppg is None:
        raise ValueError("hr_resample_augment requires a clip with ppg labels")
    T = clip.T
    gt_hr = hr_from_signal(clip.ppg, clip.fs, band)
    rng = np.random.default_rng(seed)
    if gt_hr > hi_bpm:
        factor = rng.uniform(1.0, gt_hr / lo_bpm)
        pos = np.arange(T) / factor
    elif gt_hr < lo_bpm:
        factor = rng.uniform(1.0, hi_bpm / gt_hr)
        n_src = int(np.floor((T - 1) / factor)) + 1
        pos = np.arange(n_src) * factor
    else:
        return clip

    frames = _resample_time(clip.frames.astype(np.float64), pos)
    ppg = _resample_time(clip.ppg, pos)
    if len(pos) < T:
        frames = _mirror_pad(frames, T)
        ppg = _mirror_pad(ppg, T)
    return replace(clip, frames=np.clip(frames, 0, 1).astype(clip.frames.dtype), ppg=ppg,
                   warnings=list(clip.warnings))


def _mirror_pad(x: np.ndarray, T: int) -> np.ndarray:
    out = x
    while len(out) < T:
        need = T - len(out)
        tail = out[::-1][1:need + 1]
        if len(tail) == 0:
            tail = out[-1:]
        out = np.concatenate([out, tail], axis=0)
    return out[:T]


def flip_augment(clip: VideoClip, seed: int = 0, p: float = 0.5) -> VideoClip:
    """Mirror every frame left-right with probability ``p``; the ppg is untouched."""
    rng = np.random.default_rng(seed)
    if rng.random() < p:
        return replace(clip, frames=clip.frames[:, :, ::-1, :].copy(), warnings=list(clip.warnings))
    return clip


def stack_clips(clips: Sequence[VideoClip]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Batch arrays ``(N, T, H, W, 3)`` and ``(N, T)`` (or ``None`` without labels)."""
    frames = np.stack([c.frames for c in clips])
    if all(c.ppg is not None for c in clips):
        return frames, np.stack([c.ppg for c in clips])
    return frames, None
