"""HR-level metrics, Bland-Altman agreement and ablation tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .spectral import BandLimits, hr_from_signal, snr_metric

logger = logging.getLogger(__name__)

EPS = 1e-8


@dataclass
class ClipResult:
    clip_id: str
    pred_hr: float
    gt_hr: float
    snr: float


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: float
    rho: float
    snr: float
    n_clips: int
    per_clip: List[ClipResult] = field(default_factory=list)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("mae", "rmse", "mape", "rho", "snr", "n_clips")}

    def to_json(self, path=None) -> str:
        d = self.summary()
        d["per_clip"] = [asdict(c) for c in self.per_clip]
        text = json.dumps(d, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["clip_id", "pred_hr", "gt_hr", "snr"])
        for c in self.per_clip:
            w.writerow([c.clip_id, f"{c.pred_hr:.3f}", f"{c.gt_hr:.3f}", f"{c.snr:.3f}"])
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        per = [ClipResult(**c) for c in d.pop("per_clip", [])]
        return cls(per_clip=per, **d)

    def format_table(self) -> str:
        head = f"{'MAE':>8} {'RMSE':>8} {'MAPE':>8} {'rho':>8} {'SNR':>8} {'n':>5}"
        row = (f"{self.mae:8.3f} {self.rmse:8.3f} {self.mape:8.3f} "
               f"{self.rho:8.3f} {self.snr:8.3f} {self.n_clips:5d}")
        return head + "\n" + row


def hr_metrics(pred_hr: Sequence[float], gt_hr: Sequence[float]) -> dict:
    p = np.asarray(pred_hr, dtype=np.float64)
    g = np.asarray(gt_hr, dtype=np.float64)
    if p.shape != g.shape or p.size == 0:
        raise ValueError("pred and gt HR lists must be non-empty and of equal length")
    err = p - g
    pc, gc = p - p.mean(), g - g.mean()
    rho = float((pc * gc).sum() / math.sqrt((pc ** 2).sum() * (gc ** 2).sum() + EPS))
    return {
        "mae": float(np.abs(err).mean()),
        "rmse": float(np.sqrt((err ** 2).mean())),
        "mape": float((np.abs(err) / np.abs(g)).mean() * 100.0),
        "rho": rho,
    }


def report_from_results(results: Sequence[ClipResult]) -> MetricReport:
    results = sorted(results, key=lambda r: r.clip_id)
    m = hr_metrics([r.pred_hr for r in results], [r.gt_hr for r in results])
    snr = float(np.mean([r.snr for r in results]))
    return MetricReport(snr=snr, n_clips=len(results), per_clip=list(results), **m)


def predict_segment_signal(predict_fn: Callable, frames: np.ndarray, model_T: Optional[int]) -> np.ndarray:
    """Predict a pulse trace for ``frames``; longer segments are cut into
    ``model_T`` chunks whose z-scored outputs are concatenated."""
    T = len(frames)
    if model_T is None or model_T == T:
        return np.asarray(predict_fn(frames), dtype=np.float64).reshape(-1)
    if T % model_T:
        raise ValueError(f"evaluation window {T} is not a multiple of the model length {model_T}")
    parts = []
    for start in range(0, T, model_T):
        y = np.asarray(predict_fn(frames[start:start + model_T]), dtype=np.float64).reshape(-1)
        parts.append((y - y.mean()) / (y.std() + EPS))
    return np.concatenate(parts)


def evaluate(predict_fn: Callable, clips, band: BandLimits = BandLimits(), window: int = 160,
             model_T: Optional[int] = None, snr_window: Optional[str] = None) -> MetricReport:
    """Segment-level HR evaluation.

    ``predict_fn`` maps a ``(T, H, W, 3)`` array to a length-``T`` pulse trace.
    Each clip is cut into non-overlapping ``window``-frame segments; segment
    HRs come from the dominant in-band peak of prediction and label alike.
    """
    clips = list(clips)
    if not clips:
        raise ValueError("cannot evaluate on an empty dataset")
    results = []
    for clip in sorted(clips, key=lambda c: c.clip_id):
        if clip.ppg is None:
            raise ValueError(f"clip {clip.clip_id} has no ppg labels")
        if clip.T < window:
            logger.warning("clip %s has %d frames, shorter than the %d-frame window; skipped",
                           clip.clip_id, clip.T, window)
            continue
        for i, start in enumerate(range(0, clip.T - window + 1, window)):
            seg = slice(start, start + window)
            pred = predict_segment_signal(predict_fn, clip.frames[seg], model_T)
            gt = clip.ppg[seg]
            gt_hr = hr_from_signal(gt, clip.fs, band)
            results.append(ClipResult(
                clip_id=f"{clip.clip_id}_s{i:03d}",
                pred_hr=hr_from_signal(pred, clip.fs, band),
                gt_hr=gt_hr,
                snr=snr_metric(pred, gt_hr, clip.fs, band, window=snr_window),
            ))
    if not results:
        raise ValueError("no clip was long enough for the evaluation window")
    return report_from_results(results)


@dataclass
class BlandAltman:
    mean_diff: float
    sd_diff: float
    loa_lo: float
    loa_hi: float
    points: List[Tuple[float, float]]

    def summary(self) -> dict:
        return {"mean_diff": self.mean_diff, "sd_diff": self.sd_diff,
                "loa_lo": self.loa_lo, "loa_hi": self.loa_hi, "n": len(self.points)}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bland_altman_points.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mean", "diff"])
            for m, d in self.points:
                w.writerow([f"{m:.6f}", f"{d:.6f}"])
        (out / "bland_altman.json").write_text(json.dumps(self.summary(), indent=2))


def bland_altman(pairs: Sequence[Tuple[float, float]]) -> BlandAltman:
    """Agreement statistics for ``(pred_hr, gt_hr)`` pairs.

    Limits of agreement are ``mean(d) +/- 1.96 * sd(d)`` with ``d = pred - gt``
    and the sample (n - 1) standard deviation.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 2:
        raise ValueError("bland_altman needs at least two (pred, gt) pairs")
    d = arr[:, 0] - arr[:, 1]
    mean_d = float(d.mean())
    sd = float(d.std(ddof=1))
    points = [(float(m), float(x)) for m, x in zip(arr.mean(axis=1), d)]
    return BlandAltman(mean_d, sd, mean_d - 1.96 * sd, mean_d + 1.96 * sd, points)


ABLATION_COLUMNS = ("mae", "rmse", "mape")


def ablation_report(runs: Sequence[Tuple[str, MetricReport]], tol: float = 1e-12) -> dict:
    """Table with one row per run and the per-column minimum flagged.

    Returns ``{"rows": [...], "best": {col: [labels]}, "csv": str, "text": str}``.
    Ties are all flagged.
    """
    if not runs:
        raise ValueError("ablation_report needs at least one run")
    best = {}
    for col in ABLATION_COLUMNS:
        vals = [getattr(r, col) for _, r in runs]
        lo = min(vals)
        best[col] = [label for (label, r) in runs if getattr(r, col) <= lo + tol]

    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["label"] + [c.upper() for c in ABLATION_COLUMNS] + [f"best_{c}" for c in ABLATION_COLUMNS])
    rows = []
    for label, r in runs:
        flags = [label in best[c] for c in ABLATION_COLUMNS]
        rows.append({"label": label, **{c: getattr(r, c) for c in ABLATION_COLUMNS},
                     **{f"best_{c}": f for c, f in zip(ABLATION_COLUMNS, flags)}})
        w.writerow([label] + [f"{getattr(r, c):.3f}" for c in ABLATION_COLUMNS] + [int(f) for f in flags])

    width = max(len("Type"), *(len(l) for l, _ in runs))
    lines = [f"{'Type':<{width}} " + " ".join(f"{c.upper():>9}" for c in ABLATION_COLUMNS)]
    for row in rows:
        cells = []
        for c in ABLATION_COLUMNS:
            mark = "*" if row[f"best_{c}"] else " "
            cells.append(f"{row[c]:8.3f}{mark}")
        lines.append(f"{row['label']:<{width}} " + " ".join(cells))
    lines.append("(* = best in column)")
    return {"rows": rows, "best": best, "csv": buf.getvalue(), "text": "\n".join(lines)}
