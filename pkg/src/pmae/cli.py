"""Command-line harness: ``pmae run <config> [key=value ...] [--dry-run]`` and ``pmae report <dir>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ExperimentConfig, load_config
from .datagen import DatasetFormatError, load_dataset, synth_dataset, write_dataset
from .evaluation import MetricReport, ablation_report, bland_altman, evaluate
from .model import PeriodicMAE
from .training import (CheckpointError, LossSettings, MaskSettings, OptimConfig, RunRecord,
                       finetune_model, load_checkpoint, predictor, pretrain_model,
                       save_checkpoint, set_reference_mode, transfer_pretrained)

logger = logging.getLogger("pmae")

RUN_MARKER = "run.json"
MASKING_ROWS = (("Random", "random"), ("Frame", "frame"), ("Tube", "tube"), ("Periodic", "periodic"))
LOSS_ROWS = (("{L_r}", False, False), ("{L_r,L_b}", True, False),
             ("{L_r,L_s}", False, True), ("{L_r,L_b,L_s}", True, True))


class StageError(RuntimeError):
    pass


# -- data -------------------------------------------------------------------

def _synth(cfg: ExperimentConfig, n: int, T: int, seed: int):
    d = cfg.data
    return synth_dataset(n, seed=seed, hr_range=(d.hr_lo, d.hr_hi), T=T, H=d.H, W=d.W, fs=d.fs,
                         pulse_amplitude=d.pulse_amplitude,
                         illumination_drift_amp=d.illumination_drift_amp,
                         jitter_px=d.jitter_px, sensor_noise_std=d.sensor_noise_std)


def train_clips(cfg: ExperimentConfig):
    if cfg.data.root:
        # several comma-separated roots are pooled (joint training)
        clips = []
        for root in cfg.data.root.split(","):
            clips.extend(load_dataset(root, resize=cfg.data.resize or None))
        return clips
    return _synth(cfg, cfg.data.n_clips, cfg.data.clip_T, cfg.data.seed)


def eval_clips(cfg: ExperimentConfig):
    if cfg.data.eval_root:
        return load_dataset(cfg.data.eval_root, resize=cfg.data.resize or None)
    # held-out clips come from a disjoint seed stream
    return _synth(cfg, cfg.data.eval_clips, cfg.data.eval_clip_T, cfg.data.seed + 1_000_003)


def _check_model_fits(cfg: ExperimentConfig, clips) -> None:
    m = cfg.model
    for c in clips:
        if c.frames.shape[1:3] != (m.H, m.W) or c.T != m.T:
            raise StageError(f"clip {c.clip_id} has shape {c.frames.shape[:3]}, model expects "
                             f"({m.T}, {m.H}, {m.W}); set data.resize or window the clips")


# -- stages -----------------------------------------------------------------

def _mark(out: Path, stage: str, **extra) -> None:
    (out / RUN_MARKER).write_text(json.dumps({"stage": stage, "status": "complete", **extra},
                                             indent=2, sort_keys=True) + "\n")


def stage_synth(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.data.root:
        raise StageError("synth stage generates data; leave data.root empty")
    clips = train_clips(cfg)
    root = write_dataset(clips, out / "dataset", fmt=cfg.data.frame_format)
    if cfg.data.eval_clips > 0:
        write_dataset(eval_clips(cfg), out / "heldout", fmt=cfg.data.frame_format)
    return {"dataset": str(root), "n_clips": len(clips)}


def run_pretrain(cfg: ExperimentConfig, clips, out: Path, masking: MaskSettings = None,
                 losses: LossSettings = None) -> PeriodicMAE:
    masking = masking or cfg.masking
    losses = losses or cfg.losses
    model = PeriodicMAE(cfg.model)
    record = RunRecord(out / "pretrain_record.ndjson",
                       meta={"stage": "pretrain", "seed": cfg.pretrain.seed})

    def checkpoint(epoch, optimizer):
        p = save_checkpoint(out / "checkpoints" / "pretrain_last.pt", model, optimizer, epoch + 1)
        record.add_checkpoint(p)

    pretrain_model(model, clips, cfg.pretrain, masking, losses, cfg.band, record=record,
                   on_epoch=checkpoint)
    save_checkpoint(out / "pretrained.pt", model, epoch=cfg.pretrain.epochs)
    return model


def run_finetune(cfg: ExperimentConfig, clips, out: Path, init_state: Optional[dict] = None) -> PeriodicMAE:
    model = PeriodicMAE(cfg.model)
    if init_state is not None:
        transfer_pretrained(model, init_state)
    elif cfg.finetune.init:
        ck = load_checkpoint(cfg.finetune.init, expect_config=cfg.model)
        transfer_pretrained(model, ck.state_dict)
    optim = OptimConfig(**{k: v for k, v in asdict(cfg.finetune).items() if k in OptimConfig.__dataclass_fields__})
    record = RunRecord(out / "finetune_record.ndjson",
                       meta={"stage": "finetune", "seed": optim.seed, "init": cfg.finetune.init})

    def checkpoint(epoch, optimizer):
        p = save_checkpoint(out / "checkpoints" / "finetune_last.pt", model, optimizer, epoch + 1)
        record.add_checkpoint(p)

    finetune_model(model, clips, optim, cfg.losses, cfg.band, augment=cfg.finetune.augment,
                   record=record, on_epoch=checkpoint)
    save_checkpoint(out / "finetuned.pt", model, epoch=optim.epochs)
    return model


def run_evaluate(cfg: ExperimentConfig, model: PeriodicMAE, clips, out: Path) -> MetricReport:
    model_T = model.config.T if model.config.T != cfg.evaluate.window else None
    report = evaluate(predictor(model), clips, cfg.band, window=cfg.evaluate.window,
                      model_T=model_T, snr_window=cfg.evaluate.snr_window or None)
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    if report.n_clips >= 2:
        bland_altman([(c.pred_hr, c.gt_hr) for c in report.per_clip]).write(out)
    return report


def stage_pretrain(cfg, out):
    clips = train_clips(cfg)
    _check_model_fits(cfg, clips)
    run_pretrain(cfg, clips, out)
    return {"checkpoint": str(out / "pretrained.pt")}


def stage_finetune(cfg, out):
    clips = train_clips(cfg)
    _check_model_fits(cfg, clips)
    run_finetune(cfg, clips, out)
    return {"checkpoint": str(out / "finetuned.pt")}


def stage_evaluate(cfg, out):
    if not cfg.evaluate.checkpoint:
        raise StageError("evaluate.checkpoint is not set")
    model = load_checkpoint(cfg.evaluate.checkpoint, expect_config=cfg.model).build_model()
    report = run_evaluate(cfg, model, eval_clips(cfg), out)
    return report.summary()


def _pipeline(cfg, clips, held, out: Path, masking: MaskSettings, losses: LossSettings) -> MetricReport:
    out.mkdir(parents=True, exist_ok=True)
    pre = run_pretrain(cfg, clips, out, masking=masking, losses=losses)
    ft = run_finetune(cfg, clips, out, init_state=pre.state_dict())
    report = run_evaluate(cfg, ft, held, out)
    _mark(out, "ablation-subrun")
    return report


def _ablation(cfg, out, rows) -> dict:
    # one dataset for every sub-run so only the ablated factor changes
    clips, held = train_clips(cfg), eval_clips(cfg)
    _check_model_fits(cfg, clips)
    runs = []
    for label, masking, losses in rows:
        slug = label.strip("{}").replace(",", "+").replace("_", "").lower()
        logger.info("ablation sub-run %s", label)
        runs.append((label, _pipeline(cfg, clips, held, out / slug, masking, losses)))
    table = ablation_report(runs)
    (out / "ablation.csv").write_text(table["csv"])
    (out / "ablation.txt").write_text(table["text"] + "\n")
    print(table["text"])
    return {"rows": [r["label"] for r in table["rows"]]}


def stage_ablate_masking(cfg, out):
    rows = [(label, replace(cfg.masking, strategy=s), cfg.losses) for label, s in MASKING_ROWS]
    return _ablation(cfg, out, rows)


def stage_ablate_losses(cfg, out):
    rows = [(label, cfg.masking, replace(cfg.losses, bandwidth=b, sparsity=s)) for label, b, s in LOSS_ROWS]
    return _ablation(cfg, out, rows)


STAGE_FUNCS = {
    "synth": stage_synth,
    "pretrain": stage_pretrain,
    "finetune": stage_finetune,
    "evaluate": stage_evaluate,
    "ablate-masking": stage_ablate_masking,
    "ablate-losses": stage_ablate_losses,
}


def execute(cfg: ExperimentConfig) -> Path:
    """Run ``cfg.stage``; the resolved config is written before anything else."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    if cfg.reference.deterministic:
        set_reference_mode(cfg.reference.threads)
    t0 = time.perf_counter()
    info = STAGE_FUNCS[cfg.stage](cfg, out)
    _mark(out, cfg.stage, elapsed_s=round(time.perf_counter() - t0, 3), **(info or {}))
    return out


# -- report -----------------------------------------------------------------

def report(out_dir) -> str:
    out = Path(out_dir)
    marker = out / RUN_MARKER
    if not marker.is_file():
        raise StageError(f"{out} has no {RUN_MARKER}; the run is missing or incomplete")
    info = json.loads(marker.read_text())
    if info.get("status") != "complete":
        raise StageError(f"run in {out} did not complete")
    lines = [f"stage: {info['stage']}"]
    if (out / "ablation.txt").is_file():
        lines.append((out / "ablation.txt").read_text().rstrip())
    if (out / "metrics.json").is_file():
        lines.append(MetricReport.from_json((out / "metrics.json").read_text()).format_table())
    if (out / "bland_altman.json").is_file():
        ba = json.loads((out / "bland_altman.json").read_text())
        lines.append(f"Bland-Altman: mean diff {ba['mean_diff']:.3f} bpm, "
                     f"LoA [{ba['loa_lo']:.3f}, {ba['loa_hi']:.3f}] (n={ba['n']})")
    for name in ("pretrain_record.ndjson", "finetune_record.ndjson"):
        path = out / name
        if path.is_file():
            epochs = [e for e in RunRecord.read(path) if e.get("type") == "epoch"]
            if epochs:
                last = epochs[-1]
                lines.append(f"{name.split('_')[0]}: {len(epochs)} epochs, final total loss "
                             f"{last['total']:.3f}")
    if info["stage"] == "synth":
        lines.append(f"dataset: {info.get('dataset')} ({info.get('n_clips')} clips)")
    return "\n".join(lines)


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmae", description="Periodic masked autoencoder rPPG experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the stage named in a config file")
    r.add_argument("config")
    r.add_argument("overrides", nargs="*", metavar="key=value")
    r.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    rep = sub.add_parser("report", help="summarise a completed run directory")
    rep.add_argument("dir")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    # overrides may also follow --dry-run
    args, extra = parser.parse_known_args(argv)
    if extra:
        if args.command != "run" or any(a.startswith("-") or "=" not in a for a in extra):
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        args.overrides = list(args.overrides) + extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        try:
            print(report(args.dir))
        except StageError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0

    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.dry_run:
        text = cfg.to_json()
        print(text, end="")
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "validation.log").write_text(f"config {args.config} resolved; stage {cfg.stage}; ok\n")
        return 0
    try:
        out = execute(cfg)
    except (StageError, CheckpointError, DatasetFormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: stage {cfg.stage} failed: {exc}", file=sys.stderr)
        return 1
    print(f"{cfg.stage} complete: {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
