"""
Declarative experiment configuration.

A config file is TOML with one table per section. Any field may be
overridden on the command line with a dotted path (``pretrain.base_lr=1e-4``).
Resolution is pure: the same file and overrides always give byte-identical
resolved JSON.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import tomli

from .model import ModelConfig
from .spectral import BandLimits
from .training import LossSettings, MaskSettings, OptimConfig, finetune_optim, pretrain_optim

STAGES = ("synth", "pretrain", "finetune", "evaluate", "ablate-masking", "ablate-losses")


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(message)


@dataclass
class DataConfig:
    root: str = ""  # dataset dir(s), comma-separated to pool; empty means synthesize
    eval_root: str = ""
    n_clips: int = 64
    clip_T: int = 160
    H: int = 128
    W: int = 128
    fs: float = 30.0
    hr_lo: float = 45.0
    hr_hi: float = 150.0
    pulse_amplitude: float = 0.03
    illumination_drift_amp: float = 0.0
    jitter_px: int = 0
    sensor_noise_std: float = 0.005
    frame_format: str = "npy"
    resize: int = 0  # 0 keeps the stored size
    eval_clips: int = 16
    eval_clip_T: int = 160
    seed: Optional[int] = None


@dataclass
class FinetuneConfig(OptimConfig):
    init: str = ""  # pre-trained checkpoint; empty trains from scratch
    augment: bool = True


@dataclass
class EvalConfig:
    checkpoint: str = ""
    window: int = 160
    snr_window: str = ""  # "hann" tapers the SNR spectrum; empty is rectangular


@dataclass
class ReferenceConfig:
    deterministic: bool = True
    threads: int = 1


@dataclass
class ExperimentConfig:
    stage: str = "pretrain"
    seed: int = 0
    out_dir: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: OptimConfig = field(default_factory=pretrain_optim)
    finetune: FinetuneConfig = field(default_factory=lambda: FinetuneConfig(**asdict(finetune_optim())))
    masking: MaskSettings = field(default_factory=MaskSettings)
    losses: LossSettings = field(default_factory=LossSettings)
    band: BandLimits = field(default_factory=BandLimits)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @property
    def band_limits(self) -> BandLimits:
        return self.band


def _coerce(value, current, key: str):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}", key)
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key)
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key) from None
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key) from None
    if current is None:
        # Optional[int] seeds
        if value is None or value == "":
            return None
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key) from None
    return str(value)


def _apply(d: dict, updates: dict, prefix: str = "") -> None:
    for k, v in updates.items():
        key = f"{prefix}{k}"
        if k not in d:
            raise ConfigError(f"unknown config key {key!r}", key)
        if isinstance(d[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key} is a section, not a value", key)
            _apply(d[k], v, key + ".")
        else:
            if isinstance(v, dict):
                raise ConfigError(f"{key} is a value, not a section", key)
            d[k] = _coerce(v, d[k], key)


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_overrides(items: Sequence[str]) -> dict:
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", item)
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(text.strip())
    return out


def _expand_optim(d: dict, stage: str) -> dict:
    """``optim`` addresses the optimizer of the stage being run (both for ablations)."""
    if "optim" not in d:
        return d
    d = dict(d)
    optim = d.pop("optim")
    targets = {"pretrain": ("pretrain",), "finetune": ("finetune",)}.get(stage, ("pretrain", "finetune"))
    for t in targets:
        d[t] = {**optim, **d.get(t, {})} if isinstance(optim, dict) else optim
    return d


def _build(d: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig(
            stage=d["stage"], seed=d["seed"], out_dir=d["out_dir"],
            data=DataConfig(**d["data"]),
            model=ModelConfig(**d["model"]),
            pretrain=OptimConfig(**d["pretrain"]),
            finetune=FinetuneConfig(**d["finetune"]),
            masking=MaskSettings(**d["masking"]),
            losses=LossSettings(**d["losses"]),
            band=BandLimits(**d["band"]),
            evaluate=EvalConfig(**d["evaluate"]),
            reference=ReferenceConfig(**d["reference"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def resolve(raw: dict, overrides: Sequence[str] = (), base_dir=None, env=None) -> ExperimentConfig:
    """Merge ``raw`` (parsed TOML) and ``overrides`` onto the defaults.

    Unset seeds inherit the top-level seed; an empty ``out_dir`` becomes
    ``$PMAE_OUT/<stage>`` (``runs/<stage>`` without the variable). Relative
    paths written in the file are taken relative to ``base_dir``; paths given
    as overrides are left as typed.
    """
    env = os.environ if env is None else env
    raw = dict(raw)
    over = parse_overrides(overrides)
    stage = over.get("stage", raw.get("stage", ExperimentConfig.stage))
    raw, over = _expand_optim(raw, stage), _expand_optim(over, stage)
    d = ExperimentConfig().to_dict()
    _apply(d, raw)
    _apply(d, over)

    if d["stage"] not in STAGES:
        raise ConfigError(f"unknown stage {d['stage']!r}; expected one of {', '.join(STAGES)}", "stage")
    seed = d["seed"]
    if d["data"]["seed"] is None:
        d["data"]["seed"] = seed
    # seeds that default to 0 in their dataclasses follow the run seed unless set explicitly
    for section in ("model", "pretrain", "finetune"):
        if "seed" not in raw.get(section, {}) and "seed" not in over.get(section, {}):
            d[section]["seed"] = seed
    if not d["out_dir"]:
        d["out_dir"] = str(Path(env.get("PMAE_OUT", "runs")) / d["stage"])
    if base_dir is not None:
        for sec, key in (("data", "root"), ("data", "eval_root"), ("finetune", "init"),
                         ("evaluate", "checkpoint")):
            # command-line paths stay relative to the working directory
            if key in over.get(sec, {}) or key not in raw.get(sec, {}):
                continue
            parts = [p for p in d[sec][key].split(",") if p] if d[sec][key] else []
            d[sec][key] = ",".join(p if Path(p).is_absolute() else str((Path(base_dir) / p).resolve())
                                   for p in parts)
        if not Path(d["out_dir"]).is_absolute() and "out_dir" in raw and "out_dir" not in over:
            d["out_dir"] = str((Path(base_dir) / d["out_dir"]).resolve())
    return _build(d)


def load_config(path, overrides: Sequence[str] = (), env=None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return resolve(raw, overrides, base_dir=path.parent, env=env)


def from_dict(d: dict) -> ExperimentConfig:
    """Rebuild a resolved config (e.g. a run's ``config.json``)."""
    base = ExperimentConfig().to_dict()
    _apply(base, d)
    return _build(base)
