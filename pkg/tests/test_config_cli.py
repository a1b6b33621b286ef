import json
from pathlib import Path

import pytest

from pmae.cli import main, report, train_clips
from pmae.config import ConfigError, from_dict, load_config, resolve
from pmae.datagen import synth_dataset, write_dataset

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = """
stage = "{stage}"
seed = 1

[data]
n_clips = 4
clip_T = 16
H = 16
W = 16
pulse_amplitude = 0.06
eval_clips = 2
eval_clip_T = 32

[model]
D = 16
enc_depth = 1
dec_depth = 1
heads = 2
C_stem = 8
T = 16
H = 16
W = 16

[pretrain]
epochs = 1

[finetune]
epochs = 1
batch_size = 4
"""


def write_cfg(tmp_path, stage, extra=""):
    p = tmp_path / f"{stage}.toml"
    p.write_text(TINY.format(stage=stage) + extra)
    return p


# resolution

def test_resolution_is_pure(tmp_path):
    env = {"PMAE_OUT": str(tmp_path)}
    a = load_config(CONFIGS / "desk.toml", ["pretrain.base_lr=0.05"], env=env).to_json()
    b = load_config(CONFIGS / "desk.toml", ["pretrain.base_lr=0.05"], env=env).to_json()
    assert a == b
    assert json.loads(a)["pretrain"]["base_lr"] == 0.05


def test_defaults_and_seed_inheritance():
    cfg = resolve({"seed": 7, "pretrain": {"seed": 2}}, env={})
    assert cfg.data.seed == 7 and cfg.model.seed == 7 and cfg.finetune.seed == 7
    assert cfg.pretrain.seed == 2
    assert cfg.out_dir == str(Path("runs") / "pretrain")
    assert cfg.pretrain.base_lr == 0.1 and cfg.finetune.base_lr == 1e-3


def test_pmae_out(tmp_path):
    cfg = resolve({"stage": "finetune"}, env={"PMAE_OUT": str(tmp_path)})
    assert cfg.out_dir == str(tmp_path / "finetune")


def test_optim_alias():
    cfg = resolve({"stage": "finetune"}, ["optim.base_lr=5e-4"], env={})
    assert cfg.finetune.base_lr == 5e-4 and cfg.pretrain.base_lr == 0.1
    both = resolve({"stage": "ablate-losses"}, ["optim.epochs=3"], env={})
    assert both.pretrain.epochs == both.finetune.epochs == 3


@pytest.mark.parametrize("over", [["pretrain.lr=1"], ["data.n_clips=abc"], ["model=3"], ["stage=train"],
                                  ["noequals"], ["model.H=100"]])
def test_bad_overrides(over):
    with pytest.raises(ConfigError):
        resolve({}, over, env={})


def test_config_json_roundtrip(tmp_path):
    cfg = load_config(CONFIGS / "ablate-masking.toml", env={"PMAE_OUT": str(tmp_path)})
    assert from_dict(json.loads(cfg.to_json())).to_json() == cfg.to_json()


def test_shipped_configs_resolve(tmp_path):
    for p in sorted(CONFIGS.glob("*.toml")):
        load_config(p, env={"PMAE_OUT": str(tmp_path)})


# command line

def test_dry_run(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PMAE_OUT", str(tmp_path))
    assert main(["run", str(CONFIGS / "desk.toml"), "--dry-run", "finetune.epochs=3"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["finetune"]["epochs"] == 3 and printed["out_dir"] == str(tmp_path / "finetune")
    assert (tmp_path / "finetune" / "validation.log").is_file()
    assert not (tmp_path / "finetune" / "finetune_record.ndjson").exists()


def test_unknown_key_exit_code(tmp_path, capsys):
    assert main(["run", str(CONFIGS / "desk.toml"), "model.width=3", "--dry-run",
                 f"out_dir={tmp_path}"]) == 2
    assert "model.width" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.toml")]) == 2


def test_report_requires_complete_run(tmp_path, capsys):
    assert main(["report", str(tmp_path / "nothing")]) == 1
    (tmp_path / "run.json").write_text('{"stage": "pretrain", "status": "running"}')
    assert main(["report", str(tmp_path)]) == 1


def test_synth_stage(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "synth")
    out = tmp_path / "out"
    assert main(["run", str(cfg), f"out_dir={out}", "data.n_clips=64", "data.clip_T=4"]) == 0
    folders = [p for p in (out / "dataset").iterdir() if p.is_dir()]
    assert len(folders) == 64
    assert len(list(folders[0].glob("frame_*.npy"))) == 4
    assert (folders[0] / "ppg.csv").is_file() and (folders[0] / "meta.json").is_file()
    assert json.loads((out / "config.json").read_text())["data"]["n_clips"] == 64
    assert "64 clips" in report(out)


def test_pipeline_through_cli(tmp_path, capsys):
    pre_out, ft_out, ev_out = tmp_path / "pre", tmp_path / "ft", tmp_path / "ev"
    assert main(["run", str(write_cfg(tmp_path, "pretrain")), f"out_dir={pre_out}"]) == 0
    assert (pre_out / "pretrained.pt").is_file()
    assert (pre_out / "checkpoints" / "pretrain_last.pt").is_file()

    assert main(["run", str(write_cfg(tmp_path, "finetune")), f"out_dir={ft_out}",
                 f"finetune.init={pre_out / 'pretrained.pt'}"]) == 0
    assert (ft_out / "finetuned.pt").is_file()

    assert main(["run", str(write_cfg(tmp_path, "evaluate")), f"out_dir={ev_out}",
                 f"evaluate.checkpoint={ft_out / 'finetuned.pt'}", "evaluate.window=32"]) == 0
    metrics = json.loads((ev_out / "metrics.json").read_text())
    assert metrics["n_clips"] == 2 and len(metrics["per_clip"]) == 2
    assert (ev_out / "bland_altman.json").is_file()
    capsys.readouterr()
    assert main(["report", str(ev_out)]) == 0
    text = capsys.readouterr().out
    assert "MAE" in text and "Bland-Altman" in text
    assert "pretrain: 1 epochs" in report(pre_out)


def test_stage_failure_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "evaluate")
    assert main(["run", str(cfg), f"out_dir={tmp_path / 'ev'}"]) == 1
    assert "evaluate.checkpoint" in capsys.readouterr().err
    # a model/data size mismatch is reported, not crashed on
    assert main(["run", str(write_cfg(tmp_path, "pretrain")), f"out_dir={tmp_path / 'p'}",
                 "data.H=32", "data.W=32"]) == 1


def test_pooled_roots(tmp_path):
    write_dataset(synth_dataset(2, seed=0, T=4, H=16, W=16), tmp_path / "a")
    write_dataset(synth_dataset(3, seed=1, T=4, H=16, W=16), tmp_path / "b")
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text('stage = "pretrain"\n[data]\nroot = "a,b"\n')
    cfg = load_config(cfg_file, env={})
    assert cfg.data.root == f"{tmp_path / 'a'},{tmp_path / 'b'}"
    assert len(train_clips(cfg)) == 5
    # an override path is taken as typed
    assert load_config(cfg_file, ["data.root=x/y"], env={}).data.root == "x/y"
