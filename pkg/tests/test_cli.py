import csv
import io
import json

import pytest

from odda.cli import main, parse_overrides
from odda.config import load_config
from odda.errors import ConfigError
from odda.model import checkpoint_bytes, load_checkpoint

TINY = """
seed = 3

[dataset]
synth_per_class = 12

[train]
epochs = 2

[adapt]
per_class = 2
store_classes = 0
epochs = 2
calibration_clips = 24
"""


def _run(cfg, out, *args):
    return main([*args[:1], "--config", str(cfg), "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    out = root / "run"
    for cmd in ("pretrain", "quantize", "adapt"):
        assert _run(cfg, out, cmd) == 0
    return cfg, out


def test_pretrain_outputs(tiny):
    _, out = tiny
    assert (out / "nakws.ckpt").exists()
    lines = (out / "pretrain_trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,val_accuracy" and len(lines) == 3


def test_effective_config_echo(tiny):
    cfg, out = tiny
    echoed = json.loads((out / "effective_config.json").read_text())
    assert echoed["seed"] == 3 and echoed["out"] == str(out)
    assert echoed["adapt"]["per_class"] == 2 and echoed["train"]["learning_rate"] == 0.1
    assert load_config(str(cfg), [("adapt.k", "3")]).adapt.k == 3


def test_quantize_reports_780(tiny, capsys):
    cfg, out = tiny
    assert _run(cfg, out, "quantize") == 0
    assert "trainable params: 780" in capsys.readouterr().err
    raw = (out / "frozen.ckpt").read_bytes()
    assert checkpoint_bytes(load_checkpoint(out / "frozen.ckpt")) == raw


def test_quantize_bad_depth(tiny, tmp_path):
    cfg, out = tiny
    assert main(["quantize", "--config", str(cfg), "--out", str(tmp_path),
                 "--checkpoint", str(out / "nakws.ckpt"), "--adapt.k", "11"]) == 2


def test_missing_manifest(tiny, tmp_path, capsys):
    cfg, _ = tiny
    missing = tmp_path / "nope" / "manifest.csv"
    assert _run(cfg, tmp_path, "pretrain", "--dataset.manifest", str(missing)) == 3
    assert str(missing) in capsys.readouterr().err


def test_config_errors(tiny, tmp_path):
    cfg, _ = tiny
    assert _run(cfg, tmp_path, "cost", "--noise.target", "white") == 2
    assert _run(cfg, tmp_path, "cost", "--model.size_tag", "XL") == 2
    assert _run(cfg, tmp_path, "cost", "stray") == 2
    with pytest.raises(ConfigError):
        parse_overrides(["--adapt.k"])
    assert parse_overrides(["--adapt.k=2", "--seed", "4"]) == [("adapt.k", "2"), ("seed", "4")]


def test_empty_store(tiny, tmp_path):
    cfg, _ = tiny
    assert _run(cfg, tmp_path, "adapt", "--dry-run", "--adapt.fraction", "0.01") == 3


def test_adapt_writes_everything(tiny):
    _, out = tiny
    for name in ("adapted.ckpt", "adapt_trace.csv", "cost_report.json"):
        assert (out / name).exists()
    steps = json.loads((out / "cost_report.json").read_text())["steps"]
    assert steps[1:] == [2, 2]


def test_default_dry_run_cost(tmp_path):
    # defaults: 10 classes x 10 stored clips, batch 2, 21 epochs, HPM
    assert main(["adapt", "--dry-run", "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "cost_report.json").read_text())
    assert d["steps"] == [100, 2, 21]
    assert d["t_odda_seconds"] == pytest.approx(14.154)
    assert d["energy_joules"] == pytest.approx(0.8064)
    assert not (tmp_path / "adapted.ckpt").exists()


def test_eval_clean_and_repeatable(tiny):
    cfg, out = tiny
    assert _run(cfg, out, "eval", "--noise", "none") == 0
    first = (out / "eval_adapted_none.json").read_bytes()
    assert json.loads(first)["condition"] == "clean"
    assert _run(cfg, out, "eval", "--noise", "none") == 0
    assert (out / "eval_adapted_none.json").read_bytes() == first
    assert (out / "eval_adapted_none_per_class.csv").exists()


def test_eval_frozen_vs_adapted(tiny):
    cfg, out = tiny
    for ckpt in ("frozen", "adapted"):
        assert _run(cfg, out, "eval", "--checkpoint", str(out / f"{ckpt}.ckpt")) == 0
        assert json.loads((out / f"eval_{ckpt}_target.json").read_text())["condition"] == "babble@0dB"


def test_seed_twice_identical(tiny, tmp_path):
    cfg, _ = tiny
    blobs = []
    for _ in range(2):
        assert _run(cfg, tmp_path, "pretrain", "--seed", "7") == 0
        blobs.append((tmp_path / "nakws.ckpt").read_bytes())
    assert blobs[0] == blobs[1]


def test_cost_sweep(tiny):
    cfg, out = tiny
    assert _run(cfg, out, "cost") == 0
    rows = list(csv.DictReader(io.StringIO((out / "cost_sweep.csv").read_text())))
    depth = [r for r in rows if r["sweep"] == "depth"]
    assert [int(r["k"]) for r in depth] == list(range(1, 11))
    mem = [int(r["total_rw_memory_bytes"]) for r in depth]
    assert mem == sorted(mem)
    data = [int(r["total_odda_flops"]) for r in rows if r["sweep"] == "data"]
    assert data[1] == 10 * data[0] and data[2] == 100 * data[0]
    size = {r["size_tag"]: int(r["forward_flops"]) / 1e6 for r in rows if r["sweep"] == "size"}
    for tag, target in (("S", 2.95), ("M", 17.2), ("L", 51.1)):
        assert abs(size[tag] / target - 1) <= 0.15
