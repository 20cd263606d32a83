import json
import subprocess
import sys

import numpy as np
import pytest

from sparelab.cli import main
from sparelab.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from sparelab.pipeline import evaluate_run
from sparelab.metrics import evaluate_predictions
from sparelab.datagen import load_dataset
from sparelab.model import load_checkpoint, predict_label

SMALL = """
[run]
strategy = {strategy}
seed = 3

[dataset]
source = synthetic
d = 20
majority = 90
minority = 10
test_per_group = 20

[model]
m = 40

[train]
eta = 0.5
epochs = 3
batch_size = {batch}

[spare]
T_init = 1
"""


def test_defaults_roundtrip():
    cfg = RunConfig().validate()
    assert parse_config(dump_config(cfg)) == cfg


def test_custom_roundtrip():
    cfg = parse_config(SMALL.format(strategy="spare", batch=16) + "\n[theory]\nseparability_step = 7\n")
    assert cfg.run.seed == 3 and cfg.theory.separability_step == 7 and cfg.spare.k_range == [2, 3, 4, 5]
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text,field", [
    ("[model]\nm = 41\n", "model.m"),
    ("[run]\nstrategy = magic\n", "run.strategy"),
    ("[train]\neta = abc\n", "train.eta"),
    ("[train]\nlearning_rate = 1\n", "train.learning_rate"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[spare]\nk_range = 3\n", "spare.k_range"),
    ("[run]\nstrategy = spare\n[train]\nbatch_size = 0\n", "train.batch_size"),
])
def test_invalid_configs_name_the_field(text, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        parse_config(text)


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nm = 41\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    assert "model.m" in capsys.readouterr().err
    assert main(["evaluate", "--out", str(tmp_path / "missing")]) == 2


def test_generate(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL.format(strategy="erm", batch=0))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    ds = load_dataset(tmp_path / "g" / "data", "train")
    assert (ds.n, ds.d) == (200, 20)
    assert "majority fraction=0.9000" in capsys.readouterr().out


@pytest.mark.parametrize("strategy", ["erm", "cb", "gb", "spare", "jtt", "gdro"])
def test_train_strategies(tmp_path, strategy):
    cfg = tmp_path / "c.ini"
    text = SMALL.format(strategy=strategy, batch=16 if strategy != "erm" else 0)
    cfg.write_text(text.replace("epochs = 3", "steps = 5") if strategy == "erm" else text)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("config.snapshot", "manifest.json", "metrics.csv", "metrics.json", "checkpoints/final.spnn"):
        assert (out / name).exists(), name
    if strategy in ("spare", "jtt"):
        doc = json.loads((out / "groups.json").read_text())
        assert len(doc["classes"]) == 2
    if strategy == "spare":
        plan = json.loads((out / "plan.json").read_text())
        assert abs(sum(e["p"] for e in plan["examples"]) - 1) < 1e-12
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0 <= metrics["test"]["worst_group_accuracy"] <= 1
    # evaluate recomputes the same numbers without the config, and an independent check agrees
    rep = evaluate_run(out, "test")
    assert rep.worst_group_accuracy == metrics["test"]["worst_group_accuracy"]
    assert main(["evaluate", "--out", str(out)]) == 0
    net = load_checkpoint(out / "checkpoints" / "final.spnn")
    test = load_dataset(out / "data", "test")
    preds = predict_label(net, test.X)
    manual = min(np.mean(preds[test.group == g] == test.y[test.group == g]) for g in np.unique(test.group))
    assert manual == rep.worst_group_accuracy


def test_infer_groups_cli(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL.format(strategy="spare", batch=16))
    assert main(["infer-groups", "--config", str(cfg), "--out", str(tmp_path / "s1")]) == 0
    doc = json.loads((tmp_path / "s1" / "groups.json").read_text())
    assert len(doc["examples"]) == 200 and "weight" in doc["examples"]["0"]


def test_theory_cli(tmp_path, capsys):
    cfg = tmp_path / "t.ini"
    cfg.write_text("[dataset]\nd = 40\nmajority = 190\nminority = 10\ncore_sigma = 0.0\nspurious_sigma = 0.0\n"
                   "[model]\nm = 400\n[theory]\nchecks = [\"separability\", \"assumption\"]\n"
                   "assumption_steps = 3\ngap_tolerance = 1.0\n")
    code = main(["theory", "--config", str(cfg), "--out", str(tmp_path / "th")])
    out = capsys.readouterr().out
    assert code == 0, out
    assert "separability: step=" in out and "PASS" in out
    assert (tmp_path / "th" / "theory" / "assumption.csv").exists()
    strict = tmp_path / "t2.ini"
    strict.write_text(cfg.read_text().replace("gap_tolerance = 1.0", "gap_tolerance = 0.0")
                      .replace("assumption_steps = 3", "assumption_steps = 3\nseparability_min = 1.1"))
    assert main(["theory", "--config", str(strict)]) == 3


def test_seed_override_and_module_entry(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL.format(strategy="erm", batch=0).replace("epochs = 3", "steps = 2"))
    res = subprocess.run([sys.executable, "-m", "sparelab", "train", "--config", str(cfg), "--out",
                          str(tmp_path / "r"), "--seed", "11"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "seed = 11" in (tmp_path / "r" / "config.snapshot").read_text()
