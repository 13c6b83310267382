"""The ``led`` command line, driven in-process through ``main``."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from led.checkpoint import load_checkpoint
from led.cli import EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_OK, main
from led.experiments import read_metrics
from led.figures import read_pgm

TINY = """
[experiment]
kind = toy
[model]
latent_dim = 2
l_prior = 2
prior_hidden = 8
enc_hidden = 8
dec_hidden = 8
[training]
epochs = 4
batch_size = 50
lr = 1e-3
seed = 3
checkpoint_every = 2
[evaluation]
k_importance = 16
eval_every = 2
[toy]
n_train = 300
n_valid = 100
n_test = 100
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def without_time(rows):
    # repr keeps the comparison bit-exact and lets nan equal nan
    return [{k: repr(v) for k, v in r.items() if k != "wall_seconds"} for r in rows]


def test_help_via_entry_point():
    out = subprocess.run([sys.executable, "-m", "led.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "eval", "sample", "density-map", "nica-demo", "sweep"):
        assert cmd in out.stdout


def test_train_then_eval_reproduces_logged_nll(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny), "--output", str(out), "--no-figures"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["epochs"] == 4 and np.isfinite(summary["test_nll_is"])
    for name in ("metrics.csv", "epoch_2.ledf", "epoch_4.ledf", "final.ledf", "summary.json"):
        assert (out / name).stat().st_size > 0
    assert not (out / ".lock").exists()
    last = read_metrics(out / "metrics.csv")[-1]
    assert main(["eval", "--checkpoint", str(out / "epoch_4.ledf"), "--k", "16"]) == EXIT_OK
    assert float(capsys.readouterr().out) == last["val_nll_is"]


def test_metrics_schema(tiny, tmp_path):
    main(["train", "--config", str(tiny), "--output", str(tmp_path / "r"), "--no-figures"])
    with open(tmp_path / "r" / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "elbo", "reconstruction", "prior_term", "entropy_term", "val_nll_is",
                       "wall_seconds"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
    assert rows[1][5] == "nan" and rows[2][5] != "nan"


def test_resume_matches_uninterrupted_run(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["train", "--config", str(tiny), "--output", str(a), "--no-figures"])
    assert main(["train", "--config", str(tiny), "--output", str(b), "--no-figures",
                 "--resume", str(a / "epoch_2.ledf")]) == EXIT_OK
    ca, cb = load_checkpoint(a / "final.ledf"), load_checkpoint(b / "final.ledf")
    assert ca.tensors.keys() == cb.tensors.keys()
    for k in ca.tensors:
        np.testing.assert_array_equal(ca.tensors[k], cb.tensors[k])
    assert ca.metadata["rng"] == cb.metadata["rng"]
    assert without_time(read_metrics(a / "metrics.csv")) == without_time(read_metrics(b / "metrics.csv"))
    sa = json.loads((a / "summary.json").read_text())
    sb = json.loads((b / "summary.json").read_text())
    assert sa == sb


def test_resume_rejects_other_config(tiny, tmp_path, capsys):
    main(["train", "--config", str(tiny), "--output", str(tmp_path / "a"), "--no-figures"])
    code = main(["train", "--config", str(tiny), "--seed", "9", "--output", str(tmp_path / "b"),
                 "--resume", str(tmp_path / "a" / "epoch_2.ledf")])
    assert code == EXIT_IO
    assert "digest" in capsys.readouterr().err


def test_sweep_writes_one_run_per_value(tiny, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(tiny), "--axis", "l_prior=0,1", "--epochs", "2",
                 "--output", str(out)]) == EXIT_OK
    for v in (0, 1):
        assert len(read_metrics(out / f"l_prior={v}" / "metrics.csv")) == 2
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["l_prior"] for r in rows] == ["0", "1"]
    assert len(capsys.readouterr().out.splitlines()) == 2


def test_best_validation_selection_and_patience(tiny, tmp_path, capsys):
    cfg = tmp_path / "best.cfg"
    cfg.write_text(TINY.replace("checkpoint_every = 2", "select_best = true\npatience = 1")
                   .replace("epochs = 4", "epochs = 40").replace("lr = 1e-3", "lr = 3e-2"))
    out = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--output", str(out), "--no-figures"]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    rows = read_metrics(out / "metrics.csv")
    vals = {r["epoch"]: r["val_nll_is"] for r in rows if np.isfinite(r["val_nll_is"])}
    assert summary["selected_epoch"] == min(vals, key=vals.get)
    assert summary["val_nll_is"] == vals[summary["selected_epoch"]]
    # patience 1: stops at the first validation pass without improvement
    assert summary["epochs"] == len(rows)
    assert summary["epochs"] in (summary["selected_epoch"] + 2, 40)


def test_missing_config_is_io_error(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == EXIT_IO
    assert "nope.cfg" in capsys.readouterr().err


def test_missing_checkpoint_is_io_error(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ledf")]) == EXIT_IO


def test_bad_config_value(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[model]\nl_prior = -2\n")
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG
    assert "l_prior" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_diverging_run_exits_2_and_keeps_last_finite_state(tiny, tmp_path, capsys):
    p = tmp_path / "hot.cfg"
    p.write_text(TINY.replace("lr = 1e-3", "lr = 1e12").replace("epochs = 4", "epochs = 50"))
    out = tmp_path / "hot"
    assert main(["train", "--config", str(p), "--output", str(out), "--no-figures"]) == EXIT_NONFINITE
    assert "non-finite" in capsys.readouterr().err
    ck = load_checkpoint(out / "last_finite.ledf")
    assert all(np.all(np.isfinite(v)) for v in ck.tensors.values())
    assert not (out / ".lock").exists()


def test_locked_output_directory(tiny, tmp_path, capsys):
    out = tmp_path / "busy"
    out.mkdir()
    (out / ".lock").write_text("12345")
    assert main(["train", "--config", str(tiny), "--output", str(out)]) == EXIT_CONFIG
    assert "in use" in capsys.readouterr().err
    assert not (out / "metrics.csv").exists()


def test_sample_and_density_map(tiny, tmp_path):
    out = tmp_path / "run"
    main(["train", "--config", str(tiny), "--output", str(out), "--no-figures"])
    ck = str(out / "final.ledf")
    assert main(["sample", "--checkpoint", ck, "-n", "7", "-o", str(tmp_path / "s.csv")]) == EXIT_OK
    x = np.loadtxt(tmp_path / "s.csv", delimiter=",")
    assert x.shape == (7, 2) and np.all(np.isfinite(x))
    main(["sample", "--checkpoint", ck, "-n", "7", "-o", str(tmp_path / "t.csv")])
    assert (tmp_path / "s.csv").read_bytes() == (tmp_path / "t.csv").read_bytes()
    for which in ("base", "prior", "marginal"):
        pgm = tmp_path / f"{which}.pgm"
        assert main(["density-map", "--checkpoint", ck, "--which", which, "--resolution", "24",
                     "-o", str(pgm), "--csv", str(tmp_path / f"{which}.csv")]) == EXIT_OK
        pixels, _ = read_pgm(pgm)
        assert pixels.shape == (24, 24) and pixels.max() == 255
    assert main(["density-map", "--which", "standard-normal", "--box=-3,3,-3,3", "--resolution", "31",
                 "-o", str(tmp_path / "n.pgm")]) == EXIT_OK
    assert read_pgm(tmp_path / "n.pgm")[0][15, 15] == 255
    assert main(["density-map", "--which", "prior", "-o", str(tmp_path / "x.pgm")]) == EXIT_CONFIG
