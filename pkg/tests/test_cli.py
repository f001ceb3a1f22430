import json
import subprocess
import sys

import numpy as np
import pytest

from nsl.cli import _build_config, build_parser, main
from nsl.data import load_dataset
from nsl.errors import TrainingError
from nsl.model import CamoNet, save_checkpoint
from nsl.pipeline import parse_epochs_csv


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    assert main(["gen-data", "--out", str(d), "--count", "12", "--size", "32",
                 "--seed", "3"]) == 0
    return d


def _tiny_run_args(ds, out, extra=()):
    return ["run", "--data", str(ds), "--out", str(out), "--frac-m", "0.25",
            "--switch-epoch", "1", "--epochs", "2", "--noise-rho", "0.2",
            *extra]


# ------------------------------------------------------------------ verbs


def test_gen_data_prints_manifest_path(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--count", "4",
                 "--size", "32", "--seed", "1"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.endswith("manifest.json")
    manifest, samples = load_dataset(tmp_path / "d")
    assert len(samples) == 5  # 4 train + 1 test


def test_gen_data_json_payload(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--count", "4",
                 "--size", "32", "--seed", "1", "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["seed"] == 1
    assert payload["manifest"].endswith("manifest.json")


def test_gen_data_seed_determines_content(tmp_path):
    for d in ("a", "b"):
        main(["gen-data", "--out", str(tmp_path / d), "--count", "4",
              "--size", "32", "--seed", "9"])
    ma = (tmp_path / "a" / "manifest.json").read_bytes()
    assert ma == (tmp_path / "b" / "manifest.json").read_bytes()
    for p in sorted((tmp_path / "a" / "images").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / "images" / p.name).read_bytes()


def test_run_writes_artifacts_and_reports(ds, tmp_path, capsys):
    out = tmp_path / "r"
    assert main(_tiny_run_args(ds, out, ["--json", "--curves"])) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["final"]["epoch"] == 1
    for name in ("config.json", "epochs.csv", "summary.json", "pnet.ckpt",
                 "iou_curves.svg", "loss.svg"):
        assert (out / name).exists(), name
    rows = parse_epochs_csv((out / "epochs.csv").read_text())
    assert [r["q"] for r in rows] == [2.0, 1.0]


def test_run_preset_resolves_schedule():
    args = build_parser().parse_args(
        ["run", "--data", "d", "--out", "o", "--preset", "F20"])
    cfg = _build_config(args)
    assert (cfg.frac_m, cfg.switch_epoch, cfg.epochs) == (0.2, 60, 100)
    args = build_parser().parse_args(
        ["run", "--data", "d", "--out", "o", "--preset", "F1"])
    assert _build_config(args).switch_epoch == 20


def test_run_preset_flag_overrides():
    args = build_parser().parse_args(
        ["run", "--data", "d", "--out", "o", "--preset", "F10",
         "--switch-epoch", "15", "--epochs", "50", "--loss", "gce",
         "--grad-mode", "detached"])
    cfg = _build_config(args)
    assert cfg.switch_epoch == 15
    assert cfg.epochs == 50
    assert cfg.loss.kind == "gce"
    assert cfg.loss.grad_mode == "detached_denominator"


def test_stage_chain_matches_run_verb(ds, tmp_path, capsys):
    """anet -> pseudo-label -> pnet reproduces the run verb's curve."""
    shared = ["--frac-m", "0.25", "--seed", "99", "--epochs", "2",
              "--switch-epoch", "1"]
    assert main(["train-anet", "--data", str(ds), "--out",
                 str(tmp_path / "an"), *shared]) == 0
    assert (tmp_path / "an" / "anet.ckpt").exists()
    rows = parse_epochs_csv((tmp_path / "an" / "epochs.csv").read_text())
    assert [r["q"] for r in rows] == [2.0, 2.0]  # aux net never switches
    capsys.readouterr()

    assert main(["pseudo-label", "--data", str(ds), "--ckpt",
                 str(tmp_path / "an" / "anet.ckpt"), "--out",
                 str(tmp_path / "ps"), "--frac-m", "0.25", "--seed", "99",
                 "--json"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["n"] == 9  # 12 train - round(0.25 * 12) fully labeled
    assert (tmp_path / "ps" / "index.json").exists()

    assert main(["train-pnet", "--data", str(ds), "--out",
                 str(tmp_path / "pn"), "--pseudo", str(tmp_path / "ps"),
                 *shared]) == 0

    assert main(["run", "--data", str(ds), "--out", str(tmp_path / "full"),
                 *shared]) == 0
    assert (tmp_path / "pn" / "epochs.csv").read_bytes() == \
        (tmp_path / "full" / "epochs.csv").read_bytes()


def test_train_pnet_needs_exactly_one_label_source(ds, tmp_path):
    base = ["train-pnet", "--data", str(ds), "--out", str(tmp_path / "o"),
            "--frac-m", "0.25", "--epochs", "1", "--switch-epoch", "0"]
    assert main(base) == 1
    assert main(base + ["--pseudo", "x", "--noise-rho", "0.2"]) == 1


def test_eval_prints_and_writes(ds, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(CamoNet("pnet", seed=4, dtype=np.float32), ckpt)
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(ds),
                 "--out", str(tmp_path / "ev")]) == 0
    out = capsys.readouterr().out.strip().split("\n")
    assert out[0].startswith("mae,")
    assert (tmp_path / "ev" / "metrics.csv").exists()
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(ds),
                 "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload) >= {"mae", "iou", "f_beta"}


def test_diagnose_loss_detached_magnitudes_all_equal(capsys):
    assert main(["diagnose-loss", "--q", "1", "--mode", "detached",
                 "--grid", "8"]) == 0
    rows = [[float(v) for v in line.split()]
            for line in capsys.readouterr().out.strip().split("\n")]
    flat = [v for row in rows for v in row]
    assert len(flat) == 64
    assert all(v == flat[0] for v in flat)
    assert flat[0] > 0.0


def test_diagnose_loss_exact_magnitudes_differ(capsys):
    assert main(["diagnose-loss", "--q", "1", "--mode", "exact",
                 "--grid", "8"]) == 0
    flat = [float(v) for line in capsys.readouterr().out.strip().split("\n")
            for v in line.split()]
    assert len(set(flat)) > 1


def test_diagnose_loss_json_and_alias(capsys):
    assert main(["diagnose-loss", "--q", "2", "--grad-mode", "detached",
                 "--grid", "3", "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["mode"] == "detached"
    assert len(payload["magnitudes"]) == 3


# ------------------------------------------------------------- exit codes


def test_exit_codes_for_bad_invocations(tmp_path, capsys):
    assert main(["no-such-verb"]) == 1
    assert main(["gen-data", "--count", "4"]) == 1          # missing --out
    assert main(["gen-data", "--out", "x", "--count", "4",
                 "--bogus"]) == 1                            # unknown flag
    assert main(["run", "--data", str(tmp_path / "missing"), "--out",
                 str(tmp_path / "o"), "--frac-m", "0.2", "--epochs", "1",
                 "--switch-epoch", "0"]) == 1                # no dataset
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--count", "4",
                 "--size", "48"]) == 1                       # bad size
    assert main(["diagnose-loss", "--grid", "0"]) == 1
    assert main(["--help"]) == 0
    capsys.readouterr()


def test_runtime_failure_maps_to_two(ds, tmp_path, monkeypatch, capsys):
    def boom(cfg, run_dir):
        raise TrainingError("train: non-finite loss at epoch 3")

    monkeypatch.setattr("nsl.pipeline.run_wsscod", boom)
    assert main(_tiny_run_args(ds, tmp_path / "r")) == 2
    assert "non-finite" in capsys.readouterr().err


def test_validation_beats_filesystem(tmp_path, capsys):
    # bad flags never create the output directory
    out = tmp_path / "never"
    assert main(["run", "--data", "d", "--out", str(out), "--frac-m", "2.0",
                 "--epochs", "1", "--switch-epoch", "0"]) == 1
    assert not out.exists()
    capsys.readouterr()


def test_nsl_threads_lands_in_blas_env():
    code = ("import os; os.environ['NSL_THREADS']='3'; import nsl.cli; "
            "print(os.environ['OPENBLAS_NUM_THREADS'])")
    proc = subprocess.run([sys.executable, "-c", code], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip() == "3"
