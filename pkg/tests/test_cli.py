import json

import numpy as np
import pytest

from robust_ecg.cli import RunConfig, choose_coefficient, run
from robust_ecg.data import load_pack, save_pack
from robust_ecg.evaluate import PGD_LEVELS, read_report_csv

TINY = [
    "--input-length", "256",
    "--num-classes", "3",
    "--stem-channels", "4",
    "--num-blocks", "1",
    "--total-downsample", "16",
    "--kernel-size", "3",
    "--gn-groups", "2",
]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["synth", *TINY, "--synth-train", "6", "--synth-val", "2", "--synth-test", "3", "--out-dir", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    args = ["train", *TINY, "--data", str(synth_dir), "--method", "nsr", "--beta", "1.0", "--epochs", "2", "--warmup-epochs", "1", "--out-dir", str(out)]
    assert run(args) == 0
    return out


def test_synth_writes_packs(synth_dir):
    assert {p.name for p in synth_dir.iterdir()} == {"train.npz", "val.npz", "test.npz", "config.resolved.json"}


def test_train_writes_checkpoint_and_history(trained):
    assert (trained / "checkpoint.json").is_file()
    lines = (trained / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,val_acc,val_f1,epsilon_t" and len(lines) == 3
    resolved = json.loads((trained / "config.resolved.json").read_text())
    assert resolved["method"] == "NSR" and resolved["beta"] == 1.0


def test_resolved_config_reproduces_run(trained, tmp_path):
    out = tmp_path / "again"
    assert run(["train", "--config", str(trained / "config.resolved.json"), "--out-dir", str(out)]) == 0
    assert (out / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()
    assert json.loads((out / "checkpoint.json").read_text()) == json.loads((trained / "checkpoint.json").read_text())
    first = json.loads((trained / "config.resolved.json").read_text())
    second = json.loads((out / "config.resolved.json").read_text())
    assert {k: v for k, v in first.items() if k != "out_dir"} == {k: v for k, v in second.items() if k != "out_dir"}


def test_evaluate_pgd_uses_default_grid(trained, synth_dir, tmp_path):
    args = ["evaluate", "--config", str(trained / "config.resolved.json"), "--checkpoint", str(trained / "checkpoint.json"), "--attack", "pgd", "--steps", "2", "--out-dir", str(tmp_path)]
    assert run(args) == 0
    rep = read_report_csv(tmp_path / "1.0NSR_pgd.csv")
    assert tuple(rep.levels) == PGD_LEVELS
    assert (tmp_path / "1.0NSR_pgd.svg").is_file()


def test_report_overlays_sweeps(trained, tmp_path):
    base = ["--config", str(trained / "config.resolved.json"), "--checkpoint", str(trained / "checkpoint.json"), "--attack", "white"]
    assert run(["evaluate", *base, "--out-dir", str(tmp_path / "a")]) == 0
    assert run(["evaluate", *base, "--seed", "5", "--out-dir", str(tmp_path / "b")]) == 0
    csvs = [str(tmp_path / d / "1.0NSR_white.csv") for d in ("a", "b")]
    assert run(["report", "--reports", *csvs, "--out-dir", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "white_comparison.csv").read_text().splitlines()
    assert lines[0] == "method,noise_level,accuracy,macro_f1" and len(lines) == 1 + 2 * 9
    assert (tmp_path / "r" / "white_comparison.svg").is_file()


def test_attack_and_dump_signal(trained, synth_dir, tmp_path):
    base = ["--config", str(trained / "config.resolved.json"), "--checkpoint", str(trained / "checkpoint.json")]
    assert run(["attack", *base, "--attack", "white", "--epsilon", "0.2", "--out-dir", str(tmp_path / "a")]) == 0
    noisy = np.load(tmp_path / "a" / "test_white_0.2.npz")
    clean = np.load(synth_dir / "test.npz")
    diff = noisy["signals"] - clean["signals"]
    assert 0 < np.max(np.abs(diff)) <= 0.2
    assert np.all(diff[clean["masks"][:, None, :].repeat(diff.shape[1], axis=1) == 0] == 0)
    assert run(["dump-signal", *base, "--steps", "2", "--index", "1", "--out-dir", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "signal_1_pgd.svg").is_file()


def test_tune_grid(synth_dir, tmp_path):
    args = ["tune", *TINY, "--data", str(synth_dir), "--method", "jacob", "--tune-values", "0", "4", "--epochs", "2", "--warmup-epochs", "1", "--pgd-steps", "2", "--out-dir", str(tmp_path)]
    assert run(args) == 0
    choice = json.loads((tmp_path / "tune_choice.json").read_text())
    assert choice["lam"] in (0.0, 4.0)
    assert len((tmp_path / "tune_lam.csv").read_text().splitlines()) == 3


def test_choose_coefficient_rule():
    rows = [{"value": v, "clean_f1": f} for v, f in [(0.4, 0.9), (0.6, 0.91), (0.8, 0.9), (1.0, 0.8), (1.2, 0.9)]]
    assert choose_coefficient(rows, 0.02) == 0.8
    assert choose_coefficient(rows, 0.2) == 1.2


def test_missing_reference_exit_2(tmp_path, capsys):
    out = tmp_path / "pp"
    assert run(["preprocess", "--signal-dir", str(tmp_path), "--out-dir", str(out)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: kind=data")
    assert str(tmp_path / "REFERENCE.csv") in err[0]
    assert not out.exists()


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run(["train", "--no-such-flag", "1"]) == 1
    assert run(["fly"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"epochz": 3}')
    assert run(["train", "--config", str(bad)]) == 1
    assert "epochz" in capsys.readouterr().err
    assert run(["train", *TINY, "--out-dir", str(tmp_path / "x")]) == 1  # no --data
    assert run(["synth", "--total-downsample", "64", "--out-dir", str(tmp_path / "y")]) == 1
    assert not (tmp_path / "x").exists() and not (tmp_path / "y").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_3_leaves_no_artifacts(synth_dir, tmp_path, capsys):
    poisoned = tmp_path / "poisoned"
    poisoned.mkdir()
    for name in ("train", "val"):
        batch, header = load_pack(synth_dir / f"{name}.npz")
        sig = batch.signals.copy()
        if name == "train":
            sig[:, 0, 0] = np.inf
        save_pack(poisoned / f"{name}.npz", batch.with_signals(sig), header["ids"])
    out = tmp_path / "boom"
    args = ["train", *TINY, "--data", str(poisoned), "--epochs", "2", "--warmup-epochs", "1", "--out-dir", str(out)]
    assert run(args) == 3
    assert capsys.readouterr().err.startswith("error: kind=numeric")
    assert not out.exists()


def test_run_config_defaults_and_sub_seeds():
    cfg = RunConfig()
    assert cfg.model_config().feature_dim == 512
    assert cfg.sub_seed("split") != cfg.sub_seed("init")
    assert RunConfig(seed=1).sub_seed("split") != cfg.sub_seed("split")
    assert cfg.sub_seed("split") == RunConfig().sub_seed("split")
