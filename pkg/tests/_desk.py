"""Desk-scale robustness experiment shared by acceptance criteria 6, 7 and 10.

Synthetic 3-class data (200 train / 50 test per class, 8 x 2048), a small
two-block net (total downsampling 64), 30 epochs with a 5-epoch warmup.
Every method trains from the same initialization on the same epoch stream;
all seeds fan out from ``MASTER_SEED``. The training set is used without a
validation split, so each model is its final-epoch state.
"""

from __future__ import annotations

import time
from pathlib import Path

from robust_ecg.attacks import AttackConfig
from robust_ecg.cli import RunConfig, write_history
from robust_ecg.data import epoch_sampler, fixed_batch, synth_dataset
from robust_ecg.defenses import train
from robust_ecg.evaluate import PGD_LEVELS, WHITE_LEVELS, accuracy, emit_report, noise_sweep, predict
from robust_ecg.model import build_ecgnet

MASTER_SEED = 0
METHODS = ("CE", "ADV", "JACOB", "NSR")

DESK = dict(
    in_channels=8,
    input_length=2048,
    num_classes=3,
    stem_channels=4,
    num_blocks=2,
    total_downsample=64,
    kernel_size=5,
    gn_groups=4,
    epochs=30,
    warmup_epochs=5,
    batch_size=16,
    lr=3e-3,
    synth_train=200,
    synth_test=50,
    bump_height=3.0,
    pgd_steps=20,
    steps=20,
)
# ADV trains at the attacked level; lam and beta come from the tune grid run
COEFFICIENTS = {"CE": {}, "ADV": {"epsilon": 0.1}, "JACOB": {"lam": 54.0}, "NSR": {"beta": 1.2}}
PGD_GRID = PGD_LEVELS
WHITE_GRID = WHITE_LEVELS
# the ordering is asserted at the largest tested white-noise level
WHITE_ORDER_LEVEL = WHITE_GRID[-1]


def desk_config(seed: int = MASTER_SEED) -> RunConfig:
    return RunConfig.from_dict(dict(DESK, seed=seed))


def run_experiment(out_dir, seed: int = MASTER_SEED) -> dict:
    """Train and sweep every method; write history and report CSVs to ``out_dir``.

    Returns ``{method: {"clean", "pgd_0.1", "train_acc", "pgd_rows", "white"}}``
    plus ``"runtime"`` (seconds) and ``"out"`` (the output directory).
    """
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = desk_config(seed)
    length, classes = cfg.input_length, cfg.num_classes
    kw = dict(channels=cfg.in_channels, bump_height=cfg.bump_height)
    train_recs = synth_dataset(cfg.synth_train, length, classes, seed=cfg.sub_seed("synth-train"), **kw)
    test_recs = synth_dataset(cfg.synth_test, length, classes, seed=cfg.sub_seed("synth-test"), **kw)
    train_eval = fixed_batch(train_recs, length, cfg.sub_seed("place-train"))
    test = fixed_batch(test_recs, length, cfg.sub_seed("place-test"))
    attack = cfg.attack_template()

    results: dict = {}
    for method in METHODS:
        tcfg = cfg.train_config(method=method, **COEFFICIENTS[method])
        net = build_ecgnet(cfg.model_config(), cfg.sub_seed("init"))
        res = train(net, epoch_sampler(train_recs, length, tcfg.seed), None, tcfg)
        write_history(res.history, out / f"{method}_history.csv")
        pgd = noise_sweep(net, test, "pgd", PGD_GRID, attack, cfg.sub_seed("attack"), method)
        white = noise_sweep(net, test, "white", WHITE_GRID, attack, cfg.sub_seed("noise"), method)
        emit_report(pgd, out)
        emit_report(white, out)
        pgd_acc = {lvl: acc for lvl, acc, _ in pgd.rows}
        results[method] = {
            "clean": pgd_acc[0.0],
            "pgd_0.1": pgd_acc[0.1],
            "train_acc": accuracy(predict(net, train_eval.signals, train_eval.mask), train_eval.labels),
            "pgd_rows": pgd.rows,
            "white": {lvl: acc for lvl, acc, _ in white.rows},
        }
    results["runtime"] = time.perf_counter() - t0
    results["out"] = out
    return results


if __name__ == "__main__":
    import sys

    r = run_experiment(sys.argv[1] if len(sys.argv) > 1 else "desk_out")
    for m in METHODS:
        print(m, {k: v for k, v in r[m].items() if k != "pgd_rows"})
    print(f"runtime {r['runtime']:.0f}s")
