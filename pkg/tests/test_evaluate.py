import numpy as np
import pytest

from robust_ecg.attacks import AttackConfig
from robust_ecg.errors import InputError, ParameterError
from robust_ecg.evaluate import (
    PGD_LEVELS,
    WHITE_LEVELS,
    SweepReport,
    accuracy,
    cell_seed,
    confusion_matrix,
    dump_signal_svg,
    emit_report,
    macro_f1,
    noise_sweep,
    per_class_f1,
    predict,
    read_report_csv,
    report_csv_text,
)
from robust_ecg.model import EcgNetConfig, MaskedBatch, build_ecgnet


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 1, 0], [0, 1, 2]) == 2 / 3
    with pytest.raises(InputError):
        accuracy([], [])
    with pytest.raises(InputError):
        accuracy([0], [0, 1])


def test_macro_f1_worked_example():
    assert abs(macro_f1([0, 1, 1, 1], [0, 0, 1, 1], 2) - (2 / 3 + 4 / 5) / 2) < 1e-12
    assert abs(macro_f1([0, 1, 1, 1], [0, 0, 1, 1], 9) - 0.7333333333333333) < 1e-9


def test_macro_f1_degenerate_and_perfect():
    assert macro_f1([0, 0, 0, 0], [0, 0, 1, 1], 2) == pytest.approx(1 / 3, abs=1e-12)
    labels = np.arange(9).repeat(3)
    assert macro_f1(labels, labels) == 1.0
    assert macro_f1(labels, labels) == accuracy(labels, labels)


def test_macro_f1_skips_absent_classes_only():
    f1 = per_class_f1([0, 1], [0, 0], 4)
    assert f1[0] == pytest.approx(2 / 3)
    assert f1[1] == 0.0  # predicted but absent still counts
    assert np.isnan(f1[2]) and np.isnan(f1[3])
    assert macro_f1([0, 1], [0, 0], 4) == pytest.approx(1 / 3)


def test_macro_f1_matches_sklearn():
    from sklearn.metrics import f1_score

    rng = np.random.default_rng(0)
    labels = rng.integers(0, 9, size=200)
    preds = np.where(rng.random(200) < 0.6, labels, rng.integers(0, 9, size=200))
    assert macro_f1(preds, labels) == pytest.approx(f1_score(labels, preds, average="macro"), abs=1e-12)


def test_confusion_matrix_counts():
    cm = confusion_matrix([0, 1, 1], [0, 0, 1], 2)
    np.testing.assert_array_equal(cm, [[1, 1], [0, 1]])


CFG = EcgNetConfig(in_channels=2, input_length=64, num_classes=3, stem_channels=4, num_blocks=0, total_downsample=4, kernel_size=3, gn_groups=2)


def tiny_setup(n=6, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.ones((n, 64))
    mask[::2, 48:] = 0
    x = rng.normal(size=(n, 2, 64)) * mask[:, None, :]
    return build_ecgnet(CFG, seed), MaskedBatch(x, mask, rng.integers(0, 3, size=n))


def test_default_level_grids():
    assert PGD_LEVELS == (0.0, 0.001, 0.003, 0.005, 0.007, 0.01, 0.03, 0.05, 0.1)
    assert WHITE_LEVELS[0] == 0.0 and WHITE_LEVELS[-1] == 0.6


def test_sweep_level_zero_is_clean_evaluation():
    net, batch = tiny_setup()
    rep = noise_sweep(net, batch, "pgd", [0.0, 0.05], AttackConfig(0.0, steps=3))
    preds = predict(net, batch.signals, batch.mask)
    assert rep.rows[0][1] == accuracy(preds, batch.labels)
    assert rep.rows[0][2] == macro_f1(preds, batch.labels, 3)
    assert rep.meta["model_checksum"] == net.checksum()


def test_sweep_is_deterministic_and_cells_are_independent():
    net, batch = tiny_setup(seed=1)
    a = noise_sweep(net, batch, "white", [0.0, 0.5, 1.0], seed=3, method="m")
    b = noise_sweep(net, batch, "white", [0.0, 0.5, 1.0], seed=3, method="m")
    assert a.rows == b.rows
    s1 = cell_seed(3, 1, "m").generate_state(2)
    assert not np.array_equal(s1, cell_seed(3, 1, "other").generate_state(2))
    assert not np.array_equal(s1, cell_seed(3, 2, "m").generate_state(2))


def test_sweep_validation():
    net, batch = tiny_setup()
    with pytest.raises(ParameterError):
        noise_sweep(net, batch, "pgd", [0.01, 0.1])
    with pytest.raises(ParameterError):
        noise_sweep(net, batch, "pgd", [0.0, 0.1], repeats=3)
    with pytest.raises(ParameterError):
        SweepReport("m", "gaussian", [(0.0, 1.0, 1.0)])
    with pytest.raises(ParameterError):
        SweepReport("m", "pgd", [(0.1, 1.0, 1.0), (0.0, 1.0, 1.0)])
    with pytest.raises(ParameterError):
        SweepReport("m", "pgd", [(0.0, 1.2, 1.0)])


def _nine_row_report():
    rows = [(lvl, 1.0 - i / 10 + 1e-17 * i, 0.9 - i / 11) for i, lvl in enumerate(PGD_LEVELS)]
    return SweepReport("1.0NSR", "pgd", rows)


def test_report_csv_round_trip_and_determinism(tmp_path):
    rep = _nine_row_report()
    csv_path, svg_path = emit_report(rep, tmp_path / "a")
    assert csv_path.name == "1.0NSR_pgd.csv" and svg_path.suffix == ".svg"
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "noise_level,accuracy,macro_f1" and len(lines) == 10
    back = read_report_csv(csv_path)
    assert back.rows == rep.rows and back.method == "1.0NSR" and back.kind == "pgd"
    csv2, svg2 = emit_report(rep, tmp_path / "b")
    assert csv2.read_bytes() == csv_path.read_bytes()
    assert svg2.read_bytes() == svg_path.read_bytes()
    assert report_csv_text(rep) == csv_path.read_text()


def test_emit_report_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(InputError):
        emit_report(_nine_row_report(), blocker / "sub")


def test_signal_dump_svg(tmp_path):
    clean = np.sin(np.linspace(0, 10, 200))[None].repeat(8, axis=0)
    mask = np.ones(200)
    mask[150:] = 0
    path = dump_signal_svg(clean, [("pgd 0.1", clean + 0.1)], tmp_path / "s.svg", lead=0, mask=mask)
    assert path.read_text().lstrip().startswith("<?xml")
