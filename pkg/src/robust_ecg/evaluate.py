"""Metrics, noise sweeps and report files."""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .attacks import AttackConfig, pgd_attack, uniform_noise
from .errors import InputError, ParameterError
from .model import EcgNet, MaskedBatch

PGD_LEVELS = (0.0, 0.001, 0.003, 0.005, 0.007, 0.01, 0.03, 0.05, 0.1)
WHITE_LEVELS = (0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
REPORT_COLUMNS = ("noise_level", "accuracy", "macro_f1")


def _check_pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.size == 0:
        raise InputError("metrics need at least one prediction")
    if preds.shape != labels.shape:
        raise InputError(f"{preds.size} predictions for {labels.size} labels")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    preds, labels = _check_pair(preds, labels)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def per_class_f1(preds, labels, n_classes: int = 9) -> np.ndarray:
    """F1 per class; NaN for classes with neither members nor predictions."""
    cm = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    out = np.full(n_classes, np.nan)
    present = denom > 0
    out[present] = 2 * tp[present] / denom[present]
    return out


def macro_f1(preds, labels, n_classes: int = 9) -> float:
    """Unweighted mean of per-class F1 over classes that occur in labels or predictions."""
    f1 = per_class_f1(preds, labels, n_classes)
    return float(np.mean(f1[~np.isnan(f1)]))


def predict(net, signals, mask, batch_size: int = 128) -> np.ndarray:
    out = []
    with ag.no_grad():
        for start in range(0, signals.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            out.append(np.argmax(net(ag.Tensor(signals[sl]), mask[sl]).data, axis=1))
    return np.concatenate(out)


@dataclass
class SweepReport:
    method: str
    kind: str  # "pgd" or "white"
    rows: list[tuple[float, float, float]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("pgd", "white"):
            raise ParameterError(f"noise kind must be 'pgd' or 'white', got {self.kind!r}")
        levels = [r[0] for r in self.rows]
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ParameterError("noise levels must be strictly increasing")
        for lvl, acc, f1 in self.rows:
            if not (0.0 <= acc <= 1.0 and 0.0 <= f1 <= 1.0):
                raise ParameterError(f"level {lvl}: accuracy/F1 outside [0, 1]")

    @property
    def levels(self) -> list[float]:
        return [r[0] for r in self.rows]

    def accuracy_at(self, level: float) -> float:
        for lvl, acc, _ in self.rows:
            if lvl == level:
                return acc
        raise KeyError(level)


def cell_seed(master_seed: int, level_index: int, method: str) -> np.random.SeedSequence:
    """Independent RNG stream per (seed, level, method) sweep cell."""
    return np.random.SeedSequence([master_seed, level_index, zlib.crc32(method.encode())])


def perturb(
    net,
    batch: MaskedBatch,
    kind: str,
    level: float,
    template: AttackConfig,
    rng: np.random.Generator,
    chunk: int = 64,
) -> np.ndarray:
    """Noisy copy of ``batch.signals`` at one noise level, processed in chunks."""
    out = np.empty_like(batch.signals)
    for start in range(0, len(batch), chunk):
        sub = batch.subset(slice(start, start + chunk))
        if kind == "pgd":
            cfg = AttackConfig(
                epsilon=level,
                steps=template.steps,
                alpha=template.alpha,
                random_start=template.random_start,
                perturb_padding=template.perturb_padding,
                seed=int(rng.integers(2**31)),
            )
            noisy = pgd_attack(net, sub, cfg)
        elif kind == "white":
            noisy = uniform_noise(sub, level, template.perturb_padding, rng)
        else:
            raise ParameterError(f"unknown noise kind {kind!r}")
        out[start : start + len(sub)] = noisy
    return out


def noise_sweep(
    net: EcgNet,
    testset: MaskedBatch,
    kind: str,
    levels: Sequence[float] | None = None,
    template: AttackConfig | None = None,
    seed: int = 0,
    method: str = "model",
    repeats: int = 1,
) -> SweepReport:
    """Accuracy and macro-F1 of a frozen ``net`` at each noise level (level 0 = clean)."""
    if levels is None:
        levels = PGD_LEVELS if kind == "pgd" else WHITE_LEVELS
    levels = [float(v) for v in levels]
    if 0.0 not in levels:
        raise ParameterError("noise levels must include 0 (the clean baseline)")
    if kind == "pgd" and repeats != 1:
        raise ParameterError("repeats only applies to white noise")
    template = template or AttackConfig(epsilon=0.0, steps=100)
    n_classes = net.cfg.num_classes
    rows = []
    for i, level in enumerate(levels):
        rng = np.random.default_rng(cell_seed(seed, i, method))
        accs, f1s = [], []
        for _ in range(repeats if level > 0 else 1):
            signals = testset.signals if level == 0 else perturb(net, testset, kind, level, template, rng)
            preds = predict(net, signals, testset.mask)
            accs.append(accuracy(preds, testset.labels))
            f1s.append(macro_f1(preds, testset.labels, n_classes))
        rows.append((level, float(np.mean(accs)), float(np.mean(f1s))))
    meta = {
        "seed": seed,
        "steps": template.steps if kind == "pgd" else 0,
        "alpha": template.alpha,
        "perturb_padding": template.perturb_padding,
        "repeats": repeats,
        "model_checksum": net.checksum() if hasattr(net, "checksum") else "",
    }
    return SweepReport(method, kind, rows, meta)


# ---------------------------------------------------------------------------
# report files


def report_csv_text(report: SweepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for lvl, acc, f1 in report.rows:
        # repr() round-trips float64 exactly
        w.writerow([repr(float(lvl)), repr(float(acc)), repr(float(f1))])
    return buf.getvalue()


def read_report_csv(path: str | Path, method: str | None = None, kind: str | None = None) -> SweepReport:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != REPORT_COLUMNS:
        raise InputError(f"{path}: expected header {','.join(REPORT_COLUMNS)}")
    data = [tuple(float(c) for c in r) for r in rows[1:] if r]
    if method is None or kind is None:
        stem_method, _, stem_kind = path.stem.rpartition("_")
        method = method or stem_method
        kind = kind or stem_kind
    return SweepReport(method, kind, data)


def _svg_figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "robust_ecg"
    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def plot_reports(reports: Sequence[SweepReport], path: str | Path) -> Path:
    """Accuracy and macro-F1 against noise level, one line per report."""
    plt = _svg_figure()
    path = Path(path)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for rep in reports:
        xs = range(len(rep.rows))
        axes[0].plot(xs, [r[1] for r in rep.rows], marker="o", label=rep.method)
        axes[1].plot(xs, [r[2] for r in rep.rows], marker="o", label=rep.method)
    for ax, title in zip(axes, ("accuracy", "macro F1")):
        ref = reports[0]
        ax.set_xticks(range(len(ref.rows)))
        ax.set_xticklabels([f"{r[0]:g}" for r in ref.rows], rotation=45)
        ax.set_xlabel(f"noise level ({ref.kind}, L-inf)")
        ax.set_ylabel(title)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)
    return path


def emit_report(report: SweepReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``<method>_<kind>.csv`` and a matching ``.svg`` chart."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{report.method}_{report.kind}.csv"
        csv_path.write_text(report_csv_text(report))
        svg_path = plot_reports([report], out_dir / f"{report.method}_{report.kind}.svg")
    except OSError as exc:
        raise InputError(f"cannot write report to {out_dir}: {exc}") from exc
    return csv_path, svg_path


def dump_signal_svg(
    clean: np.ndarray,
    noisy: Sequence[tuple[str, np.ndarray]],
    path: str | Path,
    lead: int = 0,
    mask: np.ndarray | None = None,
) -> Path:
    """Before/after traces of one lead, one panel per noisy version."""
    plt = _svg_figure()
    path = Path(path)
    span = slice(None)
    if mask is not None:
        valid = np.flatnonzero(mask > 0)
        span = slice(valid[0], valid[-1] + 1)
    fig, axes = plt.subplots(len(noisy) + 1, 1, figsize=(10, 1.8 * (len(noisy) + 1)), sharex=True)
    axes = np.atleast_1d(axes)
    axes[0].plot(clean[lead, span], lw=0.6, color="k")
    axes[0].set_title("clean", fontsize=8)
    for ax, (title, sig) in zip(axes[1:], noisy):
        ax.plot(sig[lead, span], lw=0.6, color="tab:red")
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)
    return path
