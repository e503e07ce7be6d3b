"""Command-line entry point.

Every subcommand resolves one flat run configuration (defaults <- ``--config``
file <- ``--key value`` flags), writes it to ``config.resolved.json`` in the
output directory and stages all artifacts so nothing is left behind on
failure. Exit codes: 0 ok, 1 usage/parameter error, 2 data error, 3 numeric
failure; errors print one ``error: kind=<kind> reason="<message>"`` line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import tempfile
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import data as D
from .attacks import AttackConfig, pgd_attack, uniform_noise
from .defenses import HISTORY_COLUMNS, TrainConfig, train
from .errors import IngestionError, InputError, NumericError, ParameterError, UsageError
from .evaluate import (
    PGD_LEVELS,
    REPORT_COLUMNS,
    WHITE_LEVELS,
    accuracy,
    dump_signal_svg,
    emit_report,
    macro_f1,
    noise_sweep,
    plot_reports,
    predict,
    read_report_csv,
)
from .model import EcgNetConfig, build_ecgnet, load_checkpoint, save_checkpoint

log = logging.getLogger("robust_ecg")

COMMANDS = ("preprocess", "synth", "train", "attack", "evaluate", "report", "tune", "dump-signal")
BETA_GRID = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2)
LAMBDA_GRID = (4.0, 14.0, 24.0, 34.0, 44.0, 54.0, 64.0, 74.0, 84.0)


@dataclass
class RunConfig:
    # model
    in_channels: int = 8
    input_length: int = 33792
    num_classes: int = 9
    stem_channels: int = 32
    num_blocks: int = 4
    total_downsample: int = 1024
    kernel_size: int = 7
    gn_groups: int = 8
    # training
    method: str = "CE"
    epochs: int = 70
    batch_size: int = 64
    warmup_epochs: int = 10
    epsilon: float = 0.01
    pgd_steps: int = 20
    pgd_alpha: float | None = None
    lam: float = 44.0
    beta: float = 1.0
    eps_max: float = 1.0
    lr: float = 1e-3
    perturb_padding: bool = False
    # attack / evaluation
    attack: str = "pgd"
    steps: int = 100
    alpha: float | None = None
    random_start: bool = False
    levels: list[float] | None = None
    repeats: int = 1
    reports: list[str] | None = None
    # data
    signal_dir: str | None = None
    reference: str | None = None
    data: str | None = None
    split: str = "test"
    checkpoint: str | None = None
    n_val: int = 5
    n_test: int = 50
    # synthetic data
    synth_train: int = 200
    synth_val: int = 10
    synth_test: int = 50
    bump_height: float = 1.0
    # tuning
    tune_values: list[float] | None = None
    tune_level: float = 0.01
    tune_tolerance: float = 0.02
    # dump-signal
    index: int = 0
    lead: int = 0
    # run
    out_dir: str = "runs"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        return cls(**d)

    def model_config(self) -> EcgNetConfig:
        return EcgNetConfig(
            in_channels=self.in_channels,
            input_length=self.input_length,
            num_classes=self.num_classes,
            stem_channels=self.stem_channels,
            num_blocks=self.num_blocks,
            total_downsample=self.total_downsample,
            kernel_size=self.kernel_size,
            gn_groups=self.gn_groups,
        )

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(
            method=self.method,
            epochs=self.epochs,
            batch_size=self.batch_size,
            warmup_epochs=self.warmup_epochs,
            epsilon=self.epsilon,
            pgd_steps=self.pgd_steps,
            pgd_alpha=self.pgd_alpha,
            lam=self.lam,
            beta=self.beta,
            eps_max=self.eps_max,
            lr=self.lr,
            perturb_padding=self.perturb_padding,
            seed=self.sub_seed("shuffle"),
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def attack_template(self) -> AttackConfig:
        return AttackConfig(
            epsilon=0.0,
            steps=self.steps,
            alpha=self.alpha,
            random_start=self.random_start,
            perturb_padding=self.perturb_padding,
            seed=self.sub_seed("attack"),
        )

    def sub_seed(self, name: str) -> int:
        """Named child seed of the master seed (split, init, shuffle, attack, noise, synth, place)."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(ss.generate_state(1)[0])


def _field_type(f) -> tuple[type, bool]:
    ann = str(f.type)
    is_list = ann.startswith("list")
    for name, tp in (("bool", bool), ("int", int), ("float", float), ("str", str)):
        if ann.startswith(name) or ann.startswith(f"list[{name}"):
            return tp, is_list
    return str, is_list


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robust-ecg", description="Noise-robust ECG CNN training and evaluation.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run configuration; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        tp, is_list = _field_type(f)
        flag = "--" + f.name.replace("_", "-")
        aliases = [flag] + (["--" + f.name] if "_" in f.name else [])
        if f.name == "lam":
            aliases.append("--lambda")
        if tp is bool:
            parser.add_argument(*aliases, dest=f.name, type=_parse_bool, nargs="?", const=True, default=None)
        elif is_list:
            parser.add_argument(*aliases, dest=f.name, type=tp, nargs="+", default=None)
        else:
            parser.add_argument(*aliases, dest=f.name, type=tp, default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = asdict(RunConfig())
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise IngestionError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: expected a JSON object")
        RunConfig.from_dict(loaded)  # rejects unknown keys
        values.update(loaded)
    for f in fields(RunConfig):
        v = getattr(args, f.name)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig.from_dict(values)
    cfg.method = cfg.method.upper()
    if cfg.attack not in ("pgd", "white"):
        raise UsageError(f"--attack must be 'pgd' or 'white', got {cfg.attack!r}")
    return cfg


# ---------------------------------------------------------------------------
# artifact staging


@contextmanager
def staged(out_dir: Path) -> Iterator[Path]:
    """Yield a scratch dir; its files move into ``out_dir`` only on success."""
    parent = out_dir.resolve().parent
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.staging-", dir=parent))
    try:
        yield tmp
        out_dir.mkdir(exist_ok=True)
        for item in sorted(tmp.iterdir()):
            shutil.move(str(item), str(out_dir / item.name))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def write_resolved(cfg: RunConfig, stage: Path) -> None:
    (stage / "config.resolved.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


def write_history(rows: Sequence[dict], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in HISTORY_COLUMNS[1:]])


# ---------------------------------------------------------------------------
# data helpers


def _pack_split(records: Sequence[D.Prepared], cfg: RunConfig, name: str, path: Path) -> None:
    batch = D.fixed_batch(records, cfg.input_length, cfg.sub_seed(f"place-{name}"))
    D.save_pack(path, batch, [r.id for r in records], {"split": name})


def _load_split(cfg: RunConfig, name: str):
    if not cfg.data:
        raise UsageError("--data DIR (output of preprocess or synth) is required")
    batch, header = D.load_pack(Path(cfg.data) / f"{name}.npz")
    if batch.signals.shape[1:] != (cfg.in_channels, cfg.input_length):
        raise InputError(
            f"{name}.npz holds [{batch.signals.shape[1]}, {batch.signals.shape[2]}] signals; "
            f"config expects [{cfg.in_channels}, {cfg.input_length}]"
        )
    return batch, header


def _load_net(cfg: RunConfig):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise IngestionError(f"checkpoint not found: {path}")
    net, meta = load_checkpoint(path)
    return net, meta


def _method_label(cfg: RunConfig, meta: dict | None = None) -> str:
    meta = meta or {}
    method = meta.get("method", cfg.method)
    if method == "ADV":
        return f"advls_{meta.get('epsilon', cfg.epsilon):g}"
    if method == "JACOB":
        return f"{meta.get('lam', cfg.lam):.1f}Jacob"
    if method == "NSR":
        return f"{meta.get('beta', cfg.beta):.1f}NSR"
    return method


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg: RunConfig, stage: Path) -> None:
    if not cfg.signal_dir:
        raise UsageError("--signal-dir is required")
    reference = Path(cfg.reference) if cfg.reference else Path(cfg.signal_dir) / "REFERENCE.csv"
    records = D.load_dataset(cfg.signal_dir, reference)
    split = D.split_and_balance(
        records, cfg.sub_seed("split"), cfg.n_val, cfg.n_test, cfg.input_length, cfg.num_classes
    )
    for name in ("train", "val", "test"):
        _pack_split(getattr(split, name), cfg, name, stage / f"{name}.npz")
    summary = {
        "records": len(records),
        "multi_label_dropped": sum(len(r.labels) > 1 for r in records),
        "train": len(split.train),
        "val": len(split.val),
        "test": len(split.test),
        "upsampled": {str(k): len(v) for k, v in split.upsampled.items()},
    }
    (stage / "split.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))


def cmd_synth(cfg: RunConfig, stage: Path) -> None:
    base = cfg.sub_seed("synth")
    sizes = {"train": cfg.synth_train, "val": cfg.synth_val, "test": cfg.synth_test}
    for i, (name, n) in enumerate(sizes.items()):
        recs = D.synth_dataset(
            n, cfg.input_length, cfg.num_classes, seed=base + i, channels=cfg.in_channels, bump_height=cfg.bump_height
        )
        _pack_split(recs, cfg, name, stage / f"{name}.npz")
    print(json.dumps({k: v * cfg.num_classes for k, v in sizes.items()}, sort_keys=True))


def _train_once(cfg: RunConfig, tcfg: TrainConfig):
    train_batch, train_header = _load_split(cfg, "train")
    val_batch, _ = _load_split(cfg, "val")
    records = D.unpack(train_batch, train_header["ids"])
    net = build_ecgnet(cfg.model_config(), cfg.sub_seed("init"))
    sampler = D.epoch_sampler(records, cfg.input_length, tcfg.seed)
    return train(net, sampler, val_batch, tcfg), val_batch


def cmd_train(cfg: RunConfig, stage: Path) -> None:
    tcfg = cfg.train_config()
    result, _ = _train_once(cfg, tcfg)
    meta = {"method": tcfg.method, "epsilon": tcfg.epsilon, "lam": tcfg.lam, "beta": tcfg.beta, "best_epoch": result.best_epoch}
    save_checkpoint(result.net, stage / "checkpoint.json", meta)
    write_history(result.history, stage / "history.csv")
    print(json.dumps({"best_epoch": result.best_epoch, "checkpoint": str(Path(cfg.out_dir) / "checkpoint.json")}))


def cmd_attack(cfg: RunConfig, stage: Path) -> None:
    net, meta = _load_net(cfg)
    batch, header = _load_split(cfg, cfg.split)
    level = cfg.epsilon if not cfg.levels else cfg.levels[0]
    rng = np.random.default_rng(cfg.sub_seed("noise"))
    if cfg.attack == "pgd":
        tmpl = cfg.attack_template()
        out = np.empty_like(batch.signals)
        for start in range(0, len(batch), cfg.batch_size):
            sub = batch.subset(slice(start, start + cfg.batch_size))
            acfg = AttackConfig(level, tmpl.steps, tmpl.alpha, "Linf", tmpl.random_start, tmpl.perturb_padding, tmpl.seed)
            out[start : start + len(sub)] = pgd_attack(net, sub, acfg)
    else:
        out = uniform_noise(batch, level, cfg.perturb_padding, rng)
    noisy = batch.with_signals(out)
    preds = predict(net, noisy.signals, noisy.mask)
    res = {
        "attack": cfg.attack,
        "epsilon": level,
        "accuracy": accuracy(preds, noisy.labels),
        "macro_f1": macro_f1(preds, noisy.labels, net.cfg.num_classes),
    }
    D.save_pack(stage / f"{cfg.split}_{cfg.attack}_{level:g}.npz", noisy, header["ids"], {"attack": res})
    print(json.dumps(res, sort_keys=True))


def cmd_evaluate(cfg: RunConfig, stage: Path) -> None:
    net, meta = _load_net(cfg)
    batch, _ = _load_split(cfg, cfg.split)
    levels = cfg.levels or (PGD_LEVELS if cfg.attack == "pgd" else WHITE_LEVELS)
    report = noise_sweep(
        net,
        batch,
        cfg.attack,
        levels,
        cfg.attack_template(),
        cfg.sub_seed("noise"),
        _method_label(cfg, meta),
        cfg.repeats,
    )
    csv_path, _ = emit_report(report, stage)
    for lvl, acc, f1 in report.rows:
        print(f"{lvl:g}\t{acc:.3f}\t{f1:.3f}")
    log.info("wrote %s", Path(cfg.out_dir) / csv_path.name)


def cmd_report(cfg: RunConfig, stage: Path) -> None:
    if not cfg.reports:
        raise UsageError("--reports CSV [CSV ...] is required")
    reports = []
    for name in cfg.reports:
        path = Path(name)
        if not path.is_file():
            raise IngestionError(f"report not found: {path}")
        reports.append(read_report_csv(path))
    kinds = {r.kind for r in reports}
    if len(kinds) != 1:
        raise UsageError(f"cannot overlay reports of different kinds: {sorted(kinds)}")
    levels = [tuple(r.levels) for r in reports]
    if any(lv != levels[0] for lv in levels):
        raise UsageError("reports use different noise-level grids")
    kind = kinds.pop()
    with (stage / f"{kind}_comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method",) + REPORT_COLUMNS)
        for rep in reports:
            for row in rep.rows:
                w.writerow([rep.method] + [repr(float(v)) for v in row])
    plot_reports(reports, stage / f"{kind}_comparison.svg")
    print(json.dumps({"kind": kind, "methods": [r.method for r in reports]}))


def choose_coefficient(rows: Sequence[dict], tolerance: float) -> float:
    """Largest value reached before clean F1 falls more than ``tolerance`` below the best seen so far."""
    chosen = rows[0]["value"]
    best = -np.inf
    for r in sorted(rows, key=lambda r: r["value"]):
        if r["clean_f1"] < best - tolerance:
            break
        best = max(best, r["clean_f1"])
        chosen = r["value"]
    return chosen


def cmd_tune(cfg: RunConfig, stage: Path) -> None:
    if cfg.method not in ("NSR", "JACOB"):
        raise UsageError("tune applies to --method NSR (beta grid) or JACOB (lambda grid)")
    param = "beta" if cfg.method == "NSR" else "lam"
    grid = cfg.tune_values or (BETA_GRID if param == "beta" else LAMBDA_GRID)
    rows = []
    for value in grid:
        tcfg = cfg.train_config(**{param: float(value)})
        result, val_batch = _train_once(cfg, tcfg)
        report = noise_sweep(
            result.net,
            val_batch,
            "pgd",
            [0.0, cfg.tune_level],
            AttackConfig(0.0, steps=cfg.pgd_steps, perturb_padding=cfg.perturb_padding),
            cfg.sub_seed("noise"),
            f"{value:g}",
        )
        (_, clean_acc, clean_f1), (_, adv_acc, adv_f1) = report.rows
        rows.append(
            {"value": float(value), "clean_acc": clean_acc, "clean_f1": clean_f1, "adv_acc": adv_acc, "adv_f1": adv_f1}
        )
        log.info("%s=%g clean_f1=%.3f adv_acc=%.3f", param, value, clean_f1, adv_acc)
    chosen = choose_coefficient(rows, cfg.tune_tolerance)
    with (stage / f"tune_{param}.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) for k, v in r.items()})
    (stage / "tune_choice.json").write_text(json.dumps({param: chosen}, sort_keys=True) + "\n")
    print(json.dumps({param: chosen}))


def cmd_dump_signal(cfg: RunConfig, stage: Path) -> None:
    net, _ = _load_net(cfg)
    batch, _ = _load_split(cfg, cfg.split)
    if not 0 <= cfg.index < len(batch):
        raise UsageError(f"--index {cfg.index} outside [0, {len(batch)})")
    one = batch.subset(slice(cfg.index, cfg.index + 1))
    levels = cfg.levels or [0.001, 0.01, 0.1]
    panels = []
    for lvl in levels:
        if cfg.attack == "pgd":
            acfg = AttackConfig(lvl, cfg.steps, cfg.alpha, perturb_padding=cfg.perturb_padding)
            sig = pgd_attack(net, one, acfg)[0]
        else:
            sig = uniform_noise(one, lvl, cfg.perturb_padding, cfg.sub_seed("noise"))[0]
        panels.append((f"{cfg.attack} noise level {lvl:g}", sig))
    dump_signal_svg(one.signals[0], panels, stage / f"signal_{cfg.index}_{cfg.attack}.svg", cfg.lead, one.mask[0])


HANDLERS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "tune": cmd_tune,
    "dump-signal": cmd_dump_signal,
}

EXIT_CODES = {"usage": 1, "data": 2, "numeric": 3}


def _classify(exc: BaseException) -> str | None:
    if isinstance(exc, NumericError):
        return "numeric"
    if isinstance(exc, (IngestionError, InputError, FileNotFoundError)):
        return "data"
    if isinstance(exc, (UsageError, ParameterError)):
        return "usage"
    return None


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
        )
        cfg = resolve_config(args)
        cfg.model_config().validate()
        out_dir = Path(cfg.out_dir)
        with staged(out_dir) as stage:
            HANDLERS[args.command](cfg, stage)
            write_resolved(cfg, stage)
        return 0
    except Exception as exc:  # noqa: BLE001
        kind = _classify(exc)
        if kind is None:
            raise
        reason = str(exc).replace("\n", " ").replace('"', "'")
        print(f'error: kind={kind} reason="{reason}"', file=sys.stderr)
        return EXIT_CODES[kind]


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
