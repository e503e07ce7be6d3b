"""Record ingestion, preprocessing, splitting and a synthetic generator.

On-disk input convention (a CSV stand-in for the original challenge files):

* ``<signal_dir>/<id>.csv`` -- one row per sample, 12 comma-separated
  columns in lead order I, II, III, aVR, aVL, aVF, V1..V6, no header.
* ``REFERENCE.csv`` -- header ``Recording,First_label,Second_label,Third_label``;
  labels are the challenge's 1-based class codes (1..9), empty cells mean
  "absent". They are stored 0-based in memory.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import IngestionError, InputError, ParameterError
from .model import MaskedBatch

N_LEADS = 12
KEPT_LEADS = (0, 1, 6, 7, 8, 9, 10, 11)  # I, II, V1..V6; III, aVR, aVL, aVF are derived leads
TARGET_LEN = 33792
SAMPLE_RATE = 500
NUM_CLASSES = 9
CLASS_NAMES = ("Normal", "AF", "I-AVB", "LBBB", "RBBB", "PAC", "PVC", "STD", "STE")
PACK_FORMAT = "robust_ecg.pack/1"


@dataclass
class EcgRecord:
    id: str
    leads: np.ndarray  # [12, L]
    labels: list[int]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.leads.ndim != 2 or self.leads.shape[0] != N_LEADS or self.leads.shape[1] < 1:
            raise IngestionError(f"record {self.id}: expected 12 leads, got shape {self.leads.shape}", self.id)
        if not self.labels or any(not 0 <= y < NUM_CLASSES for y in self.labels):
            raise IngestionError(f"record {self.id}: labels {self.labels} outside [0, {NUM_CLASSES})", self.id)


@dataclass
class Prepared:
    """A preprocessed, not yet padded record: ``signal`` is [C, L_valid]."""

    id: str
    signal: np.ndarray
    label: int


@dataclass
class DatasetSplit:
    train: list[Prepared]
    val: list[Prepared]
    test: list[Prepared]
    split_seed: int
    upsampled: dict[int, list[str]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# ingestion


def read_reference(reference_csv: str | Path) -> dict[str, list[int]]:
    path = Path(reference_csv)
    if not path.is_file():
        raise IngestionError(f"reference file not found: {path}")
    out: dict[str, list[int]] = {}
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["Recording"]:
        raise IngestionError(f"{path}: missing 'Recording,First_label,...' header")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not any(cell.strip() for cell in row):
            continue
        rec_id = row[0].strip()
        cells = [c.strip() for c in row[1:4] if c.strip()]
        if not rec_id or not cells or len(row) > 4:
            raise IngestionError(f"{path}:{lineno}: malformed reference row {row!r}")
        try:
            labels = [int(c) - 1 for c in cells]
        except ValueError:
            raise IngestionError(f"{path}:{lineno}: non-integer label in {row!r}", rec_id) from None
        if any(not 0 <= y < NUM_CLASSES for y in labels):
            raise IngestionError(f"{path}:{lineno}: label outside 1..{NUM_CLASSES} in {row!r}", rec_id)
        out[rec_id] = labels
    return out


def read_record_csv(path: str | Path, rec_id: str | None = None) -> np.ndarray:
    path = Path(path)
    rec_id = rec_id or path.stem
    if not path.is_file():
        raise IngestionError(f"record {rec_id}: file not found: {path}", rec_id)
    rows = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != N_LEADS:
                raise IngestionError(
                    f"record {rec_id}: {path}:{lineno} has {len(row)} columns, expected {N_LEADS}", rec_id
                )
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise IngestionError(f"record {rec_id}: {path}:{lineno} has a non-numeric cell", rec_id) from None
    if not rows:
        raise IngestionError(f"record {rec_id}: {path} is empty", rec_id)
    leads = np.asarray(rows, dtype=np.float64).T
    if not np.all(np.isfinite(leads)):
        raise IngestionError(f"record {rec_id}: {path} contains non-finite values", rec_id)
    return leads


def load_dataset(signal_dir: str | Path, reference_csv: str | Path | None = None) -> list[EcgRecord]:
    """Read every record listed in the reference file, sorted by id."""
    signal_dir = Path(signal_dir)
    reference_csv = Path(reference_csv) if reference_csv else signal_dir / "REFERENCE.csv"
    refs = read_reference(reference_csv)
    records = []
    for rec_id in sorted(refs):
        leads = read_record_csv(signal_dir / f"{rec_id}.csv", rec_id)
        records.append(EcgRecord(rec_id, leads, refs[rec_id]))
    return records


# ---------------------------------------------------------------------------
# preprocessing


def scale_leads(leads: np.ndarray) -> np.ndarray:
    """Divide each lead by its max absolute value (an all-zero lead is left as is)."""
    peak = np.max(np.abs(leads), axis=-1, keepdims=True)
    return leads / np.where(peak > 0, peak, 1.0)


def prepare(record: EcgRecord, target_len: int = TARGET_LEN) -> Prepared:
    """Lead selection, per-lead scaling and truncation to ``target_len``."""
    if len(record.labels) != 1:
        raise InputError(f"record {record.id} has {len(record.labels)} labels; drop multi-label records first")
    leads = scale_leads(record.leads[list(KEPT_LEADS)])
    return Prepared(record.id, leads[:, :target_len], record.labels[0])


def place(signal: np.ndarray, target_len: int, offset: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad ``signal`` [C, L] into a window of ``target_len`` starting at ``offset``."""
    c, length = signal.shape
    if length > target_len or not 0 <= offset <= target_len - length:
        raise ParameterError(f"cannot place length {length} at offset {offset} in {target_len}")
    out = np.zeros((c, target_len))
    out[:, offset : offset + length] = signal
    mask = np.zeros(target_len)
    mask[offset : offset + length] = 1.0
    return out, mask


def preprocess(
    record: EcgRecord, target_len: int = TARGET_LEN, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Full pipeline for one record: returns ``(signal [8, target_len], mask [target_len])``."""
    prep = prepare(record, target_len)
    rng = rng if rng is not None else np.random.default_rng(0)
    length = prep.signal.shape[1]
    offset = int(rng.integers(0, target_len - length + 1))
    return place(prep.signal, target_len, offset)


def pack(records: Sequence[Prepared], target_len: int, rng: np.random.Generator) -> MaskedBatch:
    """Place every record at a random offset and stack them into a batch."""
    n = len(records)
    if n == 0:
        raise InputError("no records to pack")
    c = records[0].signal.shape[0]
    signals = np.zeros((n, c, target_len))
    masks = np.zeros((n, target_len))
    for i, rec in enumerate(records):
        length = rec.signal.shape[1]
        offset = int(rng.integers(0, target_len - length + 1))
        signals[i, :, offset : offset + length] = rec.signal
        masks[i, offset : offset + length] = 1.0
    labels = np.array([r.label for r in records], dtype=np.int64)
    return MaskedBatch(signals, masks, labels)


def epoch_sampler(records: Sequence[Prepared], target_len: int, seed: int) -> Callable[[int], MaskedBatch]:
    """Per-epoch shuffling and fresh random placement, both seeded by ``(seed, epoch)``."""
    records = list(records)

    def make_epoch(epoch: int) -> MaskedBatch:
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(records))
        return pack([records[i] for i in order], target_len, rng)

    return make_epoch


def fixed_batch(records: Sequence[Prepared], target_len: int, seed: int) -> MaskedBatch:
    """Stable placement for validation/test sets."""
    return pack(records, target_len, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# splitting


def split_and_balance(
    records: Sequence[EcgRecord],
    seed: int,
    n_val: int = 5,
    n_test: int = 50,
    target_len: int = TARGET_LEN,
    num_classes: int = NUM_CLASSES,
) -> DatasetSplit:
    """Drop multi-label records, draw per-class val/test sets, upsample train to balance.

    Upsampling (with replacement, up to the largest class) is drawn once here.
    """
    single = sorted((r for r in records if len(r.labels) == 1), key=lambda r: r.id)
    by_class: dict[int, list[EcgRecord]] = defaultdict(list)
    for r in single:
        by_class[r.labels[0]].append(r)
    need = n_val + n_test
    for c in range(num_classes):
        if len(by_class[c]) < need:
            name = CLASS_NAMES[c] if num_classes == NUM_CLASSES else str(c)
            raise InputError(f"class {c} ({name}) has {len(by_class[c])} single-label records, needs {need}")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    train_by_class: dict[int, list[EcgRecord]] = {}
    for c in range(num_classes):
        members = by_class[c]
        order = rng.permutation(len(members))
        val += [members[i] for i in order[:n_val]]
        test += [members[i] for i in order[n_val:need]]
        train_by_class[c] = [members[i] for i in order[need:]]
    largest = max(len(v) for v in train_by_class.values())
    upsampled: dict[int, list[str]] = {}
    for c in range(num_classes):
        members = train_by_class[c]
        extra = rng.integers(0, len(members), size=largest - len(members)) if members else []
        upsampled[c] = [members[i].id for i in extra]
        train += members + [members[i] for i in extra]
    to_prep = lambda rs: [prepare(r, target_len) for r in rs]  # noqa: E731
    return DatasetSplit(to_prep(train), to_prep(val), to_prep(test), seed, upsampled)


# ---------------------------------------------------------------------------
# synthetic data


def _bump(width: int) -> np.ndarray:
    t = np.linspace(-1.0, 1.0, width)
    return np.exp(-8.0 * t**2)


def synth_dataset(
    n_per_class: int,
    length: int,
    n_classes: int,
    seed: int,
    channels: int = 8,
    bump_width: int = 48,
    bump_height: float = 1.0,
    noise: float = 0.1,
) -> list[Prepared]:
    """Class ``c`` = uniform baseline noise plus ``c`` bumps at random positions.

    Valid lengths are drawn uniformly from ``[length // 2, length]``; bumps
    never overlap. The same bump shape is used on every channel, scaled by a
    fixed per-channel gain in [0.5, 1].
    """
    if length < 64:
        raise ParameterError("synthetic length must be >= 64")
    rng = np.random.default_rng(seed)
    shape = _bump(bump_width)
    gains = np.linspace(1.0, 0.5, channels)[:, None]
    out = []
    for c in range(n_classes):
        for i in range(n_per_class):
            valid = int(rng.integers(length // 2, length + 1))
            sig = rng.uniform(-noise, noise, size=(channels, valid))
            slots = valid // bump_width
            if c > slots:
                raise ParameterError(f"length {valid} too short for {c} non-overlapping bumps")
            for s in rng.choice(slots, size=c, replace=False):
                start = s * bump_width
                sig[:, start : start + bump_width] += bump_height * gains * shape
            out.append(Prepared(f"synth-{c}-{i:05d}", sig, c))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


# ---------------------------------------------------------------------------
# packed container
#
# ``.npz`` with arrays ``signals`` [N, C, L], ``masks`` [N, L], ``labels`` [N]
# and ``header``: a JSON string {"format", "ids", "target_len", ...}.


def save_pack(path: str | Path, batch: MaskedBatch, ids: Sequence[str], meta: dict | None = None) -> Path:
    path = Path(path)
    header = {"format": PACK_FORMAT, "ids": list(ids), "target_len": int(batch.signals.shape[-1])}
    header.update(meta or {})
    with path.open("wb") as fh:
        np.savez(fh, signals=batch.signals, masks=batch.mask, labels=batch.labels, header=json.dumps(header))
    return path


def load_pack(path: str | Path) -> tuple[MaskedBatch, dict]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"packed dataset not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != PACK_FORMAT:
            raise IngestionError(f"{path}: not a {PACK_FORMAT} file")
        return MaskedBatch(z["signals"], z["masks"], z["labels"]), header


def unpack(batch: MaskedBatch, ids: Sequence[str]) -> list[Prepared]:
    """Recover the unpadded valid span of every packed record."""
    out = []
    for i, rec_id in enumerate(ids):
        valid = np.flatnonzero(batch.mask[i] > 0)
        out.append(Prepared(rec_id, batch.signals[i][:, valid[0] : valid[-1] + 1].copy(), int(batch.labels[i])))
    return out
