"""Masked variable-length 1D CNN for ECG classification.

Layout (defaults): a convolutional stem and ``num_blocks`` blocks, each
``conv(k=7, s=2) -> group norm -> relu -> maxpool(2)``, with channels doubling
per block. Input and output masks are tracked at every resolution by
average-pooling the input mask, padded positions are zeroed between stages,
and the final features are reduced with a mask-weighted channel mean before
the linear classifier.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InputError, ParameterError

CHECKPOINT_FORMAT = "robust_ecg.checkpoint/1"


@dataclass(frozen=True)
class EcgNetConfig:
    in_channels: int = 8
    input_length: int = 33792
    num_classes: int = 9
    stem_channels: int = 32
    num_blocks: int = 4
    total_downsample: int = 1024
    kernel_size: int = 7
    gn_groups: int = 8
    gn_eps: float = 1e-5

    @property
    def feature_dim(self) -> int:
        return self.stem_channels * 2**self.num_blocks

    @property
    def output_length(self) -> int:
        return self.input_length // self.total_downsample

    def validate(self) -> None:
        for name in ("in_channels", "input_length", "num_classes", "stem_channels", "kernel_size", "gn_groups"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.num_blocks < 0:
            raise ParameterError("num_blocks must be non-negative")
        # stem and every block each halve twice (strided conv + maxpool)
        if self.total_downsample != 4 ** (self.num_blocks + 1):
            raise ParameterError(
                f"total_downsample={self.total_downsample} but {self.num_blocks} blocks downsample by "
                f"{4 ** (self.num_blocks + 1)}"
            )
        if self.input_length % self.total_downsample:
            raise ParameterError(
                f"input_length {self.input_length} not divisible by total_downsample {self.total_downsample}"
            )
        if self.kernel_size % 2 == 0:
            raise ParameterError("kernel_size must be odd")
        if self.stem_channels % self.gn_groups:
            raise ParameterError(f"gn_groups {self.gn_groups} must divide stem_channels {self.stem_channels}")
        if self.gn_eps <= 0:
            raise ParameterError("gn_eps must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "EcgNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MaskedBatch:
    """Fixed-length padded signals with validity masks and integer labels."""

    signals: np.ndarray  # [N, C, L]
    mask: np.ndarray  # [N, L], entries in {0, 1}
    labels: np.ndarray  # [N]

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.signals.ndim != 3:
            raise ParameterError(f"signals must be [N, C, L], got {self.signals.shape}")
        n, _, length = self.signals.shape
        if self.mask.shape != (n, length):
            raise ParameterError(f"mask shape {self.mask.shape} does not match signals {self.signals.shape}")
        if self.labels.shape != (n,):
            raise ParameterError(f"labels shape {self.labels.shape} does not match batch size {n}")

    def __len__(self) -> int:
        return self.signals.shape[0]

    def subset(self, idx) -> "MaskedBatch":
        return MaskedBatch(self.signals[idx], self.mask[idx], self.labels[idx])

    def with_signals(self, signals: np.ndarray) -> "MaskedBatch":
        return MaskedBatch(signals, self.mask, self.labels)


def downsample_mask(mask, factor: int) -> np.ndarray:
    """Average-pool a mask ``[N, L]`` with kernel = stride = ``factor``."""
    m = np.asarray(mask, dtype=np.float64)
    if factor < 1 or m.shape[-1] % factor:
        raise ParameterError(f"mask length {m.shape[-1]} not divisible by factor {factor}")
    if factor == 1:
        return m
    return m.reshape(m.shape[:-1] + (m.shape[-1] // factor, factor)).mean(axis=-1)


def masked_mean(features, out_mask) -> Tensor:
    """``out[n, c] = sum_t f[n,c,t] * m[n,t] / sum_t m[n,t]``."""
    features = ag.as_tensor(features)
    m = np.asarray(out_mask, dtype=np.float64)
    if features.ndim != 3 or m.shape != (features.shape[0], features.shape[2]):
        raise ParameterError(f"mask {m.shape} does not match features {features.shape}")
    total = m.sum(axis=1)
    if np.any(total <= 0):
        raise InputError("masked_mean: a mask row has no valid element")
    weighted = ag.sum(ag.mul(features, m[:, None, :]), axis=2)
    return ag.div(weighted, total[:, None])


def _stage_names(cfg: EcgNetConfig) -> list[str]:
    return ["stem"] + [f"block{i}" for i in range(cfg.num_blocks)]


def _stage_channels(cfg: EcgNetConfig) -> list[tuple[int, int]]:
    chans = [(cfg.in_channels, cfg.stem_channels)]
    c = cfg.stem_channels
    for _ in range(cfg.num_blocks):
        chans.append((c, 2 * c))
        c *= 2
    return chans


class EcgNet:
    """The CNN: parameters live in an ordered name -> Tensor dict."""

    def __init__(self, cfg: EcgNetConfig, params: dict[str, Tensor]):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        expected = param_shapes(cfg)
        if list(params) != list(expected):
            raise ParameterError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ParameterError(f"{name}: expected shape {shape}, got {params[name].shape}")

    def __call__(self, signals, mask) -> Tensor:
        cfg = self.cfg
        x = ag.as_tensor(signals)
        mask = np.asarray(mask, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (cfg.in_channels, cfg.input_length):
            raise ParameterError(
                f"expected input [N, {cfg.in_channels}, {cfg.input_length}], got {tuple(x.shape)}"
            )
        if mask.shape != (x.shape[0], cfg.input_length):
            raise ParameterError(f"mask shape {mask.shape} does not match input {tuple(x.shape)}")
        p = self.params
        k = cfg.kernel_size
        factor = 1
        names = _stage_names(cfg)
        for i, name in enumerate(names):
            x = ag.conv1d(x, p[f"{name}.conv.weight"], p[f"{name}.conv.bias"], stride=2, pad=k // 2)
            factor *= 2
            x = ag.group_norm(
                x,
                cfg.gn_groups,
                p[f"{name}.gn.weight"],
                p[f"{name}.gn.bias"],
                eps=cfg.gn_eps,
                mask=downsample_mask(mask, factor),
            )
            x = ag.pool1d(ag.relu(x), "max", 2, 2, 0)
            factor *= 2
            if i < len(names) - 1:
                # keep padded positions at exactly zero so the next conv sees
                # the same context as its own zero padding
                x = ag.mul(x, downsample_mask(mask, factor)[:, None, :])
        feats = masked_mean(x, downsample_mask(mask, factor))
        return ag.linear(feats, p["fc.weight"], p["fc.bias"])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=True)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def forward(net: EcgNet, batch: MaskedBatch) -> Tensor:
    return net(batch.signals, batch.mask)


def param_shapes(cfg: EcgNetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, (c_in, c_out) in zip(_stage_names(cfg), _stage_channels(cfg)):
        shapes[f"{name}.conv.weight"] = (c_out, c_in, cfg.kernel_size)
        shapes[f"{name}.conv.bias"] = (c_out,)
        shapes[f"{name}.gn.weight"] = (c_out,)
        shapes[f"{name}.gn.bias"] = (c_out,)
    shapes["fc.weight"] = (cfg.num_classes, cfg.feature_dim)
    shapes["fc.bias"] = (cfg.num_classes,)
    return shapes


def build_ecgnet(cfg: EcgNetConfig, seed: int = 0) -> EcgNet:
    """Seeded init: conv/linear weights and biases ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in))."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    fan_in = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gn.weight"):
            value = np.ones(shape)
        elif name.endswith(".gn.bias"):
            value = np.zeros(shape)
        else:
            owner = name.rsplit(".", 1)[0]
            if name.endswith("weight"):
                fan_in[owner] = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in[owner])
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True)
    return EcgNet(cfg, params)


def num_parameters(cfg: EcgNetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


# ---------------------------------------------------------------------------
# checkpoints
#
# JSON object:
#   {"format": "robust_ecg.checkpoint/1",
#    "config": {<EcgNetConfig fields>},
#    "params": [{"name": str, "shape": [int...], "data": base64(<f8 row-major)}...],
#    "meta": {...}}


def save_checkpoint(net: EcgNet, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(net.cfg),
        "params": [
            {
                "name": name,
                "shape": list(t.shape),
                "data": base64.b64encode(np.ascontiguousarray(t.data, dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, t in net.params.items()
        ],
        "meta": meta or {},
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[EcgNet, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParameterError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = EcgNetConfig.from_dict(doc["config"])
    params = {}
    for entry in doc["params"]:
        raw = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
        params[entry["name"]] = Tensor(raw.reshape(entry["shape"]).astype(np.float64), requires_grad=True)
    return EcgNet(cfg, params), doc.get("meta", {})
