"""Training objectives and the shared training loop.

Four methods are supported:

``CE``     plain cross entropy on clean inputs.
``ADV``    0.5 * CE(clean) + 0.5 * CE(20-step PGD example), with the attack
           budget ramped linearly after the warmup epochs.
``JACOB``  CE + lambda / (N K) * Frobenius norm of d logits / d input.
``NSR``    squared error on logits, plus, for correctly classified samples,
           a hinge margin and ``beta * log(1 + R2)`` where R2 bounds the
           noise-to-signal ratio of the true-class logit.

The regularizing terms of ADV, JACOB and NSR are switched on only after
``warmup_epochs``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .attacks import AttackConfig, pgd_attack
from .autograd import Tensor
from .errors import NumericError, ParameterError, UsageError
from .losses import loss_ce, one_hot, per_sample_ce
from .model import EcgNet, MaskedBatch

log = logging.getLogger(__name__)

METHODS = ("CE", "ADV", "JACOB", "NSR")

__all__ = [
    "METHODS",
    "TrainConfig",
    "NsrTerms",
    "loss_ce",
    "per_sample_ce",
    "ramp_epsilon",
    "loss_adv",
    "loss_jacobian",
    "jacobian_penalty",
    "nsr_bound",
    "loss_nsr",
    "method_loss",
    "Adam",
    "TrainResult",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
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
    nsr_delta: float = 1e-4
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    perturb_padding: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", self.method.upper())

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs <= self.warmup_epochs:
            raise ParameterError(f"epochs ({self.epochs}) must exceed warmup_epochs ({self.warmup_epochs})")
        if self.warmup_epochs < 0 or self.batch_size < 1 or self.pgd_steps < 1:
            raise ParameterError("warmup_epochs, batch_size and pgd_steps must be positive")
        for name in ("epsilon", "lam", "beta", "eps_max", "lr"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ParameterError(f"{name} must be finite and >= 0, got {value}")
        if self.nsr_delta <= 0:
            raise ParameterError("nsr_delta must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def ramp_epsilon(t: int, t_max: int, epsilon: float, warmup: int = 10) -> float:
    """Noise level for epoch ``t``: ``epsilon * (t - warmup) / (t_max - warmup)`` clamped to [0, epsilon]."""
    if t_max <= warmup:
        raise ParameterError(f"t_max ({t_max}) must exceed the warmup ({warmup})")
    if t < 1:
        raise ParameterError(f"epochs are 1-based, got t={t}")
    value = epsilon * (t - warmup) / (t_max - warmup)
    return float(min(max(value, 0.0), epsilon))


# ---------------------------------------------------------------------------
# objectives

Net = Callable[[Tensor, np.ndarray], Tensor]


def loss_adv(net: Net, batch: MaskedBatch, cfg: TrainConfig, epoch: int) -> Tensor:
    clean = loss_ce(net(Tensor(batch.signals), batch.mask), batch.labels)
    if epoch <= cfg.warmup_epochs:
        return clean
    eps_t = ramp_epsilon(epoch, cfg.epochs, cfg.epsilon, cfg.warmup_epochs)
    attack = AttackConfig(
        epsilon=eps_t, steps=cfg.pgd_steps, alpha=cfg.pgd_alpha, perturb_padding=cfg.perturb_padding
    )
    x_adv = pgd_attack(net, batch, attack)
    adv = loss_ce(net(Tensor(x_adv), batch.mask), batch.labels)
    return ag.add(ag.mul(clean, 0.5), ag.mul(adv, 0.5))


def jacobian_penalty(logits: Tensor, x: Tensor) -> Tensor:
    """``sqrt(sum_{n,k,d} (d z_k(x_n) / d x_d)^2)``, differentiable (K backward passes)."""
    total = None
    for k in range(logits.shape[1]):
        (jk,) = ag.grad(ag.sum(logits[:, k]), x, create_graph=True)
        term = ag.sum(ag.square(jk))
        total = term if total is None else ag.add(total, term)
    return ag.sqrt(total)


def loss_jacobian(net: Net, batch: MaskedBatch, cfg: TrainConfig, epoch: int) -> Tensor:
    active = epoch > cfg.warmup_epochs and cfg.lam > 0
    x = Tensor(batch.signals, requires_grad=active)
    logits = net(x, batch.mask)
    ce = loss_ce(logits, batch.labels)
    if not active:
        return ce
    n, k = logits.shape
    return ag.add(ce, ag.mul(jacobian_penalty(logits, x), cfg.lam / (n * k)))


@dataclass
class NsrTerms:
    """Per-sample pieces of the noise-to-signal bound ``R2 = |w_y|_1 eps_max / max(|z_y|, delta)``."""

    w_norm1: Tensor
    z_abs: Tensor
    r2: Tensor
    correct: np.ndarray


def nsr_bound(logits: Tensor, x: Tensor, labels, eps_max: float = 1.0, delta: float = 1e-4) -> NsrTerms:
    """NSR bound terms from a retained forward pass ``logits = net(x)``.

    ``w_y = d z_y / d x`` is the effective input weight of the true-class
    logit; it is exact for piecewise-linear networks.
    """
    labels = np.asarray(labels, dtype=np.int64)
    y = one_hot(labels, logits.shape[1])
    zy = ag.sum(ag.mul(logits, y), axis=1)
    (w,) = ag.grad(ag.sum(zy), x, create_graph=True)
    batch_axes = tuple(range(1, w.ndim))
    w1 = ag.sum(ag.abs(w), axis=batch_axes)
    z_abs = ag.abs(zy)
    r2 = ag.div(ag.mul(w1, eps_max), ag.maximum(z_abs, delta))
    correct = np.argmax(logits.data, axis=1) == labels
    return NsrTerms(w_norm1=w1, z_abs=z_abs, r2=r2, correct=correct)


def loss_nsr(
    logits: Tensor,
    nsr: NsrTerms | None,
    labels,
    beta: float,
    epoch: int,
    warmup: int = 10,
) -> Tensor:
    """Squared error on every sample; margin and ``beta*log(R2+1)`` on correct ones after warmup."""
    labels = np.asarray(labels, dtype=np.int64)
    y = one_hot(labels, logits.shape[1])
    mse = ag.sum(ag.square(ag.sub(logits, y)), axis=1)
    correct = np.argmax(logits.data, axis=1) == labels
    active = (correct & (epoch > warmup)).astype(np.float64)
    if not active.any():
        return ag.mean(mse)
    zy = ag.sum(ag.mul(logits, y), axis=1, keepdims=True)
    # i == y contributes the constant 1 with zero gradient; it is left out
    margin = ag.sum(ag.mul(ag.relu(ag.add(ag.sub(logits, zy), 1.0)), 1.0 - y), axis=1)
    extra = margin
    if beta != 0:
        if nsr is None:
            raise UsageError("loss_nsr needs NSR terms once the regularizer is active")
        extra = ag.add(margin, ag.mul(ag.log(ag.add(nsr.r2, 1.0)), beta))
    return ag.mean(ag.add(mse, ag.mul(extra, active)))


def _nsr_objective(net: Net, batch: MaskedBatch, cfg: TrainConfig, epoch: int) -> Tensor:
    after_warmup = epoch > cfg.warmup_epochs
    x = Tensor(batch.signals, requires_grad=after_warmup and cfg.beta != 0)
    logits = net(x, batch.mask)
    nsr = None
    if x.requires_grad and np.any(np.argmax(logits.data, axis=1) == batch.labels):
        nsr = nsr_bound(logits, x, batch.labels, cfg.eps_max, cfg.nsr_delta)
    return loss_nsr(logits, nsr, batch.labels, cfg.beta, epoch, cfg.warmup_epochs)


def method_loss(net: Net, batch: MaskedBatch, cfg: TrainConfig, epoch: int) -> Tensor:
    if cfg.method == "CE":
        return loss_ce(net(Tensor(batch.signals), batch.mask), batch.labels)
    if cfg.method == "ADV":
        return loss_adv(net, batch, cfg, epoch)
    if cfg.method == "JACOB":
        return loss_jacobian(net, batch, cfg, epoch)
    if cfg.method == "NSR":
        return _nsr_objective(net, batch, cfg, epoch)
    raise ParameterError(f"unknown method {cfg.method!r}")


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g.data
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * np.square(g.data)
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


@dataclass
class TrainResult:
    net: EcgNet
    history: list[dict]
    best_epoch: int
    best_state: dict[str, np.ndarray]


HISTORY_COLUMNS = ("epoch", "loss", "val_acc", "val_f1", "epsilon_t")


def train(
    net: EcgNet,
    make_epoch: Callable[[int], MaskedBatch],
    val: MaskedBatch | None,
    cfg: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``net`` in place.

    ``make_epoch(epoch)`` returns the (already shuffled and placed) training
    batch for that epoch; see :func:`robust_ecg.data.epoch_sampler`. The
    parameters with the best validation macro-F1 after the warmup (so a
    defended model never falls back to its undefended warmup state) are kept
    in ``best_state`` and loaded into ``net`` at the end.
    """
    from .evaluate import accuracy, macro_f1, predict

    cfg.validate()
    params = net.parameters()
    opt = Adam(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history: list[dict] = []
    best_f1, best_epoch, best_state = -math.inf, 0, net.state()
    for epoch in range(1, cfg.epochs + 1):
        data = make_epoch(epoch)
        n = len(data)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = data.subset(slice(start, start + cfg.batch_size))
            loss = method_loss(net, batch, cfg, epoch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch} batch {b + 1}")
            grads = ag.grad(loss, params)
            if not all(np.all(np.isfinite(g.data)) for g in grads):
                raise NumericError(f"non-finite gradient at epoch {epoch} batch {b + 1}")
            opt.step(grads)
            total += value * len(batch)
        row = {
            "epoch": epoch,
            "loss": total / n,
            "val_acc": float("nan"),
            "val_f1": float("nan"),
            "epsilon_t": (
                ramp_epsilon(epoch, cfg.epochs, cfg.epsilon, cfg.warmup_epochs) if cfg.method == "ADV" else 0.0
            ),
        }
        if val is not None:
            preds = predict(net, val.signals, val.mask)
            row["val_acc"] = accuracy(preds, val.labels)
            row["val_f1"] = macro_f1(preds, val.labels, net.cfg.num_classes)
            if epoch > cfg.warmup_epochs and row["val_f1"] > best_f1:
                best_f1, best_epoch, best_state = row["val_f1"], epoch, net.state()
        else:
            best_epoch, best_state = epoch, net.state()
        history.append(row)
        log.info("%s epoch %d loss %.5f val_acc %.3f val_f1 %.3f", cfg.method, epoch, row["loss"], row["val_acc"], row["val_f1"])
        if on_epoch is not None:
            on_epoch(row)
    net.load_state(best_state)
    return TrainResult(net=net, history=history, best_epoch=best_epoch, best_state=best_state)
