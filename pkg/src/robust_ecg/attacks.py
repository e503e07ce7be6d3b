"""L-infinity PGD and uniform white noise.

Both perturb only the valid (mask = 1) part of a padded batch unless
``perturb_padding`` is set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import NumericError, ParameterError
from .losses import cross_entropy_sum
from .model import MaskedBatch

# net(signals, mask) -> logits
Net = Callable[[Tensor, np.ndarray], Tensor]
# loss(logits, labels) -> scalar to be maximised
LossFn = Callable[[Tensor, np.ndarray], Tensor]

BALL_TOL = 1e-9


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 20
    alpha: float | None = None  # None -> 2.5 * epsilon / steps
    norm: str = "Linf"
    random_start: bool = False
    perturb_padding: bool = False
    seed: int = 0

    def step_size(self) -> float:
        return 2.5 * self.epsilon / self.steps if self.alpha is None else self.alpha

    def validate(self) -> None:
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ParameterError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.norm != "Linf":
            raise ParameterError(f"only the Linf norm is supported, got {self.norm!r}")
        if self.alpha is not None and not self.alpha > 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if self.epsilon > 0 and self.step_size() * self.steps < self.epsilon:
            warnings.warn(
                f"alpha*steps = {self.step_size() * self.steps:g} < epsilon = {self.epsilon:g}; "
                "the attack cannot reach the ball boundary",
                stacklevel=3,
            )


_LOSSES: dict[str, LossFn] = {"ce": cross_entropy_sum}


def _resolve_loss(loss: Union[str, LossFn]) -> LossFn:
    if callable(loss):
        return loss
    try:
        return _LOSSES[loss]
    except KeyError:
        raise ParameterError(f"unknown attack loss {loss!r}; choose from {sorted(_LOSSES)}") from None


def _noise_mask(batch: MaskedBatch, perturb_padding: bool) -> np.ndarray | float:
    return 1.0 if perturb_padding else batch.mask[:, None, :]


def pgd_attack(
    net: Net,
    batch: MaskedBatch,
    cfg: AttackConfig,
    loss: Union[str, LossFn] = "ce",
    trace: list | None = None,
) -> np.ndarray:
    """K-step sign-gradient ascent projected onto the L-inf ball around ``batch.signals``.

    ``x^k = x + clip(x^{k-1} + alpha * sign(grad) - x, -eps, eps)``, with the
    perturbation zeroed on padding unless ``cfg.perturb_padding``. When
    ``trace`` is a list, every iterate ``x^k`` is appended to it.
    """
    cfg.validate()
    loss_fn = _resolve_loss(loss)
    x0 = batch.signals
    if cfg.epsilon == 0:
        return x0.copy()
    eps = cfg.epsilon
    alpha = cfg.step_size()
    keep = _noise_mask(batch, cfg.perturb_padding)
    delta = np.zeros_like(x0)
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        delta = rng.uniform(-eps, eps, size=x0.shape) * keep
    for k in range(cfg.steps):
        x = Tensor(x0 + delta, requires_grad=True)
        objective = loss_fn(net(x, batch.mask), batch.labels)
        (g,) = ag.grad(objective, x)
        delta += alpha * np.sign(g.data)
        np.clip(delta, -eps, eps, out=delta)
        delta *= keep
        if np.abs(delta).max() > eps + BALL_TOL:
            raise NumericError(f"PGD step {k + 1} left the epsilon ball")
        if trace is not None:
            trace.append(x0 + delta)
    return x0 + delta


def uniform_noise(batch: MaskedBatch, epsilon: float, perturb_padding: bool = False, seed: int = 0) -> np.ndarray:
    """``x + eta`` with ``eta ~ U(-eps, eps)`` i.i.d. per element."""
    if not np.isfinite(epsilon) or epsilon < 0:
        raise ParameterError(f"epsilon must be finite and >= 0, got {epsilon}")
    if epsilon == 0:
        return batch.signals.copy()
    rng = np.random.default_rng(seed)
    eta = rng.uniform(-epsilon, epsilon, size=batch.signals.shape) * _noise_mask(batch, perturb_padding)
    return batch.signals + eta
