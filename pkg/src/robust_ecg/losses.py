"""Cross entropy on logits, shared by attacks and training objectives."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ParameterError


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def per_sample_ce(logits: Tensor, labels) -> Tensor:
    """``-log softmax(logits)[y]`` per row, via a max-shifted log-sum-exp."""
    logits = ag.as_tensor(logits)
    if logits.ndim != 2:
        raise ParameterError(f"logits must be [N, K], got {logits.shape}")
    y = one_hot(labels, logits.shape[1])
    shift = logits.data.max(axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    lse = ag.add(ag.log(ag.sum(ag.exp(ag.sub(logits, shift)), axis=1)), shift[:, 0])
    picked = ag.sum(ag.mul(logits, y), axis=1)
    return ag.sub(lse, picked)


def loss_ce(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross entropy."""
    return ag.mean(per_sample_ce(logits, labels))


def cross_entropy_sum(logits: Tensor, labels) -> Tensor:
    """Summed cross entropy; keeps per-sample input gradients at full scale."""
    return ag.sum(per_sample_ce(logits, labels))
