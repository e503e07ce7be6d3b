"""Dense float64 tensors with a reverse-mode autodiff graph.

Every backward rule is written in terms of the same differentiable ops it
differentiates, so gradients obtained with ``create_graph=True`` are graph
nodes themselves and can be differentiated again (double backprop). The
Jacobian and noise-to-signal regularizers depend on this.

Convolution and pooling are built on a pair of mutually-adjoint linear ops,
:func:`unfold1d` and :func:`fold1d`, which keeps every higher-order rule
closed over the op set.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError, UsageError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "grad",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "sqrt",
    "exp",
    "log",
    "abs",
    "relu",
    "maximum",
    "sign",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
    "matmul",
    "index",
    "scatter",
    "unfold1d",
    "fold1d",
    "max_along",
    "linear",
    "conv1d",
    "pool1d",
    "group_norm",
]

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    """Context manager that stops graph recording."""
    return _grad_mode(False)


BackwardFn = Callable[["Tensor", tuple], Sequence["Tensor | None"]]


class Tensor:
    """An n-d float64 array that doubles as a graph node.

    Tensors are treated as immutable: ops always allocate fresh results.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, create_graph: bool = False) -> None:
        backward(self, create_graph=create_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __truediv__ = lambda self, other: div(self, other)  # noqa: E731
    __rtruediv__ = lambda self, other: div(other, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(roots: Sequence[Tensor], targets: set[int] | None) -> tuple[list[Tensor], set[int]]:
    """Reverse-topological list of nodes that lie on a path root -> target.

    With ``targets=None`` every requires_grad node reachable from the roots is
    relevant.
    """
    post: list[Tensor] = []
    relevant: set[int] = set()
    visited: set[int] = set()
    for root in roots:
        if not root.requires_grad or id(root) in visited:
            continue
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        visited.add(id(root))
        while stack:
            node, i = stack[-1]
            parents = node._parents
            if i < len(parents):
                stack[-1] = (node, i + 1)
                p = parents[i]
                if p.requires_grad and id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, 0))
                continue
            stack.pop()
            if targets is None or id(node) in targets or any(id(p) in relevant for p in parents):
                relevant.add(id(node))
                post.append(node)
    post.reverse()
    return post, relevant


def _propagate(roots, seeds, targets, create_graph):
    order, relevant = _topo_order(roots, targets)
    grads: dict[int, Tensor] = {}
    for r, g in zip(roots, seeds):
        if id(r) in relevant:
            grads[id(r)] = g if id(r) not in grads else add(grads[id(r)], g)
    with _grad_mode(create_graph):
        for node in order:
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            needs = tuple(p.requires_grad and id(p) in relevant for p in node._parents)
            if not any(needs):
                continue
            pgrads = node._backward(g, needs)
            for p, pg, need in zip(node._parents, pgrads, needs):
                if not need or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    return order, grads


def grad(
    outputs: Tensor | Sequence[Tensor],
    inputs: Tensor | Sequence[Tensor],
    grad_outputs: Tensor | Sequence[Tensor] | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``outputs`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs that do not influence the outputs get a zero gradient.
    """
    outs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    ins = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if grad_outputs is None:
        for o in outs:
            if o.size != 1:
                raise UsageError(f"grad_outputs required for non-scalar output of shape {o.shape}")
        seeds = [Tensor(np.ones_like(o.data)) for o in outs]
    else:
        gos = [grad_outputs] if isinstance(grad_outputs, Tensor) else list(grad_outputs)
        seeds = [as_tensor(g) for g in gos]
    targets = {id(t) for t in ins}
    _, grads = _propagate(outs, seeds, targets, create_graph)
    result = []
    for t in ins:
        g = grads.get(id(t))
        result.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return result


def backward(root: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable requires_grad node."""
    if root.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
    order, grads = _propagate([root], [Tensor(np.ones_like(root.data))], None, create_graph)
    with _grad_mode(create_graph):
        for node in order:
            g = grads.get(id(node))
            if g is None:
                continue
            node.grad = g if node.grad is None else add(node.grad, g)


# ---------------------------------------------------------------------------
# broadcasting helpers


def _sum_to_shape(data: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if data.shape == shape:
        return data
    lead = data.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(shape) if s == 1 and data.shape[i + lead] != 1)
    out = data.sum(axis=axes, keepdims=True) if axes else data
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape

    def bw(g, needs):
        return (broadcast_to(g, src),)

    return _node(_sum_to_shape(x.data, shape), (x,), bw, "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape

    def bw(g, needs):
        return (sum_to(g, src),)

    return _node(np.broadcast_to(x.data, shape), (x,), bw, "broadcast_to")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = sum_to(div(g, b), a.shape)
        if needs[1]:
            gb = sum_to(neg(div(mul(g, a), square(b))), b.shape)
        return ga, gb

    return _node(a.data / b.data, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g, needs: (mul(g, mul(a, 2.0)),), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sqrt(a.data), (a,), lambda g, needs: (div(mul(g, 0.5), sqrt(a)),), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.exp(a.data), (a,), lambda g, needs: (mul(g, exp(a)),), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g, needs: (div(g, a),), "log")


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    s = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g, needs: (mul(g, s),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _node(np.where(on, a.data, 0.0), (a,), lambda g, needs: (mul(g, on.astype(np.float64)),), "relu")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = (a.data >= b.data).astype(np.float64)

    def bw(g, needs):
        return (
            sum_to(mul(g, pick_a), a.shape) if needs[0] else None,
            sum_to(mul(g, 1.0 - pick_a), b.shape) if needs[1] else None,
        )

    return _node(np.maximum(a.data, b.data), (a, b), bw, "maximum")


def sign(a) -> Tensor:
    """Piecewise constant, so the result never carries a graph."""
    return Tensor(np.sign(as_tensor(a).data))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    src = a.shape

    def bw(g, needs):
        return (broadcast_to(reshape(g, kept), src),)

    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    if src == shape:
        return a
    return _node(a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, src),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g, needs: (transpose(g, inv),), "transpose")


def _swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def matmul(a, b) -> Tensor:
    """Batched matrix product of operands with ndim >= 2 (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ParameterError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ParameterError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g, needs):
        return (
            sum_to(matmul(g, _swap_last(b)), a.shape) if needs[0] else None,
            sum_to(matmul(_swap_last(a), g), b.shape) if needs[1] else None,
        )

    return _node(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def index(a, key) -> Tensor:
    """``a[key]`` for any numpy index expression."""
    a = as_tensor(a)
    src = a.shape
    return _node(a.data[key], (a,), lambda g, needs: (scatter(g, src, key),), "index")


def scatter(g, shape, key) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``key`` (adjoint of :func:`index`)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    np.add.at(out, key, g.data)
    return _node(out, (g,), lambda gg, needs: (index(gg, key),), "scatter")


# ---------------------------------------------------------------------------
# sliding windows


def _out_len(length: int, k: int, stride: int, pad: int) -> int:
    if k < 1 or stride < 1 or pad < 0:
        raise ParameterError(f"invalid window geometry k={k} stride={stride} pad={pad}")
    if length + 2 * pad < k:
        raise ParameterError(f"window {k} longer than padded length {length + 2 * pad}")
    return (length + 2 * pad - k) // stride + 1


def unfold1d(x, k: int, stride: int = 1, pad: int = 0, pad_value: float = 0.0) -> Tensor:
    """Sliding windows over the last axis: ``[..., L] -> [..., k, L_out]``.

    ``out[..., i, j] = xp[..., j * stride + i]`` with ``xp`` the padded input.
    """
    x = as_tensor(x)
    length = x.shape[-1]
    n_out = _out_len(length, k, stride, pad)
    xp = x.data
    if pad:
        widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
        xp = np.pad(xp, widths, constant_values=pad_value)
    span = stride * (n_out - 1) + 1
    out = np.stack([xp[..., i : i + span : stride] for i in range(k)], axis=-2)

    def bw(g, needs):
        return (fold1d(g, length, k, stride, pad),)

    return _node(out, (x,), bw, "unfold1d")


def fold1d(g, length: int, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Overlap-add windows ``[..., k, L_out] -> [..., length]`` (adjoint of unfold1d)."""
    g = as_tensor(g)
    n_out = g.shape[-1]
    span = stride * (n_out - 1) + 1
    acc = np.zeros(g.shape[:-2] + (length + 2 * pad,))
    for i in range(k):
        acc[..., i : i + span : stride] += g.data[..., i, :]
    out = acc[..., pad : pad + length]
    if pad:
        out = np.ascontiguousarray(out)

    def bw(gg, needs):
        return (unfold1d(gg, k, stride, pad),)

    return _node(out, (g,), bw, "fold1d")


def max_along(a, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal element."""
    a = as_tensor(a)
    axis = axis % a.ndim
    moved = np.moveaxis(a.data, axis, 0)
    out = moved[0].copy()
    idx = np.zeros(out.shape, dtype=np.intp)
    for i in range(1, moved.shape[0]):
        better = moved[i] > out
        np.copyto(out, moved[i], where=better)
        idx[better] = i
    pos = np.arange(a.shape[axis]).reshape((-1,) + (1,) * (a.ndim - axis - 1))
    onehot = (pos == np.expand_dims(idx, axis)).astype(np.float64)
    kept = a.shape[:axis] + (1,) + a.shape[axis + 1 :]

    def bw(g, needs):
        return (mul(reshape(g, kept), onehot),)

    return _node(out, (a,), bw, "max_along")


# ---------------------------------------------------------------------------
# layers


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape [..., in] and ``w`` of shape [out, in]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[-1]:
        raise ParameterError(f"linear: input width {x.shape[-1]} != weight width {w.shape[-1]}")
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    out = matmul(x, transpose(w))
    if b is not None:
        out = add(out, b)
    return reshape(out, out.shape[1:]) if squeeze else out


def conv1d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [C_in, L] or [N, C_in, L] with ``w`` [C_out, C_in, k]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3:
        raise ParameterError(f"conv1d weight must be [C_out, C_in, k], got {w.shape}")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ParameterError(f"conv1d input {x.shape} does not match weight {w.shape}")
    c_out, c_in, k = w.shape
    if b is not None and as_tensor(b).shape != (c_out,):
        raise ParameterError(f"conv1d bias must have shape ({c_out},)")
    n = x.shape[0]
    cols = unfold1d(x, k, stride, pad)  # [N, C_in, k, L_out]
    n_out = cols.shape[-1]
    cols = reshape(cols, (n, c_in * k, n_out))
    out = matmul(reshape(w, (c_out, c_in * k)), cols)
    if b is not None:
        out = add(out, reshape(b, (c_out, 1)))
    return reshape(out, out.shape[1:]) if squeeze else out


def pool1d(x, kind: str, k: int, stride: int | None = None, pad: int = 0) -> Tensor:
    """Max or average pooling over the last axis.

    Padding counts as -inf for ``max`` and as 0 (included in the divisor) for
    ``avg``.
    """
    x = as_tensor(x)
    stride = k if stride is None else stride
    length = x.shape[-1]
    if kind in ("max", "avg") and pad == 0 and stride == k and length % k == 0:
        # non-overlapping windows: a reshape replaces the unfold copy
        win = reshape(x, x.shape[:-1] + (length // k, k))
        return max_along(win, -1) if kind == "max" else mean(win, axis=-1)
    if kind == "max":
        return max_along(unfold1d(x, k, stride, pad, pad_value=-np.inf), axis=-2)
    if kind == "avg":
        return mean(unfold1d(x, k, stride, pad), axis=-2)
    raise ParameterError(f"unknown pooling kind {kind!r}")


def _gn_composed(x, groups, gamma, beta, eps, m):
    """Group norm spelled out in primitive ops (used for higher-order grads)."""
    n, c, length = x.shape
    per = c // groups
    xg = reshape(x, (n, groups, per, length))
    if m is None:
        mu = mean(xg, axis=(2, 3), keepdims=True)
        centered = sub(xg, mu)
        var = mean(square(centered), axis=(2, 3), keepdims=True)
    else:
        w = m.reshape(n, 1, 1, length)
        denom = per * w.sum(axis=3, keepdims=True)
        mu = div(sum(mul(xg, w), axis=(2, 3), keepdims=True), denom)
        centered = sub(xg, mu)
        var = div(sum(mul(square(centered), w), axis=(2, 3), keepdims=True), denom)
    xhat = reshape(div(centered, sqrt(add(var, eps))), (n, c, length))
    return add(mul(xhat, reshape(gamma, (c, 1))), reshape(beta, (c, 1)))


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = 1e-5, mask=None) -> Tensor:
    """Group normalization of ``x`` [N, C, L] (or [C, L]).

    When ``mask`` [N, L] is given, group statistics are mask-weighted averages,
    so positions with zero weight do not influence them.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, c, length = x.shape
    if groups < 1 or c % groups:
        raise ParameterError(f"{c} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ParameterError("group_norm eps must be positive")
    gamma = Tensor(np.ones(c)) if gamma is None else as_tensor(gamma)
    beta = Tensor(np.zeros(c)) if beta is None else as_tensor(beta)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ParameterError(f"group_norm affine parameters must have shape ({c},)")
    per = c // groups
    m = None
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
        if m.shape != (n, length):
            raise ParameterError(f"group_norm mask shape {m.shape} does not match input {x.shape}")

    xg = x.data.reshape(n, groups, per, length)
    if m is None:
        w = None
        count = per * length
        mu = xg.mean(axis=(2, 3), keepdims=True)
        centered = xg - mu
        var = np.square(centered).mean(axis=(2, 3), keepdims=True)
    else:
        w = m.reshape(n, 1, 1, length)
        count = per * w.sum(axis=3, keepdims=True)
        if np.any(count <= 0):
            raise ParameterError("group_norm mask has an all-zero row")
        mu = (xg * w).sum(axis=(2, 3), keepdims=True) / count
        centered = xg - mu
        var = (np.square(centered) * w).sum(axis=(2, 3), keepdims=True) / count
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std  # [n, G, per, L]
    out = xhat.reshape(n, c, length) * gamma.data[:, None] + beta.data[:, None]

    def bw(g, needs):
        if is_grad_enabled():
            # differentiable gradient requested: re-derive from the composed form
            parents = (x, gamma, beta)
            wanted = [p for p, need in zip(parents, needs) if need]
            y = _gn_composed(x, groups, gamma, beta, eps, m)
            got = iter(grad(y, wanted, grad_outputs=g, create_graph=True))
            return tuple(next(got) if need else None for need in needs)
        gd = g.data
        gx = ggam = gbet = None
        if needs[0]:
            gxhat = (gd * gamma.data[:, None]).reshape(n, groups, per, length)
            if w is None:
                s1 = gxhat.sum(axis=(2, 3), keepdims=True) / count
                s2 = (gxhat * xhat).sum(axis=(2, 3), keepdims=True) / count
                gx = inv_std * (gxhat - s1 - xhat * s2)
            else:
                # every output position depends on the weighted statistics
                s1 = gxhat.sum(axis=(2, 3), keepdims=True) / count
                s2 = (gxhat * xhat).sum(axis=(2, 3), keepdims=True) / count
                gx = inv_std * (gxhat - w * (s1 + xhat * s2))
            gx = Tensor(gx.reshape(n, c, length))
        if needs[1]:
            ggam = Tensor((gd * xhat.reshape(n, c, length)).sum(axis=(0, 2)))
        if needs[2]:
            gbet = Tensor(gd.sum(axis=(0, 2)))
        return gx, ggam, gbet

    res = _node(out, (x, gamma, beta), bw, "group_norm")
    return reshape(res, res.shape[1:]) if squeeze else res
