"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to tracked tensors in
execution order; :meth:`Tape.backward` walks that record in reverse.
Tensors carry a leading batch shape ``(..., N, C)`` where ``N`` indexes
correspondences and ``C`` channels. Unless :func:`ordered_reductions` is
switched off (the trainer does so for speed), reductions along ``N`` are
summed in sorted order so that results are bitwise invariant to row
permutations.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DegenerateSpectrumError",
    "ParameterStore",
    "ordered_reductions",
    "BatchNormState",
    "adam_step",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class DegenerateSpectrumError(ArithmeticError):
    """Smallest eigenvalue not separated enough to differentiate its eigenvector."""


class Tensor:
    __slots__ = ("value", "tape", "node_id")
    __array_ufunc__ = None  # make ``ndarray op Tensor`` defer to the reflected Tensor method

    def __init__(self, value, tape: "Tape | None" = None, node_id: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


@dataclass
class _Entry:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered operation record for one forward/backward pass."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.leaves: dict[int, tuple[int, ...]] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def variable(self, value) -> Tensor:
        """Register a leaf tensor whose gradient will be reported."""
        t = Tensor(np.array(value, dtype=np.float64), self, self._new_id())
        self.leaves[t.node_id] = t.shape
        return t

    def backward(self, output: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a rank-0 ``output`` for every leaf on this tape."""
        if output.tape is not self:
            raise ValueError("backward: output was not produced on this tape")
        if output.value.ndim != 0:
            raise ShapeError("backward", output.shape, detail="output must be a scalar")
        grads: dict[int, np.ndarray] = {output.node_id: np.ones(())}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output, None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for nid, gi in zip(entry.inputs, in_grads):
                if nid is None or gi is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + gi
                else:
                    grads[nid] = gi
        out = {}
        for nid, shape in self.leaves.items():
            g = grads.get(nid)
            out[nid] = np.zeros(shape) if g is None else np.broadcast_to(g, shape).copy()
        return out

    def gradients(self, output: Tensor, wrt: dict[str, Tensor]) -> dict[str, np.ndarray]:
        grads = self.backward(output)
        return {name: grads[t.node_id] for name, t in wrt.items()}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], value: np.ndarray, backward) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{op}: inputs live on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    out = Tensor(value, tape, tape._new_id())
    ids = tuple(t.node_id if t.tape is not None else None for t in inputs)
    tape.entries.append(_Entry(op, ids, out.node_id, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _norm_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(op, (ndim,), detail=f"axis {axis} out of range")
    return axis % ndim


_ORDERED = [True]


@contextmanager
def ordered_reductions(enabled: bool):
    """Toggle sorted summation for reductions over ``N`` inside the block.

    Sorting makes sums bitwise independent of row order but dominates the
    cost of a training step, where only run-to-run determinism is needed.
    """
    _ORDERED.append(bool(enabled))
    try:
        yield
    finally:
        _ORDERED.pop()


def ordered_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` in sorted order (result independent of element order)."""
    if not _ORDERED[-1]:
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.value + b.value,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.value - b.value,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record("mul", (a, b), av * bv,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv

    def backward(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _record("div", (a, b), out, backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.value, lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0  # subgradient 0 at exactly 0
    return _record("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 + 0.5 * np.tanh(0.5 * a.value)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("log", (a,), np.log(av), lambda g: (g / av,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _record("exp", (a,), out, lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _record("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("square", (a,), av * av, lambda g: (2.0 * g * av,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _record("clip", (a,), np.clip(a.value, lo, hi), lambda g: (g * inside,))


def select(cond, a, b) -> Tensor:
    """Elementwise ``a if cond else b`` with ``cond`` a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("select", (a, b), np.where(cond, a.value, b.value),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)))


# ---------------------------------------------------------------- structural


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return _record("transpose", (a,), np.transpose(a.value, axes),
                   lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    nd = tensors[0].ndim
    ax = _norm_axis("concat", axis, nd)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *[u.shape for u in tensors], detail=f"axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record("concat", tensors, np.concatenate([t.value for t in tensors], axis=ax),
                   lambda g: tuple(np.split(g, splits, axis=ax)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record("matmul", (a, b), av @ bv, backward)


# ---------------------------------------------------------------- per-point maps


def linear(x, weight, bias=None) -> Tensor:
    """Per-point linear map shared across rows: ``x @ W + b`` on the last axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    xv, wv = x.value, weight.value
    out = xv @ wv
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wv.shape[1],):
            raise ShapeError("linear", x.shape, weight.shape, bias.shape)
        out = out + bias.value
        inputs.append(bias)

    def backward(g):
        gx = g @ wv.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("linear", inputs, out, backward)


def grouped_linear(x, weight, bias=None) -> Tensor:
    """Per-point map with channels split into G groups, each with its own block.

    ``weight`` has shape ``(G, C_in/G, C_out/G)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 3:
        raise ShapeError("grouped_linear", x.shape, weight.shape, detail="weight must be (G, in, out)")
    G, gi, go = weight.shape
    if x.shape[-1] != G * gi:
        raise ShapeError("grouped_linear", x.shape, weight.shape)
    lead = x.shape[:-1]
    xv = x.value.reshape(-1, G, gi).transpose(1, 0, 2)  # (G, M, gi)
    wv = weight.value
    out = (xv @ wv).transpose(1, 0, 2).reshape(*lead, G * go)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (G * go,):
            raise ShapeError("grouped_linear", x.shape, weight.shape, bias.shape)
        out = out + bias.value
        inputs.append(bias)

    def backward(g):
        gg = g.reshape(-1, G, go).transpose(1, 0, 2)  # (G, M, go)
        gx = (gg @ wv.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(*lead, G * gi)
        gw = xv.transpose(0, 2, 1) @ gg
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, G * go).sum(axis=0)

    return _record("grouped_linear", inputs, out, backward)


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        out = np.sort(a.value, axis=None).sum()
        return _record("sum", (a,), np.asarray(out), lambda g: (np.broadcast_to(g, shape),))
    ax = _norm_axis("sum", axis, a.ndim)
    if shape[ax] == 0:
        raise ShapeError("sum", shape, detail=f"empty axis {axis}")
    out = ordered_sum(a.value, ax, keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape),)

    return _record("sum", (a,), out, backward)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[_norm_axis("mean", axis, a.ndim)]
    if count == 0:
        raise ShapeError("mean", a.shape, detail=f"empty axis {axis}")
    return mul(sum(a, axis, keepdims), 1.0 / count)


def norm(a, axes: tuple[int, ...] = (-2, -1)) -> Tensor:
    """Euclidean norm over ``axes``; the gradient at the origin is taken as 0."""
    a = as_tensor(a)
    av = a.value
    out = np.sqrt((av * av).sum(axis=axes))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (av * np.expand_dims(scale, axes),)

    return _record("norm", (a,), out, backward)


def softmax(a, axis: int = -2) -> Tensor:
    """Softmax along the correspondence axis."""
    a = as_tensor(a)
    ax = _norm_axis("softmax", axis, a.ndim)
    if a.shape[ax] == 0:
        raise ShapeError("softmax", a.shape, detail=f"empty axis {axis}")
    z = np.exp(a.value - a.value.max(axis=ax, keepdims=True))
    out = z / ordered_sum(z, ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _record("softmax", (a,), out, backward)


def weighted_moments(x, w, eps: float = 0.0) -> tuple[Tensor, Tensor]:
    """Per-channel weighted mean and std over the N axis.

    ``x`` is ``(..., N, C)``, ``w`` is ``(..., N, 1)``. Returns
    ``u = sum(w x)`` and ``sqrt(sum(w (x - u)^2) + eps)``, both ``(..., 1, C)``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim < 2 or w.shape != x.shape[:-1] + (1,):
        raise ShapeError("weighted_moments", x.shape, w.shape)
    if x.shape[-2] == 0:
        raise ShapeError("weighted_moments", x.shape, detail="empty N axis")
    xv, wv = x.value, w.value
    u = ordered_sum(wv * xv, -2, keepdims=True)
    d = xv - u
    var = ordered_sum(wv * d * d, -2, keepdims=True)
    std = np.sqrt(var + eps)
    # s1 = sum(w d) vanishes when weights sum to one; kept for exactness otherwise
    s1 = (wv * d).sum(axis=-2, keepdims=True)

    def backward_u(g):
        return g * wv, _unbroadcast(g * xv, wv.shape)

    def backward_std(g):
        gv = g / (2.0 * std)
        gx = gv * (2.0 * wv * d - 2.0 * s1 * wv)
        gw = (gv * (d * d - 2.0 * s1 * xv)).sum(axis=-1, keepdims=True)
        return gx, gw

    mean_t = _record("weighted_mean", (x, w), u, backward_u)
    std_t = _record("weighted_std", (x, w), std, backward_std)
    return mean_t, std_t


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Normalize each channel over all pairs and correspondences of the batch.

    Training mode uses the batch statistics (over every axis but the last)
    and folds them into the running estimates; inference uses the running
    estimates. Statistics pooled across pairs matter: normalizing each pair
    separately would exactly undo the per-pair affine map applied by context
    normalization.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[-1]
    if x.ndim < 2 or gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batch_norm", x.shape, gamma.shape, beta.shape)
    if x.shape[-2] == 0:
        raise ShapeError("batch_norm", x.shape, detail="empty N axis")
    xv, gv = x.value, gamma.value
    flat = xv.reshape(-1, C)
    M = flat.shape[0]
    if training:
        mu = ordered_sum(flat, 0) / M
        d = flat - mu
        var = ordered_sum(d * d, 0) / M
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = d * inv
        m = state.momentum
        state.mean = m * state.mean + (1 - m) * mu
        state.var = m * state.var + (1 - m) * var

        def backward(g):
            g2 = g.reshape(-1, C)
            gxhat = g2 * gv
            gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
            return gx.reshape(xv.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)
    else:
        inv = 1.0 / np.sqrt(state.var + state.eps)
        xhat = (flat - state.mean) * inv

        def backward(g):
            g2 = g.reshape(-1, C)
            return (g2 * (gv * inv)).reshape(xv.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    out = (xhat * gv + beta.value).reshape(xv.shape)
    return _record("batch_norm", (x, gamma, beta), out, backward)


# ---------------------------------------------------------------- eigenvectors


def jacobi_eigh(a: np.ndarray, max_sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigen-decomposition of symmetric matrices ``(..., n, n)``.

    Returns ascending eigenvalues ``(..., n)`` and eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[-1]
    lead = a.shape[:-2]
    A = a.reshape(-1, n, n).copy()
    V = np.broadcast_to(np.eye(n), A.shape).copy()
    iu = np.triu_indices(n, 1)
    scale = np.maximum(np.sqrt((A * A).sum(axis=(1, 2))), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt((A[:, iu[0], iu[1]] ** 2).sum(axis=1))
        if np.all(off <= 1e-18 * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[:, p, q]
                active = np.abs(apq) > 1e-300
                if not active.any():
                    continue
                safe = np.where(active, apq, 1.0)
                with np.errstate(over="ignore"):
                    theta = (A[:, q, q] - A[:, p, p]) / (2.0 * safe)
                # sqrt(theta^2 + 1) == |theta| in float64 once |theta| > 1e150
                big = np.abs(theta) > 1e150
                small = np.where(big, 0.0, theta)
                root = np.where(big, np.abs(theta), np.sqrt(small * small + 1.0))
                t = np.sign(theta) / (np.abs(theta) + root)
                t = np.where(theta == 0, 1.0, t)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                cp, cq = A[:, :, p].copy(), A[:, :, q].copy()
                A[:, :, p] = c * cp - s * cq
                A[:, :, q] = s * cp + c * cq
                rp, rq = A[:, p, :].copy(), A[:, q, :].copy()
                A[:, p, :] = c * rp - s * rq
                A[:, q, :] = s * rp + c * rq
                vp, vq = V[:, :, p].copy(), V[:, :, q].copy()
                V[:, :, p] = c * vp - s * vq
                V[:, :, q] = s * vp + c * vq
    evals = np.diagonal(A, axis1=1, axis2=2)
    order = np.argsort(evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return evals.reshape(*lead, n), V.reshape(*lead, n, n)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(v), axis=-1)
    pivot = np.take_along_axis(v, idx[..., None], axis=-1)
    return v * np.where(pivot < 0, -1.0, 1.0)


def smallest_eigvec(a, gap_tol: float = 1e-8, strict: bool = True):
    """Unit eigenvector of the smallest eigenvalue of symmetric ``(..., n, n)`` input.

    The sign is fixed so that the largest-magnitude entry is positive. When
    ``a`` is tracked and the gap to the next eigenvalue is below ``gap_tol``
    the eigenvector is not differentiable: with ``strict`` this raises
    :class:`DegenerateSpectrumError`; otherwise the offending matrices get
    zero gradient and ``(v, ok)`` is returned with ``ok`` a boolean mask.
    """
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("smallest_eigvec", a.shape, detail="expected square matrices")
    av = a.value
    asym = np.abs(av - np.swapaxes(av, -1, -2)).max() if av.size else 0.0
    if asym > 1e-9 * max(1.0, np.abs(av).max()):
        raise ShapeError("smallest_eigvec", a.shape, detail=f"not symmetric (max asymmetry {asym:.3g})")
    evals, evecs = jacobi_eigh(av)
    v = _fix_sign(evecs[..., :, 0])
    gap = evals[..., 1] - evals[..., 0]
    ok = gap >= gap_tol
    if a.tracked and strict and not np.all(ok):
        raise DegenerateSpectrumError(
            f"eigengap {float(np.min(gap)):.3g} below tolerance {gap_tol:g}")

    def backward(g):
        if not np.all(ok) and strict:
            raise DegenerateSpectrumError("eigengap below tolerance during backward")
        lam0 = evals[..., :1]
        denom = lam0 - evals[..., 1:]
        denom = np.where(ok[..., None], denom, -1.0)
        U = evecs[..., :, 1:]
        coef = (np.swapaxes(U, -1, -2) @ g[..., :, None])[..., 0] / denom
        dv = (U @ coef[..., :, None])[..., 0]
        dv = np.where(ok[..., None], dv, 0.0)
        G = dv[..., :, None] * v[..., None, :]
        return (0.5 * (G + np.swapaxes(G, -1, -2)),)

    out = _record("smallest_eigvec", (a,), v, backward)
    if strict:
        return out
    return out, ok


# ---------------------------------------------------------------- parameters & Adam


@dataclass
class ParameterStore:
    """Named trainable arrays, their Adam moments, and non-trainable buffers."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def watch(self, tape: Tape | None) -> dict[str, Tensor]:
        """Expose parameters as tape variables (or constants without a tape)."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.variable(v) for k, v in self.params.items()}

    def count(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    for name, g in grads.items():
        if name not in store.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != store.params[name].shape:
            raise ShapeError("adam_step", g.shape, store.params[name].shape, detail=name)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = store.m[name] = beta1 * store.m[name] + (1 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1 - beta2) * g * g
        store.params[name] = store.params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


# ---------------------------------------------------------------- gradient check


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    The error for each input is ``max|analytic - numeric| / max|numeric|``;
    the maximum over inputs is returned.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    tracked = [tape.variable(x) for x in inputs]
    out = fn(*tracked)
    grads = tape.backward(out)
    worst = 0.0
    for i, x in enumerate(inputs):
        analytic = grads[tracked[i].node_id]
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(fn(*[Tensor(u) for u in inputs]).value)
            flat[j] = orig - h
            fm = float(fn(*[Tensor(u) for u in inputs]).value)
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * h)
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max(initial=0.0) / scale))
    return worst


# ---------------------------------------------------------------- checkpoints

MAGIC = b"GLHA1"


def save_checkpoint(path, store: ParameterStore, meta: dict | None = None) -> None:
    """Write ``GLHA1`` + one-line JSON header + little-endian float64 payloads."""
    entries, payload = [], []
    for name, value in store.params.items():
        entries.append({"name": name, "shape": list(value.shape), "kind": "param",
                        "adam_step": store.step})
        payload.append(value)
    for name, st in store.bn.items():
        for part in ("mean", "var"):
            arr = getattr(st, part)
            entries.append({"name": f"{name}:{part}", "shape": list(arr.shape), "kind": "bn"})
            payload.append(arr)
    header = {"tensors": entries, "adam_step": store.step, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for arr in payload:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a GLHA1 checkpoint")
    nl = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):nl])
    offset = nl + 1
    store = ParameterStore(step=int(header["adam_step"]))
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated payload at tensor {entry['name']!r}")
        arr = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
        if entry["kind"] == "param":
            store.add(entry["name"], arr)
        else:
            layer, part = entry["name"].rsplit(":", 1)
            st = store.bn.setdefault(layer, BatchNormState.fresh(shape[0]))
            setattr(st, part, arr)
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return store, header["meta"]
