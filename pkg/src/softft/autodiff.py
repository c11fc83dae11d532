"""A small tape-based reverse-mode differentiation engine on float64 arrays.

Operations executed inside an active :class:`Graph` are recorded on its tape
when at least one input needs a gradient.  :func:`backward` replays the tape
in reverse and accumulates into the ``grad`` buffers of leaf tensors created
with ``track_grad=True``.  Outside a graph the same functions simply compute
values, which is how evaluation passes run.

    >>> w = Tensor([[2.0]], track_grad=True)
    >>> with Graph() as g:
    ...     loss = sum_all(matmul(w, Tensor([[3.0]])))
    >>> backward(loss, g)
    >>> w.grad
    array([[3.]])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "matmul",
    "add",
    "mul",
    "scale",
    "reshape",
    "sum_all",
    "relu",
    "conv2d",
    "softmax_cross_entropy",
    "finite_diff_check",
]


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("values", "grad", "track_grad", "_produced")

    def __init__(self, values, track_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.track_grad = track_grad
        self.grad = np.zeros_like(self.values) if track_grad else None
        # set when the tensor is the output of a recorded operation
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def needs_grad(self) -> bool:
        return self.track_grad or self._produced

    def zero_grad(self) -> None:
        if self.track_grad:
            self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, track_grad={self.track_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "adjoint")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], adjoint: Callable):
        self.out = out
        self.inputs = inputs
        self.adjoint = adjoint


_active: list["Graph"] = []


class Graph:
    """Ordered tape of executed operations.

    Use as a context manager; operations run inside the ``with`` block are
    recorded.  A graph may be replayed by :func:`backward` more than once.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Graph":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.pop()

    def __len__(self) -> int:
        return len(self.records)


def _emit(values: np.ndarray, inputs: tuple[Tensor, ...], adjoint: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.track_grad = False
    out.grad = None
    out._produced = False
    if _active and any(t.needs_grad for t in inputs):
        out._produced = True
        _active[-1].records.append(_Record(out, inputs, adjoint))
    return out


def backward(loss: Tensor, graph: Graph) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf reachable on ``graph``."""
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._produced:
        if loss.track_grad:
            loss.grad += 1.0
        return
    adjoints = {id(loss): np.ones_like(loss.values)}
    for rec in reversed(graph.records):
        g = adjoints.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.adjoint(g)):
            if gi is None or not inp.needs_grad:
                continue
            if inp._produced:
                key = id(inp)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
            else:
                inp.grad += gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def adjoint(g):
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, (a, b), adjoint)


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError as exc:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def adjoint(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit(out, (a, b), adjoint)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.values, b.values

    def adjoint(g):
        return g * bv, g * av

    return _emit(av * bv, (a, b), adjoint)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (no gradient flows to ``c``)."""
    c = float(c)

    def adjoint(g):
        return (c * g,)

    return _emit(c * a.values, (a,), adjoint)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc

    def adjoint(g):
        return (g.reshape(src),)

    return _emit(out, (a,), adjoint)


def sum_all(a: Tensor) -> Tensor:
    src = a.shape

    def adjoint(g):
        return (np.broadcast_to(g, src).copy(),)

    return _emit(np.array(a.values.sum()), (a,), adjoint)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.values > 0

    def adjoint(g):
        return (g * mask,)

    return _emit(np.where(mask, x.values, 0.0), (x,), adjoint)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``x`` (C×H×W or B×C×H×W) with O×C×kh×kw kernels."""
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    xv, kv = x.values, kernels.values
    batched = xv.ndim == 4
    if not batched:
        if xv.ndim != 3:
            raise DimensionError(f"conv2d input must be C×H×W or B×C×H×W, got {xv.shape}")
        xv = xv[None]
    if kv.ndim != 4:
        raise DimensionError(f"conv2d kernels must be O×C×kh×kw, got {kv.shape}")
    B, C, H, W = xv.shape
    O, Ck, kh, kw = kv.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if kh > H or kw > W:
        raise DimensionError(f"conv2d kernel {kh}×{kw} larger than input {H}×{W}")
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    cols = sliding_window_view(xv, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: B×C×Ho×Wo×kh×kw
    out = np.tensordot(cols, kv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def adjoint(g):
        gb = g if batched else g[None]
        gk = np.tensordot(gb, cols, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.zeros((B, C, H, W))
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(gb, kv[:, :, i, j], axes=([1], [0]))  # B×Ho×Wo×C
                gx[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        return (gx if batched else gx[0]), gk

    return _emit(out if batched else out[0], (x, kernels), adjoint)


def softmax_cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against label-smoothed one-hot targets.

    The true class receives ``1 - eps + eps/K`` and every other class
    ``eps/K``.
    """
    z = logits.values
    if z.ndim != 2:
        raise DimensionError(f"logits must be B×K, got {z.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"smoothing must lie in [0, 1), got {smoothing}")
    B, K = z.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != B:
        raise DimensionError(f"{labels.shape[0]} labels for {B} logit rows")
    if B and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"label out of range [0, {K})")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.full((B, K), smoothing / K)
    target[np.arange(B), labels] += 1.0 - smoothing
    loss = -(target * logp).sum() / B

    def adjoint(g):
        return (g * (np.exp(logp) - target) / B,)

    return _emit(np.array(loss), (logits,), adjoint)


def finite_diff_check(f: Callable, theta, h: float = 1e-5) -> float:
    """Max relative error between backprop and central-difference gradients.

    ``theta`` is a tracked Tensor or a sequence of them; ``f(theta)`` must
    return a scalar Tensor.  The error per coordinate is
    ``|analytic - central| / max(1, |central|)``.
    """
    params = [theta] if isinstance(theta, Tensor) else list(theta)
    saved = [(p.track_grad, p.grad) for p in params]
    for p in params:
        p.track_grad = True
        p.grad = np.zeros_like(p.values)
    try:
        with Graph() as g:
            loss = f(theta)
        backward(loss, g)
        analytic = [p.grad.copy() for p in params]
        worst = 0.0
        for p, ga in zip(params, analytic):
            flat = p.values.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f(theta).item()
                flat[i] = orig - h
                down = f(theta).item()
                flat[i] = orig
                central = (up - down) / (2.0 * h)
                err = abs(gflat[i] - central) / max(1.0, abs(central))
                worst = max(worst, err)
        return float(worst)
    finally:
        for p, (tg, gr) in zip(params, saved):
            p.track_grad = tg
            p.grad = gr
