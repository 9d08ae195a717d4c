"""Minimal reverse-mode automatic differentiation over numpy arrays.

A deliberately small tape-based engine: `Tensor` wraps a float64 ndarray and
records a vector-Jacobian callback per operation. It implements exactly the
operations the equivariant stack needs (broadcast arithmetic, two-operand
einsum, reductions, slicing/concat, edge padding, repeat, sigmoid/softmax)
and nothing else. Gradients are checked against central finite differences
in the test suite.

All operations are pure: they never mutate operands, so graphs can be built
concurrently from shared parameter tensors. Gradient accumulation happens
only inside `Tensor.backward`, which each caller runs on its own graph.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (thread-local)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    # -- introspection ----------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic dunders -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(astensor(other), -1.0))

    def __rsub__(self, other):
        return add(astensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and
                       isinstance(shape[0], (tuple, list)) else shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          vjps: Sequence[Callable[[np.ndarray], np.ndarray]]) -> Tensor:
    out = Tensor(data)
    if grad_enabled():
        live = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
        if live:
            out.requires_grad = True
            out._parents = tuple(p for p, _ in live)
            out._vjps = tuple(v for _, v in live)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient g down to `shape` (the operand's pre-broadcast shape)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(a.data * b.data, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.shape),
                  lambda g: _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(a.data / b.data, (a, b),
                 (lambda g: _unbroadcast(g / b.data, a.shape),
                  lambda g: _unbroadcast(-g * a.data / (b.data * b.data),
                                         b.shape)))


def power(a, exponent: float) -> Tensor:
    a = astensor(a)
    e = float(exponent)
    return _make(a.data ** e, (a,),
                 (lambda g: g * e * a.data ** (e - 1.0),))


def exp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = astensor(a)
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = astensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), (lambda g: g * 0.5 / out,))


def sin(a) -> Tensor:
    a = astensor(a)
    return _make(np.sin(a.data), (a,), (lambda g: g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = astensor(a)
    return _make(np.cos(a.data), (a,), (lambda g: -g * np.sin(a.data),))


def sigmoid(a) -> Tensor:
    a = astensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = astensor(a)
    return mul(a, sigmoid(a))


def tanh(a) -> Tensor:
    a = astensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max(a, floor) for a scalar floor; zero gradient below it."""
    a = astensor(a)
    mask = a.data > floor
    return _make(np.maximum(a.data, floor), (a,), (lambda g: g * mask,))


# -- contractions ----------------------------------------------------------

def _parse_einsum(spec: str) -> tuple[str, str, str]:
    lhs, out = spec.split("->")
    sa, sb = lhs.split(",")
    for s in (sa, sb, out):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index within one operand: {spec!r}")
        if "." in s:
            raise ValueError("ellipsis not supported; spell out the axes")
    if not set(out) <= set(sa) | set(sb):
        raise ValueError(f"output index missing from inputs: {spec!r}")
    if not set(sa) <= set(out) | set(sb):
        raise ValueError(f"index summed only over operand a: {spec!r}")
    if not set(sb) <= set(out) | set(sa):
        raise ValueError(f"index summed only over operand b: {spec!r}")
    return sa, sb, out


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum without ellipsis or repeated in-operand indices."""
    a, b = astensor(a), astensor(b)
    sa, sb, out = _parse_einsum(spec)
    data = np.einsum(spec, a.data, b.data)
    return _make(
        data, (a, b),
        (lambda g: np.einsum(f"{out},{sb}->{sa}", g, b.data),
         lambda g: np.einsum(f"{out},{sa}->{sb}", g, a.data)))


# -- reductions ------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy() if np.ndim(g) == 0 \
                else np.full(a.shape, g.reshape(()))
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, a.shape)

    return _make(data, (a,), (vjp,))


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = astensor(a)
    return _make(a.data.reshape(shape), (a,),
                 (lambda g: g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = astensor(a)
    return _make(a.data.swapaxes(ax1, ax2), (a,),
                 (lambda g: g.swapaxes(ax1, ax2),))


def getitem(a, idx) -> Tensor:
    a = astensor(a)

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return out

    return _make(a.data[idx], (a,), (vjp,))


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = [astensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return vjp

    return _make(data, tuple(parts),
                 tuple(make_vjp(i) for i in range(len(parts))))


def repeat(a, reps: int, axis: int) -> Tensor:
    """Repeat each element `reps` times along `axis` (nearest upsampling)."""
    a = astensor(a)
    data = np.repeat(a.data, reps, axis=axis)

    def vjp(g):
        shape = list(a.shape)
        shape[axis:axis + 1] = [a.shape[axis], reps]
        return g.reshape(shape).sum(axis=axis + 1)

    return _make(data, (a,), (vjp,))


def pad_axis(a, axis: int, before: int, after: int, mode: str) -> Tensor:
    """Pad one axis with 'edge' (replicate) or 'zero' values."""
    a = astensor(a)
    if mode not in ("edge", "zero"):
        raise ValueError(f"unknown padding mode {mode!r}")
    width = [(0, 0)] * a.ndim
    width[axis] = (before, after)
    data = np.pad(a.data, width, mode="edge" if mode == "edge" else "constant")

    def _sl(lo, hi):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, hi)
        return tuple(sl)

    def vjp(g):
        n = a.shape[axis]
        core = g[_sl(before, before + n)].copy()
        if mode == "edge":
            if before:
                first = [slice(None)] * a.ndim
                first[axis] = slice(0, 1)
                core[tuple(first)] += g[_sl(0, before)].sum(axis=axis,
                                                            keepdims=True)
            if after:
                last = [slice(None)] * a.ndim
                last[axis] = slice(n - 1, n)
                core[tuple(last)] += g[_sl(before + n, before + n + after)] \
                    .sum(axis=axis, keepdims=True)
        return core

    return _make(data, (a,), (vjp,))


def softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    shift = astensor(a.data.max(axis=axis, keepdims=True))  # constant
    e = exp(a - shift)
    return div(e, tsum(e, axis=axis, keepdims=True))
