"""Dense tensor math with reverse-mode autodiff.

Everything is numpy under the hood. A Tensor wraps an ndarray and, when it
participates in a differentiable graph, remembers its parents and a closure
that routes the incoming gradient backwards. Gradients are accumulated by
`backward()` via a topological sort of the recorded graph.

Only f32 and f64 are supported; f64 is the verification dtype (gradient
checks, bitwise invariance tests), f32 the training dtype.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.float32, "f64": np.float64}

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def np_dtype(dtype: str) -> np.dtype:
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r} (want 'f32' or 'f64')")
    return np.dtype(DTYPES[dtype])


class Tensor:
    """A node in the computation graph.

    `data` is a row-major numpy array of f32 or f64. `requires_grad` marks
    leaves that should receive gradients (parameters). Non-leaf tensors get
    gradients whenever any ancestor requires them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, dtype: str | None = None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(np_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    def item(self) -> float:
        return float(self.data)

    def _needs_grad(self) -> bool:
        return self.requires_grad or self._backward is not None

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode accumulation from this (scalar) node."""
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss node")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.add_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not node.requires_grad:
                    # intermediate grads are dead once propagated
                    node.grad = None

    # Operator sugar; the real work lives in the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, mul_scalar(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def _as_tensor(x, dtype: str) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p._needs_grad() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        if a._needs_grad():
            a.add_grad(_unbroadcast(g, a.shape))
        if b._needs_grad():
            b.add_grad(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        if a._needs_grad():
            a.add_grad(_unbroadcast(g * b.data, a.shape))
        if b._needs_grad():
            b.add_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        if a._needs_grad():
            a.add_grad(g * s)

    return _make(a.data * a.data.dtype.type(s), (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) operands like np.matmul."""
    out_data = a.data @ b.data

    def bwd(g):
        if a._needs_grad():
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.add_grad(_unbroadcast(ga, a.shape))
        if b._needs_grad():
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.add_grad(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        if a._needs_grad():
            a.add_grad(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bwd(g):
        if a._needs_grad():
            a.add_grad(np.swapaxes(g, ax1, ax2))

    return _make(np.swapaxes(a.data, ax1, ax2).copy(), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t._needs_grad():
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                t.add_grad(g[tuple(idx)])
            offset += n

    return _make(out_data, tuple(tensors), bwd)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather (embedding lookup). Duplicate indices accumulate."""
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def bwd(g):
        if a._needs_grad():
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a.add_grad(ga)

    return _make(out_data, (a,), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        if a._needs_grad():
            ga = np.zeros_like(a.data)
            ga[start:stop] = g
            a.add_grad(ga)

    return _make(a.data[start:stop].copy(), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        if a._needs_grad():
            a.add_grad(np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(a.data.sum()), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        if a._needs_grad():
            a.add_grad(np.broadcast_to(g / n, a.shape).astype(a.data.dtype))

    return _make(np.asarray(a.data.mean()), (a,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-form GELU: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def bwd(g):
        if x._needs_grad():
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
            x.add_grad(g * (cdf + x.data * pdf))

    return _make(out_data.astype(x.data.dtype), (x,), bwd)


def softmax_masked(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax along the last axis restricted to positions where mask is True.

    Masked positions get weight exactly 0, so masked values can never leak
    into anything downstream. A fully masked row is an error.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not m.any(axis=-1).all():
        raise ValueError("degenerate attention row: all positions masked")
    x = logits.data
    neg = np.where(m, x, -np.inf)
    xmax = neg.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(np.where(m, x, xmax) - xmax), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    probs = (e / denom).astype(x.dtype)

    def bwd(g):
        if logits._needs_grad():
            dot = (g * probs).sum(axis=-1, keepdims=True)
            logits.add_grad(probs * (g - dot))

    return _make(probs, (logits,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Last-axis layer normalization with learned gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last-axis extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = (xhat * gain.data + bias.data).astype(x.data.dtype)

    def bwd(g):
        if bias._needs_grad():
            bias.add_grad(g.reshape(-1, d).sum(axis=0))
        if gain._needs_grad():
            gain.add_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if x._needs_grad():
            gx = g * gain.data
            t1 = gx.mean(axis=-1, keepdims=True)
            t2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x.add_grad((inv * (gx - t1 - xhat * t2)).astype(x.data.dtype))

    return _make(out_data, (x, gain, bias), bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of `targets` under softmax(logits).

    logits is [T, V]; targets is a length-T sequence of ids in [0, V).
    """
    ids = np.asarray(list(targets), dtype=np.int64)
    T, V = logits.shape
    if len(ids) != T:
        raise ValueError(f"targets length {len(ids)} != logit rows {T}")
    if len(ids) and (ids.min() < 0 or ids.max() >= V):
        raise ValueError("target id out of range")
    x = logits.data
    xmax = x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x - xmax).sum(axis=-1, keepdims=True)) + xmax
    nll = lse[:, 0] - x[np.arange(T), ids]
    out_data = np.asarray(nll.mean())

    def bwd(g):
        if logits._needs_grad():
            probs = np.exp(x - lse)
            probs[np.arange(T), ids] -= 1.0
            logits.add_grad((g / T) * probs)

    return _make(out_data, (logits,), bwd)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Named parameter tensors with deterministic (lexicographic) iteration."""

    def __init__(self, dtype: str = "f32"):
        self.dtype = dtype
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(data), dtype=self.dtype, requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._entries[name]

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def n_scalars(self) -> int:
        return sum(t.data.size for _, t in self.items())

    def astype(self, dtype: str) -> "ParamStore":
        out = ParamStore(dtype)
        for name, t in self.items():
            out.add(name, t.data.astype(np_dtype(dtype)))
        return out


def grad_check(
    forward_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    sample_count: int = 200,
    seed: int = 0,
) -> float:
    """Compare analytic grads against central finite differences.

    Samples `sample_count` coordinates spread over every parameter tensor
    (at least one per tensor) and returns the max relative error, defined as
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6). The floor keeps
    coordinates whose true gradient sits below the finite-difference noise
    floor (~1e-11 for an O(1) loss at h=1e-5) from reporting spurious error.
    Requires f64 parameters; f32 round-off would drown the comparison.
    """
    if params.dtype != "f64":
        raise ValueError("grad_check requires f64 parameters")
    params.zero_grads()
    loss = forward_fn(params)
    if not np.isfinite(loss.data):
        raise ValueError("non-finite loss in grad_check")
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}

    rng = np.random.default_rng(seed)
    names = params.names()
    coords: list[tuple[str, tuple[int, ...]]] = []
    for name in names:
        shape = params[name].shape
        flat = rng.integers(0, max(1, int(np.prod(shape))) if shape else 1)
        coords.append((name, np.unravel_index(int(flat), shape) if shape else ()))
    while len(coords) < sample_count:
        name = names[int(rng.integers(0, len(names)))]
        shape = params[name].shape
        flat = int(rng.integers(0, max(1, int(np.prod(shape))) if shape else 1))
        coords.append((name, np.unravel_index(flat, shape) if shape else ()))

    max_rel = 0.0
    for name, idx in coords:
        t = params[name]
        orig = t.data[idx]
        t.data[idx] = orig + h
        f_plus = forward_fn(params).item()
        t.data[idx] = orig - h
        f_minus = forward_fn(params).item()
        t.data[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError("non-finite loss in grad_check")
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic[name][idx]
        denom = max(abs(a), abs(numeric), 1e-6)
        max_rel = max(max_rel, abs(a - numeric) / denom)
    return max_rel
