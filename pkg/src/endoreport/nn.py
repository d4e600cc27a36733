"""Shared transformer building blocks: attention, MLP, parameter init."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Truncated normal at +-2 std, the usual ViT projection init."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def add_linear(params: ParamStore, rng: np.random.Generator, name: str, d_in: int, d_out: int):
    params.add(f"{name}.w", trunc_normal(rng, (d_in, d_out)))
    params.add(f"{name}.b", np.zeros(d_out))


def add_layer_norm(params: ParamStore, name: str, d: int):
    params.add(f"{name}.g", np.ones(d))
    params.add(f"{name}.b", np.zeros(d))


def linear(params: ParamStore, name: str, x: Tensor) -> Tensor:
    return T.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def ln(params: ParamStore, name: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    t, d = x.shape
    return T.swapaxes(T.reshape(x, (t, heads, d // heads)), 0, 1)  # [H, T, dh]


def _merge_heads(x: Tensor) -> Tensor:
    h, t, dh = x.shape
    return T.reshape(T.swapaxes(x, 0, 1), (t, h * dh))


def attention(params: ParamStore, name: str, q_in: Tensor, kv_in: Tensor, heads: int,
              mask: np.ndarray, want_weights: bool = False):
    """Multi-head attention of q_in over kv_in.

    mask is boolean [Tq, Tk] (True = attend); broadcast over heads. Returns
    the output and, when asked, the raw per-head weights [H, Tq, Tk].
    """
    d = q_in.shape[-1]
    dh = d // heads
    q = _split_heads(linear(params, f"{name}.q", q_in), heads)
    k = _split_heads(linear(params, f"{name}.k", kv_in), heads)
    v = _split_heads(linear(params, f"{name}.v", kv_in), heads)
    scores = T.matmul(q, T.swapaxes(k, 1, 2)) * (1.0 / math.sqrt(dh))
    weights = T.softmax_masked(scores, mask[None, :, :])
    out = linear(params, f"{name}.o", _merge_heads(T.matmul(weights, v)))
    return (out, weights) if want_weights else (out, None)


def add_attention(params: ParamStore, rng: np.random.Generator, name: str, d_q: int, d_kv: int):
    add_linear(params, rng, f"{name}.q", d_q, d_q)
    add_linear(params, rng, f"{name}.k", d_kv, d_q)
    add_linear(params, rng, f"{name}.v", d_kv, d_q)
    add_linear(params, rng, f"{name}.o", d_q, d_q)


def mlp(params: ParamStore, name: str, x: Tensor) -> Tensor:
    return linear(params, f"{name}.fc2", T.gelu(linear(params, f"{name}.fc1", x)))


def add_mlp(params: ParamStore, rng: np.random.Generator, name: str, d: int, ratio: int):
    add_linear(params, rng, f"{name}.fc1", d, d * ratio)
    add_linear(params, rng, f"{name}.fc2", d * ratio, d)
