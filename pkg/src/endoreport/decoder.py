"""Autoregressive transformer decoder with causal self-attention and
cross-attention over the fused image context.

Per layer: causal self-attention -> cross-attention -> MLP, each pre-normed
with a residual connection. Token and position embeddings are learned;
input embedding and output projection are untied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .fusion import FusedContext
from .tensor import ParamStore, Tensor


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    d_encoder: int = 128
    max_seq_len: int = 256
    vocab_size: int = 512
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be at least 2")


PAPER_DECODER_LAYERS = 6
PAPER_DECODER_HEADS = 6


@dataclass
class DecoderOutput:
    logits: Tensor                        # [T, vocab_size]
    attention_trace: list[Tensor] | None  # per layer: cross weights [H, T, ctx]


def causal_mask(t: int) -> np.ndarray:
    if t < 1:
        raise ValueError("sequence length must be >= 1")
    return np.tril(np.ones((t, t), dtype=bool))


def init_decoder_params(params: ParamStore, cfg: DecoderConfig, rng: np.random.Generator,
                        prefix: str = "dec") -> None:
    params.add(f"{prefix}.tok", nn.trunc_normal(rng, (cfg.vocab_size, cfg.d_model)))
    params.add(f"{prefix}.pos", nn.trunc_normal(rng, (cfg.max_seq_len, cfg.d_model)))
    for i in range(cfg.layers):
        blk = f"{prefix}.blk{i}"
        nn.add_layer_norm(params, f"{blk}.ln1", cfg.d_model)
        nn.add_attention(params, rng, f"{blk}.self", cfg.d_model, cfg.d_model)
        nn.add_layer_norm(params, f"{blk}.ln2", cfg.d_model)
        nn.add_attention(params, rng, f"{blk}.cross", cfg.d_model, cfg.d_encoder)
        nn.add_layer_norm(params, f"{blk}.ln3", cfg.d_model)
        nn.add_mlp(params, rng, f"{blk}.mlp", cfg.d_model, cfg.mlp_ratio)
    nn.add_layer_norm(params, f"{prefix}.lnf", cfg.d_model)
    nn.add_linear(params, rng, f"{prefix}.out", cfg.d_model, cfg.vocab_size)


def decoder_forward(tokens, context: FusedContext, params: ParamStore, cfg: DecoderConfig,
                    want_trace: bool = False, prefix: str = "dec") -> DecoderOutput:
    ids = np.asarray(list(tokens), dtype=np.int64)
    t = len(ids)
    if t == 0:
        raise ValueError("empty token sequence")
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if context.memory.shape[0] != context.valid.shape[0]:
        raise ValueError("context memory/valid size mismatch")
    self_mask = causal_mask(t)
    cross_mask = np.broadcast_to(context.valid, (t, context.valid.shape[0]))
    x = T.take_rows(params[f"{prefix}.tok"], ids) + T.slice_rows(params[f"{prefix}.pos"], 0, t)
    trace: list[Tensor] | None = [] if want_trace else None
    for i in range(cfg.layers):
        blk = f"{prefix}.blk{i}"
        h = nn.ln(params, f"{blk}.ln1", x)
        att, _ = nn.attention(params, f"{blk}.self", h, h, cfg.heads, self_mask)
        x = x + att
        h = nn.ln(params, f"{blk}.ln2", x)
        att, w = nn.attention(params, f"{blk}.cross", h, context.memory, cfg.heads,
                              cross_mask, want_weights=want_trace)
        x = x + att
        if want_trace:
            trace.append(w)
        x = x + nn.mlp(params, f"{blk}.mlp", nn.ln(params, f"{blk}.ln3", x))
    logits = nn.linear(params, f"{prefix}.out", nn.ln(params, f"{prefix}.lnf", x))
    return DecoderOutput(logits, trace)
