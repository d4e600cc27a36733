"""Greedy decoding and cross-attention grounding extraction.

Grounding follows the last decoder layer's cross-attention: average over
heads first, renormalize over the valid context positions, then reshape per
image slot into the patch grid. One AttentionMap per generated token.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import decoder as dec
from . import tokenizer as tk
from .decoder import DecoderConfig
from .fusion import FusedContext
from .tensor import ParamStore
from .vision import IMAGENET_MEAN, IMAGENET_STD, ImageTensor


@dataclass
class AttentionMap:
    token_index: int
    token_string: str
    weights: np.ndarray  # [n_slots, grid, grid]; dummy-slot planes all zero


@dataclass
class GenerationResult:
    ids: tk.TokenSequence
    text: str
    attention: list[AttentionMap] | None
    stop_reason: str  # "eos" | "max_len"


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean()
    var = x.var()
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


class IncrementalDecoder:
    """KV-cached single-token decoder forward for generation.

    Computes the same function as decoder_forward but in O(1) work per new
    token: self-attention keys/values are cached per layer, and the
    cross-attention keys/values over the (fixed) valid context rows are
    precomputed once. Inference only; no gradients.
    """

    def __init__(self, context: FusedContext, params: ParamStore, cfg: DecoderConfig,
                 prefix: str = "dec"):
        self.cfg = cfg
        self.heads = cfg.heads
        self.dh = cfg.d_model // cfg.heads
        self.t = 0
        w = lambda n: params[f"{prefix}.{n}.w"].data
        b = lambda n: params[f"{prefix}.{n}.b"].data
        g = lambda n: params[f"{prefix}.{n}.g"].data
        self.tok_emb = params[f"{prefix}.tok"].data
        self.pos_emb = params[f"{prefix}.pos"].data
        self.lnf = (g("lnf"), b("lnf"))
        self.out = (w("out"), b("out"))
        mem = context.memory.data[context.valid]
        h, dh = self.heads, self.dh
        self.layers = []
        for i in range(cfg.layers):
            blk = f"blk{i}"
            lay = {
                "ln1": (g(f"{blk}.ln1"), b(f"{blk}.ln1")),
                "ln2": (g(f"{blk}.ln2"), b(f"{blk}.ln2")),
                "ln3": (g(f"{blk}.ln3"), b(f"{blk}.ln3")),
                "self.q": (w(f"{blk}.self.q"), b(f"{blk}.self.q")),
                "self.k": (w(f"{blk}.self.k"), b(f"{blk}.self.k")),
                "self.v": (w(f"{blk}.self.v"), b(f"{blk}.self.v")),
                "self.o": (w(f"{blk}.self.o"), b(f"{blk}.self.o")),
                "cross.q": (w(f"{blk}.cross.q"), b(f"{blk}.cross.q")),
                "cross.o": (w(f"{blk}.cross.o"), b(f"{blk}.cross.o")),
                "fc1": (w(f"{blk}.mlp.fc1"), b(f"{blk}.mlp.fc1")),
                "fc2": (w(f"{blk}.mlp.fc2"), b(f"{blk}.mlp.fc2")),
            }
            kc = (mem @ w(f"{blk}.cross.k") + b(f"{blk}.cross.k"))
            vc = (mem @ w(f"{blk}.cross.v") + b(f"{blk}.cross.v"))
            lay["cross.k"] = kc.reshape(-1, h, dh).transpose(1, 0, 2)  # [H, n, dh]
            lay["cross.v"] = vc.reshape(-1, h, dh).transpose(1, 0, 2)
            lay["k_cache"] = np.empty((h, cfg.max_seq_len, dh), dtype=mem.dtype)
            lay["v_cache"] = np.empty((h, cfg.max_seq_len, dh), dtype=mem.dtype)
            self.layers.append(lay)

    def _attend(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        # q [H, dh], k/v [H, n, dh] -> [H * dh]
        scores = np.einsum("hd,hnd->hn", q, k) / np.sqrt(self.dh)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        wts = e / e.sum(axis=-1, keepdims=True)
        return np.einsum("hn,hnd->hd", wts, v).reshape(-1)

    def step(self, token_id: int) -> np.ndarray:
        """Feed one token, get the next-token logits row."""
        t = self.t
        if t >= self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t + 1} exceeds max_seq_len "
                             f"{self.cfg.max_seq_len}")
        h, dh = self.heads, self.dh
        x = self.tok_emb[token_id] + self.pos_emb[t]
        for lay in self.layers:
            z = _ln(x, *lay["ln1"])
            q = (z @ lay["self.q"][0] + lay["self.q"][1]).reshape(h, dh)
            lay["k_cache"][:, t] = (z @ lay["self.k"][0] + lay["self.k"][1]).reshape(h, dh)
            lay["v_cache"][:, t] = (z @ lay["self.v"][0] + lay["self.v"][1]).reshape(h, dh)
            att = self._attend(q, lay["k_cache"][:, :t + 1], lay["v_cache"][:, :t + 1])
            x = x + att @ lay["self.o"][0] + lay["self.o"][1]
            z = _ln(x, *lay["ln2"])
            q = (z @ lay["cross.q"][0] + lay["cross.q"][1]).reshape(h, dh)
            att = self._attend(q, lay["cross.k"], lay["cross.v"])
            x = x + att @ lay["cross.o"][0] + lay["cross.o"][1]
            z = _ln(x, *lay["ln3"])
            x = x + _gelu(z @ lay["fc1"][0] + lay["fc1"][1]) @ lay["fc2"][0] + lay["fc2"][1]
        self.t = t + 1
        return _ln(x, *self.lnf) @ self.out[0] + self.out[1]


def greedy_generate(context: FusedContext, params: ParamStore, cfg: DecoderConfig,
                    tok: tk.TokenizerModel, max_len: int,
                    want_attention: bool = False) -> GenerationResult:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if context.memory.shape[0] != context.valid.shape[0]:
        raise ValueError("invalid context")
    ids: list[int] = [tok.bos]
    stop_reason = "max_len"
    inc = IncrementalDecoder(context, params, cfg)
    for _ in range(max_len):
        logits = inc.step(ids[-1])
        nxt = int(np.argmax(logits))  # np.argmax takes the lowest index on ties
        if nxt == tok.bos:
            # BOS can never appear inside a generated sequence; take the runner-up
            order = np.argsort(logits, kind="stable")[::-1]
            nxt = int(order[1]) if int(order[0]) == tok.bos else int(order[0])
        if nxt == tok.eos:
            stop_reason = "eos"
            break
        ids.append(nxt)
    gen = tk.TokenSequence(ids[1:])
    attention = None
    if want_attention:
        # one more forward over the final sequence to get a trace per token
        if len(gen) > 0:
            out = dec.decoder_forward([tok.bos] + gen.ids, context, params, cfg, want_trace=True)
            attention = extract_grounding(out.attention_trace, context, gen, tok)
        else:
            attention = []
    return GenerationResult(gen, tk.decode(tok, gen, errors="replace"), attention, stop_reason)


def extract_grounding(trace: list, fused: FusedContext, gen: tk.TokenSequence,
                      tok: tk.TokenizerModel) -> list[AttentionMap]:
    """AttentionMaps from the final layer of a recorded cross-attention trace.

    Row t of the trace attends while predicting token t+1; the map assigned
    to generated token i is the one computed from the position where that
    token was emitted.
    """
    if not trace:
        raise ValueError("missing attention trace (rerun with want_trace)")
    last = trace[-1].data          # [H, T, ctx]
    mean = last.mean(axis=0)       # [T, ctx]
    n_ctx = fused.n_slots * fused.n_patches
    grid = int(round(fused.n_patches ** 0.5))
    maps = []
    for i, token_id in enumerate(gen.ids):
        row = mean[i] * fused.valid
        s = row.sum()
        if s <= 0:
            raise ValueError("attention row has no mass on valid positions")
        row = row / s
        w = row.reshape(fused.n_slots, grid, grid)
        maps.append(AttentionMap(i, tk.decode(tok, tk.TokenSequence([token_id]), errors="replace"), w))
    assert all(m.weights.size == n_ctx for m in maps)
    return maps


def denormalize(img: ImageTensor) -> np.ndarray:
    """Undo ImageNet normalization back to uint8 for overlays."""
    x = img.pixels * np.asarray(IMAGENET_STD) + np.asarray(IMAGENET_MEAN)
    return np.clip(x * 255.0, 0, 255).astype(np.uint8)


def _sanitize(token: str) -> str:
    s = re.sub(r"[^A-Za-z0-9_-]", "_", token)
    return s or "_"


def render_heatmap(amap: AttentionMap, base: ImageTensor, out_dir, slot: int = 0,
                   alpha: float = 0.55) -> tuple[str, str]:
    """Write one overlay PNG + sidecar grid text for an image slot.

    Weights are nearest-neighbor upsampled, mapped min->max onto a linear
    yellow ramp and alpha-blended over the base image.
    """
    grid = amap.weights.shape[1]
    h = base.pixels.shape[0]
    if h % grid != 0:
        raise ValueError("grid does not divide the base image size")
    w = amap.weights[slot]
    scale = h // grid
    up = np.repeat(np.repeat(w, scale, axis=0), scale, axis=1)
    lo, hi = up.min(), up.max()
    norm = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    heat = np.stack([norm * 255, norm * 255, np.zeros_like(norm)], axis=-1)
    img = denormalize(base).astype(np.float64)
    blend = ((1 - alpha * norm[..., None]) * img + alpha * norm[..., None] * heat)
    blend = np.clip(blend, 0, 255).astype(np.uint8)
    stem = f"tok{amap.token_index:03d}_{_sanitize(amap.token_string)}_img{slot}"
    png_path = os.path.join(out_dir, stem + ".png")
    txt_path = os.path.join(out_dir, stem + ".txt")
    Image.fromarray(blend).save(png_path, format="PNG")
    with open(txt_path, "w", encoding="utf-8") as f:
        for row in w:
            f.write(" ".join(f"{v:.8f}" for v in row) + "\n")
    return png_path, txt_path


def read_heatmap_sidecar(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        return np.asarray([[float(v) for v in line.split()] for line in f if line.strip()])
