"""Full encoder-decoder model: parameter init and per-sample loss graphs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import decoder as dec
from . import fusion, vision
from . import tensor as T
from .decoder import DecoderConfig, DecoderOutput
from .tensor import ParamStore, Tensor
from .tokenizer import TokenizerModel
from .vision import EncoderConfig, ImageTensor


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig
    max_images: int = fusion.MAX_IMAGES


def desk_config(vocab_size: int, max_seq_len: int = 256,
                enc: EncoderConfig | None = None,
                dec_layers: int = 4, dec_heads: int = 4) -> ModelConfig:
    e = enc or EncoderConfig()
    d = DecoderConfig(layers=dec_layers, heads=dec_heads, d_model=e.d_model,
                      d_encoder=e.d_model, max_seq_len=max_seq_len, vocab_size=vocab_size)
    return ModelConfig(e, d)


def init_params(cfg: ModelConfig, seed: int, dtype: str = "f32") -> ParamStore:
    rng = np.random.default_rng(seed)
    params = ParamStore(dtype)
    vision.init_encoder_params(params, cfg.encoder, rng)
    dec.init_decoder_params(params, cfg.decoder, rng)
    fusion.init_temporal_params(params, cfg.encoder.d_model, rng, cfg.max_images)
    return params


def lm_loss(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over the predicted positions (tokens plus EOS)."""
    ids = list(targets)
    if logits.shape[0] != len(ids):
        raise ValueError(f"{logits.shape[0]} logit rows vs {len(ids)} targets")
    return T.cross_entropy(logits, ids)


def caption_context(img: ImageTensor, params: ParamStore, cfg: ModelConfig) -> fusion.FusedContext:
    return fusion.single_image_context(vision.encode_image(img, params, cfg.encoder))


def findings_context(images: list[ImageTensor], params: ParamStore,
                     cfg: ModelConfig) -> fusion.FusedContext:
    zs = [vision.encode_image(im, params, cfg.encoder) for im in images]
    return fusion.assemble_context(zs, params, cfg.max_images)


def sample_loss(images: list[ImageTensor], token_ids: list[int], params: ParamStore,
                cfg: ModelConfig, stage: int) -> Tensor:
    """Loss for one sample. token_ids is the BOS...EOS wrapped sequence:
    inputs are ids[:-1], targets are ids[1:] (BOS never predicted, EOS always).
    """
    if len(token_ids) < 2:
        raise ValueError("need at least BOS and EOS")
    if stage == 1:
        ctx = caption_context(images[0], params, cfg)
    else:
        ctx = findings_context(images, params, cfg)
    out = dec.decoder_forward(token_ids[:-1], ctx, params, cfg.decoder)
    return lm_loss(out.logits, token_ids[1:])


def wrap_tokens(tok: TokenizerModel, text: str, max_seq_len: int) -> list[int]:
    from . import tokenizer as tk
    ids = tk.encode(tok, text, wrap=True).ids
    if len(ids) > max_seq_len + 1:
        # keep inputs within max_seq_len; EOS stays as the final target
        ids = ids[:max_seq_len] + [tok.eos]
    return ids
