"""Patch-based transformer encoder: image in, per-patch latent vectors out.

Pre-norm residual blocks (norm -> attention -> residual; norm -> MLP ->
residual) with learned absolute position embeddings per patch index and a
final normalization layer before the output is handed to cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import nn
from . import tensor as T
from .tensor import ParamStore, Tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 16
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


PAPER_ENCODER = EncoderConfig(image_size=224, patch_size=16, d_model=768, layers=12, heads=12)


@dataclass
class ImageTensor:
    pixels: np.ndarray  # [image_size, image_size, 3], channel-normalized


@dataclass
class PatchEmbeddings:
    z: Tensor  # [n_patches, d_model]


def preprocess(raw: np.ndarray, cfg: EncoderConfig, dtype: str = "f32") -> ImageTensor:
    """Bilinear resize to the model resolution, then ImageNet normalization."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected HxWx3 input, got shape {raw.shape}")
    if raw.shape[0] == 0 or raw.shape[1] == 0:
        raise ValueError("empty image")
    if raw.shape[:2] != (cfg.image_size, cfg.image_size):
        img = Image.fromarray(raw.astype(np.uint8))
        img = img.resize((cfg.image_size, cfg.image_size), Image.BILINEAR)
        raw = np.asarray(img)
    x = raw.astype(np.float64) / 255.0
    mean = np.asarray(IMAGENET_MEAN)
    std = np.asarray(IMAGENET_STD)
    out = ((x - mean) / std).astype(T.np_dtype(dtype))
    return ImageTensor(out)


def load_image(path, cfg: EncoderConfig, dtype: str = "f32") -> ImageTensor:
    with Image.open(path) as im:
        raw = np.asarray(im.convert("RGB"))
    return preprocess(raw, cfg, dtype)


def patchify(img: ImageTensor, cfg: EncoderConfig) -> np.ndarray:
    """[n_patches, patch_size^2 * 3] rows in row-major patch order."""
    p = cfg.patch_size
    h, w, c = img.pixels.shape
    if h != cfg.image_size or w != cfg.image_size:
        raise ValueError(f"image {h}x{w} does not match config size {cfg.image_size}")
    g = cfg.grid
    x = img.pixels.reshape(g, p, g, p, c)
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * c))


def init_encoder_params(params: ParamStore, cfg: EncoderConfig, rng: np.random.Generator,
                        prefix: str = "enc") -> None:
    nn.add_linear(params, rng, f"{prefix}.patch", cfg.patch_size ** 2 * 3, cfg.d_model)
    params.add(f"{prefix}.pos", nn.trunc_normal(rng, (cfg.n_patches, cfg.d_model)))
    for i in range(cfg.layers):
        blk = f"{prefix}.blk{i}"
        nn.add_layer_norm(params, f"{blk}.ln1", cfg.d_model)
        nn.add_attention(params, rng, f"{blk}.attn", cfg.d_model, cfg.d_model)
        nn.add_layer_norm(params, f"{blk}.ln2", cfg.d_model)
        nn.add_mlp(params, rng, f"{blk}.mlp", cfg.d_model, cfg.mlp_ratio)
    nn.add_layer_norm(params, f"{prefix}.lnf", cfg.d_model)


def encode_image(img: ImageTensor, params: ParamStore, cfg: EncoderConfig,
                 prefix: str = "enc") -> PatchEmbeddings:
    if f"{prefix}.patch.w" not in params:
        raise ValueError("params missing encoder weights")
    if params[f"{prefix}.pos"].shape != (cfg.n_patches, cfg.d_model):
        raise ValueError("encoder params do not match config geometry")
    patches = Tensor(patchify(img, cfg), dtype=params.dtype)
    x = nn.linear(params, f"{prefix}.patch", patches) + params[f"{prefix}.pos"]
    full = np.ones((cfg.n_patches, cfg.n_patches), dtype=bool)
    for i in range(cfg.layers):
        blk = f"{prefix}.blk{i}"
        h = nn.ln(params, f"{blk}.ln1", x)
        att, _ = nn.attention(params, f"{blk}.attn", h, h, cfg.heads, full)
        x = x + att
        x = x + nn.mlp(params, f"{blk}.mlp", nn.ln(params, f"{blk}.ln2", x))
    return PatchEmbeddings(nn.ln(params, f"{prefix}.lnf", x))
