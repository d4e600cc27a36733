"""Multi-image context assembly: concatenation, validity mask, temporal slots.

Each image's patch embeddings get that slot's learned temporal embedding
added, then all slots are concatenated into one decoder memory. Slots beyond
the actual image count are zero-filled and marked invalid; masked attention
guarantees their content can never influence the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor
from .vision import PatchEmbeddings

MAX_IMAGES = 12


@dataclass
class FusedContext:
    memory: Tensor          # [n_slots * n_patches, d_model]
    valid: np.ndarray       # boolean [n_slots * n_patches]
    n_images: int
    n_slots: int
    n_patches: int


def init_temporal_params(params: ParamStore, d_model: int, rng: np.random.Generator,
                         max_images: int = MAX_IMAGES, prefix: str = "fuse") -> None:
    params.add(f"{prefix}.temporal", np.asarray(
        np.stack([rng.normal(0.0, 0.02, size=d_model) for _ in range(max_images)])))


def assemble_context(images_z: list[PatchEmbeddings], params: ParamStore,
                     max_images: int = MAX_IMAGES, prefix: str = "fuse") -> FusedContext:
    n = len(images_z)
    if n == 0:
        raise ValueError("zero images")
    if n > max_images:
        raise ValueError(f"{n} images exceeds the {max_images}-image limit")
    n_patches, d = images_z[0].z.shape
    for z in images_z:
        if z.z.shape != (n_patches, d):
            raise ValueError("images have mismatched embedding shapes")
    temporal = params[f"{prefix}.temporal"]
    slots = [images_z[k].z + T.slice_rows(temporal, k, k + 1) for k in range(n)]
    if n < max_images:
        slots.append(Tensor(np.zeros(((max_images - n) * n_patches, d)), dtype=images_z[0].z.dtype))
    memory = T.concat(slots, axis=0)
    valid = np.zeros(max_images * n_patches, dtype=bool)
    valid[:n * n_patches] = True
    return FusedContext(memory, valid, n, max_images, n_patches)


def single_image_context(z: PatchEmbeddings) -> FusedContext:
    """Stage-1 conditioning: one image, no temporal embedding, no dummies."""
    n_patches = z.z.shape[0]
    return FusedContext(z.z, np.ones(n_patches, dtype=bool), 1, 1, n_patches)


def max_image_filter(n_images: int, max_images: int = MAX_IMAGES) -> bool:
    """True = keep the procedure, False = drop it."""
    return n_images <= max_images
