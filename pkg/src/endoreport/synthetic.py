"""Deterministic synthetic endoscopy-like corpus.

Scenes are site-tinted noisy backgrounds with an optional lesion shape
(disc = polyp, crescent = ulcer, speckle cluster = erosion) placed on a
patch-grid cell, so every caption is a pure function of the rendered pixels
and ground-truth lesion boxes are exact. Everything derives from a master
seed via numpy SeedSequence spawn keys (master -> patient -> procedure ->
scene), so any subset regenerates identically.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .storage import ManifestRecord, write_manifest

SITES = ("esophagus", "stomach", "duodenum", "cecum", "colon", "rectum")
FINDINGS = ("polyp", "ulcer", "erosion", "normal")
SIZES = ("small", "large")

SITE_COLORS = {
    "esophagus": (205, 130, 115),
    "stomach": (165, 75, 75),
    "duodenum": (215, 165, 95),
    "cecum": (140, 105, 55),
    "colon": (190, 135, 70),
    "rectum": (155, 85, 105),
}
FINDING_COLORS = {"polyp": (250, 225, 215), "ulcer": (240, 240, 215), "erosion": (70, 15, 15)}

PATCH = 16  # grid cell size in pixels; matches the encoder patch size


@dataclass(frozen=True)
class SceneSpec:
    site: str
    finding: str
    size_class: str
    position: tuple[int, int]  # (row, col) grid cell
    rng_seed: int


@dataclass
class RenderedScene:
    pixels: np.ndarray              # uint8 [S, S, 3]
    box: tuple[int, int, int, int] | None  # (x0, y0, x1, y1) exclusive, None for normal


def render_scene(spec: SceneSpec, image_size: int = 64) -> RenderedScene:
    grid = image_size // PATCH
    r, c = spec.position
    if not (0 <= r < grid and 0 <= c < grid):
        raise ValueError(f"position {spec.position} outside {grid}x{grid} grid")
    rng = np.random.default_rng(spec.rng_seed)
    base = np.asarray(SITE_COLORS[spec.site], dtype=np.float64)
    img = base + rng.uniform(-12, 12, size=(image_size, image_size, 3))
    if spec.finding == "normal":
        return RenderedScene(np.clip(img, 0, 255).astype(np.uint8), None)

    cy = r * PATCH + PATCH // 2
    cx = c * PATCH + PATCH // 2
    radius = 11 if spec.size_class == "large" else 5
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    color = np.asarray(FINDING_COLORS[spec.finding], dtype=np.float64)
    if spec.finding == "polyp":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    elif spec.finding == "ulcer":
        outer = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        inner = (yy - cy) ** 2 + (xx - (cx + radius // 2)) ** 2 <= (radius * 3 // 4) ** 2
        mask = outer & ~inner
    else:  # erosion: seeded speckle cluster inside the lesion disc
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        speckle = rng.random((image_size, image_size)) < 0.55
        mask = disc & speckle
        if not mask.any():
            mask = disc
    img[mask] = color + rng.uniform(-8, 8, size=(int(mask.sum()), 3))
    ys, xs = np.nonzero(mask)
    box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return RenderedScene(np.clip(img, 0, 255).astype(np.uint8), box)


def make_caption(spec: SceneSpec) -> str:
    if spec.finding == "normal":
        return f"normal {spec.site}"
    if spec.size_class == "large":
        return f"large {spec.finding} {spec.site}"
    return f"{spec.finding} {spec.site}"


def make_findings(scenes: list[SceneSpec]) -> str:
    if not (1 <= len(scenes) <= 12):
        raise ValueError("a procedure has 1..12 scenes")
    sentences = []
    for s in scenes:
        if s.finding == "normal":
            sentences.append(f"The {s.site} was normal.")
        else:
            sentences.append(f"A {s.size_class} {s.finding} was found in the {s.site}.")
    return " ".join(sentences)


def parse_findings(text: str) -> list[tuple[str, str]]:
    """Invert make_findings back to (finding, site) pairs; used by tests."""
    out = []
    for sent in text.split("."):
        words = sent.split()
        if not words:
            continue
        if words[0] == "The" and words[-1] == "normal":
            out.append(("normal", words[1]))
        elif words[0] == "A":
            out.append((words[2], words[-1]))
        else:
            raise ValueError(f"unparseable findings sentence: {sent!r}")
    return out


@dataclass(frozen=True)
class CorpusConfig:
    n_patients: int = 600
    min_procedures: int = 1
    max_procedures: int = 2
    min_scenes: int = 1
    max_scenes: int = 12
    image_size: int = 64
    split_fracs: tuple[float, float, float] = (0.8, 0.1, 0.1)
    master_seed: int = 20240101

    def __post_init__(self):
        if abs(sum(self.split_fracs) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def _scene_seed(master: int, p: int, q: int, s: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(1, p, q, s))
    return int(ss.generate_state(1, np.uint64)[0])


def sample_procedure(cfg: CorpusConfig, p: int, q: int) -> list[SceneSpec]:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.master_seed, spawn_key=(1, p, q)))
    n_scenes = int(rng.integers(cfg.min_scenes, cfg.max_scenes + 1))
    grid = cfg.image_size // PATCH
    scenes = []
    for s in range(n_scenes):
        scenes.append(SceneSpec(
            site=SITES[int(rng.integers(0, len(SITES)))],
            finding=FINDINGS[int(rng.integers(0, len(FINDINGS)))],
            size_class=SIZES[int(rng.integers(0, len(SIZES)))],
            position=(int(rng.integers(0, grid)), int(rng.integers(0, grid))),
            rng_seed=_scene_seed(cfg.master_seed, p, q, s)))
    return scenes


def generate_corpus(cfg: CorpusConfig, out_dir) -> dict:
    """Write images plus stage-1 and stage-2 manifests; returns summary counts."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    master = np.random.default_rng(np.random.SeedSequence(cfg.master_seed, spawn_key=(2, 0)))
    order = master.permutation(cfg.n_patients)
    n_train = int(round(cfg.split_fracs[0] * cfg.n_patients))
    n_val = int(round(cfg.split_fracs[1] * cfg.n_patients))
    split_of = {}
    for rank, p in enumerate(order):
        split_of[int(p)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    stage1: list[ManifestRecord] = []
    stage2: list[ManifestRecord] = []
    for p in range(cfg.n_patients):
        prng = np.random.default_rng(np.random.SeedSequence(cfg.master_seed, spawn_key=(1, p)))
        n_procs = int(prng.integers(cfg.min_procedures, cfg.max_procedures + 1))
        pid = f"pat{p:05d}"
        for q in range(n_procs):
            proc_id = f"{pid}-proc{q}"
            scenes = sample_procedure(cfg, p, q)
            paths, boxes = [], []
            for s, spec in enumerate(scenes):
                rendered = render_scene(spec, cfg.image_size)
                rel = os.path.join("images", f"{proc_id}-img{s:02d}.png")
                path = os.path.join(out_dir, rel)
                tmp = path + ".tmp"
                Image.fromarray(rendered.pixels).save(tmp, format="PNG")
                os.replace(tmp, path)
                paths.append(rel)
                boxes.append(list(rendered.box) if rendered.box else None)
                stage1.append(ManifestRecord(
                    record_id=f"{proc_id}-img{s:02d}", patient_id=pid,
                    procedure_id=proc_id, stage=1, image_paths=[rel],
                    text=make_caption(spec), split=split_of[p]))
            stage2.append(ManifestRecord(
                record_id=proc_id, patient_id=pid, procedure_id=proc_id, stage=2,
                image_paths=paths, text=make_findings(scenes), split=split_of[p],
                boxes=boxes))
    write_manifest(stage1, os.path.join(out_dir, "stage1.jsonl"))
    write_manifest(stage2, os.path.join(out_dir, "stage2.jsonl"))
    return {"patients": cfg.n_patients, "procedures": len(stage2), "images": len(stage1),
            "splits": {s: sum(1 for r in stage2 if r.split == s) for s in ("train", "val", "test")}}
