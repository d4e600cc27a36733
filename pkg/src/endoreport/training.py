"""Two-stage training loop: Eq-style mean-CE language modeling loss, Adam,
linear warmup + cosine annealing to a floor, and gradient accumulation.

Stage 1 trains on single image/caption pairs, stage 2 on fused multi-image
procedure contexts paired with the findings text. Both loops are bitwise
reproducible for a fixed seed in single-thread mode.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import storage, tokenizer as tk, vision
from .model import ModelConfig
from .storage import Checkpoint, ManifestRecord
from .tensor import ParamStore

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# re-export: the loss contract lives with the model graph
lm_loss = M.lm_loss


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 10
    micro_batch: int = 12
    accum_steps: int = 32
    peak_lr: float = 6e-4
    warmup_frac: float = 0.05
    lr_floor_frac: float = 0.10
    seed: int = 0
    max_seq_len: int = 64   # stage-2 default is 256
    dtype: str = "f32"
    max_updates: int | None = None   # optional hard cap for harnesses
    stop_loss: float | None = None   # optional early stop on epoch mean CE
    select_best_val: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.accum_steps < 1:
            raise ValueError("accum_steps must be >= 1")
        if not (0 < self.warmup_frac < 1):
            raise ValueError("warmup_frac must be in (0, 1)")
        if not (0 < self.lr_floor_frac <= 1):
            raise ValueError("lr_floor_frac must be in (0, 1]")


def stage_defaults(stage: int) -> TrainConfig:
    if stage == 1:
        return TrainConfig(stage=1, epochs=10, micro_batch=12, max_seq_len=64)
    if stage == 2:
        return TrainConfig(stage=2, epochs=30, micro_batch=1, max_seq_len=256)
    raise ValueError(f"unknown stage {stage}")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak, then cosine annealing down to the floor."""
    if not (0 <= step < total_steps):
        raise ValueError(f"step {step} out of range [0, {total_steps})")
    warmup_steps = math.ceil(cfg.warmup_frac * total_steps)
    if step < warmup_steps:
        return cfg.peak_lr * (step + 1) / warmup_steps
    floor = cfg.lr_floor_frac * cfg.peak_lr
    decay_steps = total_steps - 1 - warmup_steps
    if decay_steps <= 0:
        return floor
    # u runs 0 -> 1 inclusive so the last update lands exactly on the floor
    u = (step - warmup_steps) / decay_steps
    return floor + 0.5 * (cfg.peak_lr - floor) * (1.0 + math.cos(math.pi * u))


class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, params: ParamStore):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.asarray([float(self.step)])}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, params: ParamStore, arrays: dict[str, np.ndarray]) -> "OptimizerState":
        st = cls(params)
        st.step = int(arrays["step"][0])
        for name in st.m:
            st.m[name] = arrays[f"m.{name}"].copy()
            st.v[name] = arrays[f"v.{name}"].copy()
        return st


def adam_step(params: ParamStore, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update; grads are consumed and zeroed."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + ADAM_EPS)
        p.zero_grad()


@dataclass
class LossCurve:
    rows: list[tuple[int, int, float, float]] = field(default_factory=list)  # update, epoch, lr, loss

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("update_index,epoch,lr,loss\n")
            for u, e, lr, loss in self.rows:
                f.write(f"{u},{e},{lr:.10g},{loss:.10g}\n")


@dataclass
class TrainResult:
    params: ParamStore
    curve: LossCurve
    val_losses: list[float]
    best_epoch: int
    best_params: ParamStore
    updates_done: int
    final_epoch_loss: float
    last_epoch: int = -1


class _SampleCache:
    """Decoded images + token ids per manifest record, loaded once."""

    def __init__(self, records: list[ManifestRecord], root: str, tok: tk.TokenizerModel,
                 mcfg: ModelConfig, max_seq_len: int, dtype: str):
        self.samples = []
        for rec in records:
            images = [vision.load_image(os.path.join(root, p), mcfg.encoder, dtype)
                      for p in rec.image_paths]
            ids = M.wrap_tokens(tok, rec.text, max_seq_len)
            self.samples.append((images, ids))

    def __len__(self):
        return len(self.samples)


def _mean_loss(cache: _SampleCache, idxs, params: ParamStore, mcfg: ModelConfig,
               stage: int, backward: bool) -> float:
    """Accumulate mean-over-samples gradients; returns mean loss."""
    total = 0.0
    n = len(idxs)
    for i in idxs:
        images, ids = cache.samples[i]
        loss = M.sample_loss(images, ids, params, mcfg, stage) * (1.0 / n)
        if backward:
            loss.backward()
        total += loss.item()
    return total


def _run_loop(cache: _SampleCache, params: ParamStore, mcfg: ModelConfig, cfg: TrainConfig,
              val_cache: _SampleCache | None, opt: OptimizerState | None = None,
              log=None, start_epoch: int = 0, on_epoch=None) -> TrainResult:
    n = len(cache)
    if n == 0:
        raise ValueError("empty training manifest")
    eff_batch = cfg.micro_batch * cfg.accum_steps
    updates_per_epoch = math.ceil(n / eff_batch)
    total_steps = cfg.epochs * updates_per_epoch
    if cfg.max_updates is not None:
        total_steps = min(total_steps, cfg.max_updates)
    opt = opt or OptimizerState(params)
    curve = LossCurve()
    val_losses: list[float] = []
    best_epoch, best_val = -1, math.inf
    best_params = params
    update = opt.step
    epoch_loss = math.nan
    stop = False
    for epoch in range(start_epoch, cfg.epochs):
        # epoch order is a pure function of (seed, epoch) so runs restart cleanly
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        epoch_losses = []
        for u0 in range(0, n, eff_batch):
            if update >= total_steps:
                stop = True
                break
            batch = order[u0:u0 + eff_batch]
            params.zero_grads()
            loss = _mean_loss(cache, batch, params, mcfg, cfg.stage, backward=True)
            lr = lr_at(update, total_steps, cfg)
            adam_step(params, opt, lr)
            curve.rows.append((update, epoch, lr, loss))
            epoch_losses.append(loss)
            update += 1
        if epoch_losses:
            epoch_loss = float(np.mean(epoch_losses))
        if log:
            log(f"epoch {epoch}: train loss {epoch_loss:.4f}")
        if val_cache is not None and len(val_cache):
            vloss = _mean_loss(val_cache, range(len(val_cache)), params, mcfg,
                               cfg.stage, backward=False)
            val_losses.append(vloss)
            if cfg.select_best_val and vloss < best_val:
                best_val, best_epoch = vloss, epoch
                best_params = _copy_params(params)
        last_epoch = epoch
        if on_epoch:
            on_epoch(epoch, params, opt, val_losses[-1] if val_losses else None)
        if stop or (cfg.stop_loss is not None and epoch_loss < cfg.stop_loss):
            break
    else:
        last_epoch = cfg.epochs - 1
    if best_epoch < 0:
        best_epoch = last_epoch
        best_params = params
    return TrainResult(params, curve, val_losses, best_epoch, best_params, update,
                       epoch_loss, last_epoch)


def _copy_params(params: ParamStore) -> ParamStore:
    out = ParamStore(params.dtype)
    for name, t in params.items():
        out.add(name, t.data.copy())
    return out


def train_stage1(records: list[ManifestRecord], root: str, tok: tk.TokenizerModel,
                 mcfg: ModelConfig, cfg: TrainConfig,
                 val_records: list[ManifestRecord] | None = None,
                 init: Checkpoint | None = None, log=None, on_epoch=None) -> TrainResult:
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    params, opt, start_epoch = _init_from(init, mcfg, cfg)
    cache = _SampleCache(records, root, tok, mcfg, cfg.max_seq_len, cfg.dtype)
    val = _SampleCache(val_records, root, tok, mcfg, cfg.max_seq_len, cfg.dtype) \
        if val_records else None
    return _run_loop(cache, params, mcfg, cfg, val, opt, log, start_epoch, on_epoch)


def train_stage2(records: list[ManifestRecord], root: str, tok: tk.TokenizerModel,
                 mcfg: ModelConfig, cfg: TrainConfig,
                 init: Checkpoint | None = None,
                 val_records: list[ManifestRecord] | None = None, log=None,
                 on_epoch=None) -> TrainResult:
    """`init=None` is the fresh-init (no pretraining) ablation arm."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    for rec in records:
        if len(rec.image_paths) > mcfg.max_images:
            raise ValueError(f"record {rec.record_id} exceeds {mcfg.max_images} images; "
                             "filter upstream")
    params, opt, start_epoch = _init_from(init, mcfg, cfg)
    cache = _SampleCache(records, root, tok, mcfg, cfg.max_seq_len, cfg.dtype)
    val = _SampleCache(val_records, root, tok, mcfg, cfg.max_seq_len, cfg.dtype) \
        if val_records else None
    return _run_loop(cache, params, mcfg, cfg, val, opt, log, start_epoch, on_epoch)


def _init_from(init: Checkpoint | None, mcfg: ModelConfig,
               cfg: TrainConfig) -> tuple[ParamStore, OptimizerState | None, int]:
    fresh = M.init_params(mcfg, cfg.seed, cfg.dtype)
    if init is None:
        return fresh, None, 0
    storage.check_params_match(init, fresh)
    params = init.params.astype(cfg.dtype)
    opt = None
    start_epoch = 0
    if init.optimizer and init.meta.get("stage") == cfg.stage:
        # same-stage resume: keep moments and position in the epoch plan
        opt = OptimizerState.from_arrays(params, init.optimizer)
        start_epoch = int(init.meta.get("epochs_done", 0))
    return params, opt, start_epoch
