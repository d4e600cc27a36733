"""Manifest I/O and bit-exact checkpoint persistence.

Manifests are JSON-lines: one record per line, UTF-8, order-preserving.
Checkpoints are a small binary container: magic, version, a JSON header
(configs, tokenizer hash, tensor table with offsets, payload checksum),
then the raw little-endian row-major tensor payload.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderConfig
from .model import ModelConfig
from .tensor import ParamStore, np_dtype
from .vision import EncoderConfig

MAGIC = b"ENDORCKP"
VERSION = 1

SPLITS = ("train", "val", "test")


class CheckpointError(ValueError):
    def __init__(self, code: str, msg: str):
        super().__init__(f"{code}: {msg}")
        self.code = code


@dataclass
class ManifestRecord:
    record_id: str
    patient_id: str
    procedure_id: str
    stage: int
    image_paths: list[str]
    text: str
    split: str
    boxes: list[list[int] | None] | None = None  # per image: [x0, y0, x1, y1] pixels

    def to_json(self) -> str:
        d = {"record_id": self.record_id, "patient_id": self.patient_id,
             "procedure_id": self.procedure_id, "stage": self.stage,
             "image_paths": self.image_paths, "text": self.text, "split": self.split}
        if self.boxes is not None:
            d["boxes"] = self.boxes
        return json.dumps(d, sort_keys=True, ensure_ascii=False)


@dataclass
class ManifestReadResult:
    records: list[ManifestRecord]
    excluded_over_limit: int = 0


def write_manifest(records: list[ManifestRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_manifest(path, stage: int, max_images: int = 12,
                  check_files: bool = False) -> ManifestReadResult:
    records: list[ManifestRecord] = []
    seen_ids: set[str] = set()
    excluded = 0
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"empty manifest: {path}")
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = ManifestRecord(
                record_id=str(d["record_id"]), patient_id=str(d["patient_id"]),
                procedure_id=str(d["procedure_id"]), stage=int(d["stage"]),
                image_paths=list(d["image_paths"]), text=str(d["text"]),
                split=str(d["split"]), boxes=d.get("boxes"))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}:{lineno}: malformed manifest record ({e})") from None
        if rec.record_id in seen_ids:
            raise ValueError(f"{path}:{lineno}: duplicate record_id {rec.record_id!r}")
        seen_ids.add(rec.record_id)
        if rec.split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: bad split {rec.split!r}")
        if rec.stage != stage:
            raise ValueError(f"{path}:{lineno}: stage {rec.stage} record in stage-{stage} manifest")
        if stage == 1 and len(rec.image_paths) != 1:
            raise ValueError(f"{path}:{lineno}: stage-1 record must have exactly one image")
        if stage == 2 and len(rec.image_paths) == 0:
            raise ValueError(f"{path}:{lineno}: stage-2 record with no images")
        if stage == 2 and len(rec.image_paths) > max_images:
            excluded += 1
            continue
        if check_files:
            import os
            for p in rec.image_paths:
                if not os.path.isfile(p):
                    raise ValueError(f"{path}:{lineno}: missing image file {p}")
        records.append(rec)
    return ManifestReadResult(records, excluded)


def validate_splits(records: list[ManifestRecord]) -> list[str]:
    """Report any patient or procedure appearing in more than one split."""
    violations = []
    for key, label in (("patient_id", "patient"), ("procedure_id", "procedure")):
        splits_by_id: dict[str, set[str]] = {}
        for r in records:
            splits_by_id.setdefault(getattr(r, key), set()).add(r.split)
        for ident in sorted(splits_by_id):
            if len(splits_by_id[ident]) > 1:
                violations.append(f"{label} {ident} appears in splits "
                                  f"{sorted(splits_by_id[ident])}")
    return violations


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _config_dict(cfg: ModelConfig) -> dict:
    e, d = cfg.encoder, cfg.decoder
    return {
        "encoder": {"image_size": e.image_size, "patch_size": e.patch_size,
                    "d_model": e.d_model, "layers": e.layers, "heads": e.heads,
                    "mlp_ratio": e.mlp_ratio},
        "decoder": {"layers": d.layers, "heads": d.heads, "d_model": d.d_model,
                    "d_encoder": d.d_encoder, "max_seq_len": d.max_seq_len,
                    "vocab_size": d.vocab_size, "mlp_ratio": d.mlp_ratio},
        "max_images": cfg.max_images,
    }


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]),
                       d["max_images"])


def save_checkpoint(params: ParamStore, cfg: ModelConfig, tokenizer_hash: str, path,
                    extra_arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    payload = io.BytesIO()
    table = []
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<")).tobytes()
        table.append({"name": name, "dtype": t.dtype, "shape": list(t.shape),
                      "offset": payload.tell(), "nbytes": len(raw)})
        payload.write(raw)
    opt_table = []
    for name in sorted(extra_arrays or {}):
        arr = np.ascontiguousarray(extra_arrays[name])
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        opt_table.append({"name": name,
                          "dtype": "f32" if arr.dtype == np.float32 else "f64",
                          "shape": list(arr.shape), "offset": payload.tell(),
                          "nbytes": len(raw)})
        payload.write(raw)
    blob = payload.getvalue()
    header = {"config": _config_dict(cfg), "tokenizer_hash": tokenizer_hash,
              "dtype": params.dtype, "tensors": table, "optimizer": opt_table,
              "meta": meta or {}, "payload_sha256": hashlib.sha256(blob).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, 0))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(blob)


@dataclass
class Checkpoint:
    config: ModelConfig
    tokenizer_hash: str
    params: ParamStore
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 24 or data[:8] != MAGIC:
        raise CheckpointError("bad magic", f"{path} is not a checkpoint file")
    version, _ = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError("bad version", f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", data[16:24])
    if len(data) < 24 + hlen:
        raise CheckpointError("truncated", "header extends past end of file")
    header = json.loads(data[24:24 + hlen].decode("utf-8"))
    blob = data[24 + hlen:]
    if hashlib.sha256(blob).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("checksum mismatch", "payload corrupted")
    cfg = config_from_dict(header["config"])
    params = ParamStore(header["dtype"])
    for ent in header["tensors"]:
        dt = np_dtype(ent["dtype"]).newbyteorder("<")
        n = ent["nbytes"]
        if ent["offset"] + n > len(blob):
            raise CheckpointError("truncated", f"tensor {ent['name']} extends past payload")
        arr = np.frombuffer(blob[ent["offset"]:ent["offset"] + n], dtype=dt)
        arr = arr.astype(np_dtype(ent["dtype"])).reshape(ent["shape"])
        params.add(ent["name"], arr)
    opt = {}
    for ent in header["optimizer"]:
        dt = np_dtype(ent["dtype"]).newbyteorder("<")
        arr = np.frombuffer(blob[ent["offset"]:ent["offset"] + ent["nbytes"]], dtype=dt)
        opt[ent["name"]] = arr.astype(np_dtype(ent["dtype"])).reshape(ent["shape"])
    return Checkpoint(cfg, header["tokenizer_hash"], params, opt, header.get("meta", {}))


def check_params_match(ck: Checkpoint, expected: ParamStore) -> None:
    """Shape-table validation against a live ParamStore layout."""
    ck_names = ck.params.names()
    ex_names = expected.names()
    if ck_names != ex_names:
        missing = sorted(set(ex_names) ^ set(ck_names))
        raise CheckpointError("shape mismatch", f"parameter set differs: {missing[:5]}")
    for name in ex_names:
        if ck.params[name].shape != expected[name].shape:
            raise CheckpointError(
                "shape mismatch",
                f"tensor {name}: checkpoint {ck.params[name].shape} vs "
                f"model {expected[name].shape}")
