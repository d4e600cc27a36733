"""Operator CLI: synth, train, generate, evaluate, verify.

Configuration comes from one JSON file plus flag overrides; the effective
config is serialized next to every command's outputs. Logs go to stderr,
data products to files. Exit codes: 0 success, 1 runtime/data error,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import generate as gen
from . import metrics, storage, synthetic, tokenizer as tk, training, vision
from .decoder import DecoderConfig
from .model import ModelConfig
from .synthetic import CorpusConfig
from .training import TrainConfig
from .vision import EncoderConfig

DEFAULT_CONFIG = {
    "seed": 0,
    "dtype": "f32",
    "vocab_size": 512,
    "corpus": {"n_patients": 600, "min_procedures": 1, "max_procedures": 2,
               "min_scenes": 1, "max_scenes": 12, "image_size": 64,
               "split_fracs": [0.8, 0.1, 0.1], "master_seed": 20240101},
    "model": {"image_size": 64, "patch_size": 16, "enc_d_model": 128, "enc_layers": 4,
              "enc_heads": 4, "mlp_ratio": 4, "dec_layers": 4, "dec_heads": 4,
              "dec_d_model": 128, "max_images": 12},
    "train_stage1": {"epochs": 10, "micro_batch": 12, "accum_steps": 32,
                     "peak_lr": 6e-4, "warmup_frac": 0.05, "lr_floor_frac": 0.10,
                     "max_seq_len": 64, "max_updates": None, "stop_loss": None,
                     "select_best_val": True},
    "train_stage2": {"epochs": 30, "micro_batch": 1, "accum_steps": 32,
                     "peak_lr": 6e-4, "warmup_frac": 0.05, "lr_floor_frac": 0.10,
                     "max_seq_len": 256, "max_updates": None, "stop_loss": None,
                     "select_best_val": True},
    "generate": {"max_len_stage1": 64, "max_len_stage2": 256},
}


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise ValueError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(path: str | None, seed: int | None = None, dtype: str | None = None) -> dict:
    cfg = DEFAULT_CONFIG
    if path:
        with open(path, "r", encoding="utf-8") as f:
            cfg = _merge(DEFAULT_CONFIG, json.load(f))
    if seed is not None:
        cfg = {**cfg, "seed": seed}
    if dtype is not None:
        cfg = {**cfg, "dtype": dtype}
    return cfg


def _echo_config(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    m = cfg["model"]
    enc = EncoderConfig(image_size=m["image_size"], patch_size=m["patch_size"],
                        d_model=m["enc_d_model"], layers=m["enc_layers"],
                        heads=m["enc_heads"], mlp_ratio=m["mlp_ratio"])
    dec = DecoderConfig(layers=m["dec_layers"], heads=m["dec_heads"],
                        d_model=m["dec_d_model"], d_encoder=m["enc_d_model"],
                        max_seq_len=max(cfg["train_stage1"]["max_seq_len"],
                                        cfg["train_stage2"]["max_seq_len"]),
                        vocab_size=vocab_size, mlp_ratio=m["mlp_ratio"])
    return ModelConfig(enc, dec, m["max_images"])


def train_config(cfg: dict, stage: int) -> TrainConfig:
    t = cfg[f"train_stage{stage}"]
    return TrainConfig(stage=stage, seed=cfg["seed"], dtype=cfg["dtype"], **t)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.seed, args.dtype)
    c = cfg["corpus"]
    corpus_cfg = CorpusConfig(n_patients=c["n_patients"], min_procedures=c["min_procedures"],
                              max_procedures=c["max_procedures"], min_scenes=c["min_scenes"],
                              max_scenes=c["max_scenes"], image_size=c["image_size"],
                              split_fracs=tuple(c["split_fracs"]),
                              master_seed=c["master_seed"])
    os.makedirs(args.out, exist_ok=True)
    probe = os.path.join(args.out, ".writable")
    with open(probe, "w") as f:
        f.write("ok")
    os.remove(probe)
    summary = synthetic.generate_corpus(corpus_cfg, args.out)
    s1 = storage.read_manifest(os.path.join(args.out, "stage1.jsonl"), 1).records
    s2 = storage.read_manifest(os.path.join(args.out, "stage2.jsonl"), 2).records
    texts = sorted({r.text for r in s1 if r.split == "train"}
                   | {r.text for r in s2 if r.split == "train"})
    tok = tk.train_bpe(texts, cfg["vocab_size"])
    tk.save(tok, os.path.join(args.out, "tokenizer.txt"))
    _echo_config(cfg, args.out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _load_corpus(corpus_dir: str, stage: int):
    manifest = os.path.join(corpus_dir, f"stage{stage}.jsonl")
    res = storage.read_manifest(manifest, stage)
    if res.excluded_over_limit:
        log(f"excluded {res.excluded_over_limit} over-limit records")
    violations = storage.validate_splits(res.records)
    if violations:
        raise ValueError("split violations: " + "; ".join(violations))
    tok = tk.load(os.path.join(corpus_dir, "tokenizer.txt"))
    return res.records, tok


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed, args.dtype)
    stage = args.stage
    records, tok = _load_corpus(args.corpus, stage)
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    mcfg = model_config(cfg, tok.vocab_size)
    tcfg = train_config(cfg, stage)
    init = None
    if args.init != "fresh":
        init = storage.load_checkpoint(args.init)
        if init.tokenizer_hash != tok.content_hash():
            raise ValueError("checkpoint tokenizer hash does not match the corpus tokenizer")
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out)
    tok_hash = tok.content_hash()

    def on_epoch(epoch, params, opt, val_loss):
        path = os.path.join(args.out, f"epoch{epoch:03d}.ckpt")
        storage.save_checkpoint(params, mcfg, tok_hash, path,
                                extra_arrays=opt.to_arrays(),
                                meta={"stage": stage, "epochs_done": epoch + 1,
                                      "val_loss": val_loss})

    fn = training.train_stage1 if stage == 1 else training.train_stage2
    kwargs = {"val_records": val_recs, "init": init, "log": log, "on_epoch": on_epoch}
    result = fn(train_recs, args.corpus, tok, mcfg, tcfg, **kwargs)
    result.curve.write_csv(os.path.join(args.out, "loss_curve.csv"))
    storage.save_checkpoint(result.best_params, mcfg, tok_hash,
                            os.path.join(args.out, "best.ckpt"),
                            meta={"stage": stage, "best_epoch": result.best_epoch})
    with open(os.path.join(args.out, "best_epoch.txt"), "w") as f:
        f.write(f"{result.best_epoch}\n")
    log(f"done: {result.updates_done} updates, best epoch {result.best_epoch}")
    return 0


def cmd_generate(args) -> int:
    ck = storage.load_checkpoint(args.ckpt)
    tok = tk.load(args.tokenizer)
    if ck.tokenizer_hash != tok.content_hash():
        raise ValueError("tokenizer hash mismatch between checkpoint and tokenizer file")
    stage = args.stage
    res = storage.read_manifest(args.manifest, stage)
    records = [r for r in res.records if args.split in ("all", r.split)]
    if not records:
        raise ValueError("no records selected from manifest")
    root = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    mcfg = ck.config
    params = ck.params
    max_len = args.max_len
    lines = []
    for rec in records:
        images = [vision.load_image(os.path.join(root, p), mcfg.encoder, params.dtype)
                  for p in rec.image_paths]
        from . import model as M
        if stage == 1:
            ctx = M.caption_context(images[0], params, mcfg)
        else:
            ctx = M.findings_context(images, params, mcfg)
        result = gen.greedy_generate(ctx, params, mcfg.decoder, tok, max_len,
                                     want_attention=args.attn)
        lines.append(json.dumps({"record_id": rec.record_id, "generated": result.text,
                                 "reference": rec.text}, sort_keys=True, ensure_ascii=False))
        if args.attn and result.attention:
            adir = os.path.join(args.attn_dir or os.path.dirname(args.out) or ".",
                                "attn", rec.record_id)
            os.makedirs(adir, exist_ok=True)
            for amap in result.attention:
                for slot in range(min(len(images), amap.weights.shape[0])):
                    gen.render_heatmap(amap, images[slot], adir, slot=slot)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    log(f"generated {len(records)} records -> {args.out}")
    return 0


def _read_pairs(path: str) -> list[tuple[str, str]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                pairs.append((d["generated"], d["reference"]))
    return pairs


def _format_table(rows: list[tuple[str, ...]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
                     for r in rows) + "\n"


def cmd_evaluate(args) -> int:
    report = metrics.evaluate_corpus(_read_pairs(args.pairs))
    names = ["bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge"]
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    if args.baseline:
        base = metrics.evaluate_corpus(_read_pairs(args.baseline))
        rows = [("metric", "pairs", "baseline", "relative_change")]
        csv_lines = ["metric,pairs,baseline,relative_change"]
        for n in names:
            a, b = getattr(report, n), getattr(base, n)
            rel = metrics.relative_change(a, b)
            rows.append((n, f"{a:.6f}", f"{b:.6f}", f"{rel:+.4%}"))
            csv_lines.append(f"{n},{a:.10g},{b:.10g},{rel:.10g}")
    else:
        rows = [("metric", "value")]
        csv_lines = ["metric,value"]
        for n in names:
            rows.append((n, f"{getattr(report, n):.6f}"))
            csv_lines.append(f"{n},{getattr(report, n):.10g}")
    table = _format_table(rows)
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(csv_lines) + "\n")
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as f:
        f.write(table)
    print(table, end="")
    return 0


def cmd_verify(args) -> int:
    from . import verify
    suite = {"gradcheck": verify.suite_gradcheck, "invariants": verify.suite_invariants,
             "oracles": verify.suite_oracles}[args.suite]
    results = suite(inject_fault=args.inject_fault)
    ok = True
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
        ok &= passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="endoreport",
                                description="two-stage image-to-report toolkit")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dtype", choices=["f32", "f64"], default=None)
    p.add_argument("--threads", type=int, default=1, help="accepted for compatibility")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth", help="generate the synthetic corpus + tokenizer")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train stage 1 or stage 2")
    s.add_argument("--corpus", required=True, help="corpus directory from synth")
    s.add_argument("--stage", type=int, choices=[1, 2], required=True)
    s.add_argument("--init", default="fresh", help="'fresh' or a checkpoint path")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("generate", help="greedy generation over a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--tokenizer", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--stage", type=int, choices=[1, 2], default=2)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--max-len", type=int, default=256)
    s.add_argument("--out", required=True)
    s.add_argument("--attn", action="store_true", help="export per-token heatmaps")
    s.add_argument("--attn-dir", default=None)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("evaluate", help="score generated-vs-reference pairs")
    s.add_argument("--pairs", required=True)
    s.add_argument("--baseline", default=None, help="second pairs file for ablation deltas")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("verify", help="run a verification suite")
    s.add_argument("--suite", choices=["gradcheck", "invariants", "oracles"], required=True)
    s.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, storage.CheckpointError) as e:
        log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
