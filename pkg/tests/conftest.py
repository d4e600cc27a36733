"""Shared fixtures: the desk-scale corpus, trained checkpoints, and the
acceptance-criteria reporting hook."""

import os

import numpy as np
import pytest

from endoreport import storage, synthetic, tokenizer as tk, training
from endoreport.decoder import DecoderConfig
from endoreport.model import ModelConfig
from endoreport.vision import EncoderConfig

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Report one pass/fail line per acceptance criterion, then assert."""
    def report(num: int, name: str, ok: bool, detail: str = ""):
        line = f"[{num:2d}] {name}: {'PASS' if ok else 'FAIL'}" + \
               (f"  ({detail})" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """Default 600-patient synthetic corpus plus its trained tokenizer."""
    out = tmp_path_factory.mktemp("desk_corpus")
    synthetic.generate_corpus(synthetic.CorpusConfig(), out)
    s1 = storage.read_manifest(os.path.join(out, "stage1.jsonl"), 1).records
    s2 = storage.read_manifest(os.path.join(out, "stage2.jsonl"), 2).records
    texts = sorted({r.text for r in s1 if r.split == "train"} |
                   {r.text for r in s2 if r.split == "train"})
    tok = tk.train_bpe(texts, 512)
    return {"root": str(out), "stage1": s1, "stage2": s2, "tok": tok}


@pytest.fixture(scope="session")
def desk_model(desk_corpus):
    tok = desk_corpus["tok"]
    enc = EncoderConfig()
    dec = DecoderConfig(max_seq_len=256, vocab_size=tok.vocab_size)
    return ModelConfig(enc, dec)


@pytest.fixture(scope="session")
def stage1_pretrained(desk_corpus, desk_model):
    """Stage-1 checkpoint shared by the ablation and grounding criteria."""
    s1_train = [r for r in desk_corpus["stage1"] if r.split == "train"]
    rng = np.random.default_rng(0)
    sub = [s1_train[i] for i in rng.permutation(len(s1_train))[:1500]]
    cfg = training.TrainConfig(stage=1, epochs=3, micro_batch=8, accum_steps=4,
                               seed=0, max_seq_len=64, select_best_val=False)
    res = training.train_stage1(sub, desk_corpus["root"], desk_corpus["tok"],
                                desk_model, cfg)
    ck_params = res.params
    return ck_params


@pytest.fixture(scope="session")
def ablation_arms(desk_corpus, desk_model, stage1_pretrained):
    """Stage-2 training arms: (seed, pretrained?) -> trained ParamStore.

    Equal update budget per arm; the pretrained arms start from the shared
    stage-1 checkpoint, the fresh arms from seed-matched random init.
    """
    import time
    t0 = time.monotonic()
    tok = desk_corpus["tok"]
    s2_train = [r for r in desk_corpus["stage2"] if r.split == "train"]
    ck = storage.Checkpoint(desk_model, tok.content_hash(), stage1_pretrained,
                            {}, {"stage": 1})
    arms = {}
    for seed in range(3):
        order = np.random.default_rng(seed).permutation(len(s2_train))
        sub = [s2_train[i] for i in order[:240]]
        cfg = training.TrainConfig(stage=2, epochs=40, micro_batch=1, accum_steps=8,
                                   seed=seed, max_seq_len=256, max_updates=120,
                                   select_best_val=False)
        arms[(seed, True)] = training.train_stage2(
            sub, desk_corpus["root"], tok, desk_model, cfg, init=ck).params
        arms[(seed, False)] = training.train_stage2(
            sub, desk_corpus["root"], tok, desk_model, cfg, init=None).params
    arms["elapsed"] = time.monotonic() - t0
    return arms
