"""Greedy decoding, grounding maps, and heatmap export tests."""

import numpy as np
import pytest

from endoreport import tokenizer as tk
from endoreport.decoder import DecoderConfig, init_decoder_params
from endoreport.fusion import FusedContext
from endoreport.generate import (denormalize, extract_grounding, greedy_generate,
                                 read_heatmap_sidecar, render_heatmap)
from endoreport.tensor import ParamStore, Tensor
from endoreport.vision import ImageTensor, preprocess, EncoderConfig

TOK = tk.train_bpe(["polyp rectum normal colon large ulcer stomach"], 270)
CFG = DecoderConfig(layers=2, heads=2, d_model=16, d_encoder=16,
                    max_seq_len=24, vocab_size=TOK.vocab_size)


def _ctx(seed=0, n_slots=2, n_patches=4, n_valid_slots=1, d=16):
    rng = np.random.default_rng(seed)
    mem = rng.standard_normal((n_slots * n_patches, d))
    valid = np.zeros(n_slots * n_patches, dtype=bool)
    valid[:n_valid_slots * n_patches] = True
    mem[~valid] = 0.0
    return FusedContext(Tensor(mem, dtype="f64"), valid, n_valid_slots,
                        n_slots, n_patches)


def _params(seed=0):
    params = ParamStore("f64")
    init_decoder_params(params, CFG, np.random.default_rng(seed))
    return params


class TestIncrementalDecoder:
    def test_matches_full_forward(self):
        from endoreport.decoder import decoder_forward
        from endoreport.generate import IncrementalDecoder
        params, ctx = _params(seed=8), _ctx(seed=9, n_slots=3, n_valid_slots=2)
        ids = [TOK.bos, 65, 70, 80, 90, 100]
        full = decoder_forward(ids, ctx, params, CFG).logits.data
        inc = IncrementalDecoder(ctx, params, CFG)
        fast = np.stack([inc.step(i) for i in ids])
        assert np.allclose(fast, full, atol=1e-10)
        assert np.array_equal(np.argmax(fast, axis=-1), np.argmax(full, axis=-1))

    def test_max_len_enforced(self):
        from endoreport.generate import IncrementalDecoder
        inc = IncrementalDecoder(_ctx(), _params(), CFG)
        for _ in range(CFG.max_seq_len):
            inc.step(65)
        with pytest.raises(ValueError, match="max_seq_len"):
            inc.step(65)


class TestGreedy:
    def test_determinism(self):
        params, ctx = _params(), _ctx()
        a = greedy_generate(ctx, params, CFG, TOK, max_len=10)
        b = greedy_generate(ctx, params, CFG, TOK, max_len=10)
        assert a.ids.ids == b.ids.ids
        assert a.text == b.text

    def test_respects_max_len(self):
        params, ctx = _params(), _ctx()
        res = greedy_generate(ctx, params, CFG, TOK, max_len=5)
        assert len(res.ids) <= 5
        assert res.stop_reason in ("eos", "max_len")

    def test_no_bos_in_output(self):
        params, ctx = _params(), _ctx()
        res = greedy_generate(ctx, params, CFG, TOK, max_len=12)
        assert TOK.bos not in res.ids.ids
        assert TOK.eos not in res.ids.ids

    def test_bad_max_len(self):
        with pytest.raises(ValueError):
            greedy_generate(_ctx(), _params(), CFG, TOK, max_len=0)

    def test_prefix_stability(self):
        # greedy decoding is deterministic, so a longer budget extends the
        # shorter result unless the shorter one already stopped at EOS
        params, ctx = _params(), _ctx()
        short = greedy_generate(ctx, params, CFG, TOK, max_len=4)
        long = greedy_generate(ctx, params, CFG, TOK, max_len=8)
        if short.stop_reason == "max_len":
            assert long.ids.ids[:4] == short.ids.ids


class TestGrounding:
    def test_shapes_and_normalization(self):
        params, ctx = _params(), _ctx(n_slots=3, n_valid_slots=2)
        res = greedy_generate(ctx, params, CFG, TOK, max_len=8, want_attention=True)
        assert res.attention is not None
        assert len(res.attention) == len(res.ids)
        for amap in res.attention:
            assert amap.weights.shape == (3, 2, 2)
            assert amap.weights.sum() == pytest.approx(1.0, abs=1e-6)
            assert np.all(amap.weights[2] == 0.0)  # dummy slot carries no mass
            assert np.all(amap.weights >= 0.0)

    def test_token_strings_match(self):
        params, ctx = _params(), _ctx()
        res = greedy_generate(ctx, params, CFG, TOK, max_len=8, want_attention=True)
        for i, amap in enumerate(res.attention):
            assert amap.token_index == i
            assert amap.token_string == tk.decode(
                TOK, tk.TokenSequence([res.ids.ids[i]]), errors="replace")

    def test_missing_trace_rejected(self):
        with pytest.raises(ValueError, match="trace"):
            extract_grounding([], _ctx(), tk.TokenSequence([65]), TOK)


class TestHeatmaps:
    def _base(self):
        cfg = EncoderConfig(image_size=32, patch_size=16, d_model=16, layers=1, heads=2)
        raw = np.random.default_rng(5).integers(0, 256, (32, 32, 3)).astype(np.uint8)
        return preprocess(raw, cfg, dtype="f64"), raw

    def test_denormalize_roundtrip(self):
        base, raw = self._base()
        back = denormalize(base)
        assert np.abs(back.astype(int) - raw.astype(int)).max() <= 1

    def test_render_and_sidecar(self, tmp_path):
        from endoreport.generate import AttentionMap
        base, _ = self._base()
        w = np.zeros((1, 2, 2))
        w[0] = [[0.7, 0.1], [0.1, 0.1]]
        amap = AttentionMap(3, "polyp", w)
        png, txt = render_heatmap(amap, base, tmp_path, slot=0)
        assert png.endswith("tok003_polyp_img0.png")
        from PIL import Image
        with Image.open(png) as im:
            assert im.size == (32, 32)
        grid = read_heatmap_sidecar(txt)
        assert np.allclose(grid, w[0], atol=1e-8)

    def test_filename_sanitized(self, tmp_path):
        from endoreport.generate import AttentionMap
        base, _ = self._base()
        amap = AttentionMap(0, " /.", np.full((1, 2, 2), 0.25))
        png, _ = render_heatmap(amap, base, tmp_path)
        assert "/" not in png.split(str(tmp_path))[-1].strip("/").split("/")[-1]
