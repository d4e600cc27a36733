"""Decoder forward-pass tests: causality, cross-attention masking, shapes."""

import numpy as np
import pytest

from endoreport.decoder import (DecoderConfig, causal_mask, decoder_forward,
                                init_decoder_params)
from endoreport.fusion import FusedContext
from endoreport.tensor import ParamStore, Tensor

CFG = DecoderConfig(layers=2, heads=2, d_model=16, d_encoder=16,
                    max_seq_len=12, vocab_size=40)


def _setup(seed=0, n_ctx=6, n_valid=None):
    rng = np.random.default_rng(seed)
    params = ParamStore("f64")
    init_decoder_params(params, CFG, rng)
    valid = np.ones(n_ctx, dtype=bool)
    if n_valid is not None:
        valid[n_valid:] = False
    mem = rng.standard_normal((n_ctx, CFG.d_encoder))
    mem[~valid] = 0.0
    ctx = FusedContext(memory=Tensor(mem, dtype="f64"), valid=valid, n_images=1,
                       n_slots=1, n_patches=n_ctx)
    return params, ctx


class TestCausalMask:
    def test_lower_triangular(self):
        m = causal_mask(4)
        assert m.dtype == bool
        assert np.array_equal(m, np.tril(np.ones((4, 4), dtype=bool)))


class TestForward:
    def test_logit_shape(self):
        params, ctx = _setup()
        out = decoder_forward(np.array([1, 2, 3]), ctx, params, CFG)
        assert out.logits.data.shape == (3, CFG.vocab_size)

    def test_causality_bitwise(self):
        params, ctx = _setup()
        toks = np.array([5, 7, 9, 11, 13])
        base = decoder_forward(toks, ctx, params, CFG).logits.data
        for t in range(1, 5):
            mutated = toks.copy()
            mutated[t] = (mutated[t] + 3) % CFG.vocab_size
            got = decoder_forward(mutated, ctx, params, CFG).logits.data
            assert np.array_equal(base[:t], got[:t]), f"position {t} leaked"
            assert not np.array_equal(base[t], got[t])

    def test_prefix_consistency(self):
        params, ctx = _setup()
        toks = np.array([1, 2, 3, 4])
        full = decoder_forward(toks, ctx, params, CFG).logits.data
        part = decoder_forward(toks[:2], ctx, params, CFG).logits.data
        assert np.array_equal(full[:2], part)

    def test_context_dependence(self):
        params, ctx_a = _setup()
        _, ctx_b = _setup(seed=9)
        toks = np.array([1, 2])
        a = decoder_forward(toks, ctx_a, params, CFG).logits.data
        b = decoder_forward(toks, ctx_b, params, CFG).logits.data
        assert not np.allclose(a, b, atol=1e-9)

    def test_invalid_context_ignored_bitwise(self):
        # 4 valid of 6: logits must be bitwise identical no matter what the
        # masked rows contain.
        params, ctx = _setup(n_ctx=6, n_valid=4)
        toks = np.array([1, 2, 3])
        base = decoder_forward(toks, ctx, params, CFG).logits.data
        junk = ctx.memory.data.copy()
        junk[4:] = 1e6
        ctx2 = FusedContext(memory=Tensor(junk, dtype="f64"), valid=ctx.valid,
                            n_images=1, n_slots=1, n_patches=6)
        got = decoder_forward(toks, ctx2, params, CFG).logits.data
        assert np.array_equal(base, got)

    def test_attention_trace(self):
        params, ctx = _setup(n_ctx=6, n_valid=4)
        out = decoder_forward(np.array([1, 2]), ctx, params, CFG, want_trace=True)
        assert len(out.attention_trace) == CFG.layers
        for w in out.attention_trace:
            assert w.data.shape == (CFG.heads, 2, 6)
            assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)
            assert np.all(w.data[:, :, 4:] == 0.0)

    def test_empty_sequence_rejected(self):
        params, ctx = _setup()
        with pytest.raises(ValueError):
            decoder_forward(np.array([], dtype=np.int64), ctx, params, CFG)

    def test_too_long_rejected(self):
        params, ctx = _setup()
        with pytest.raises(ValueError, match="exceeds"):
            decoder_forward(np.arange(13) % 40, ctx, params, CFG)

    def test_position_sensitivity(self):
        params, ctx = _setup()
        a = decoder_forward(np.array([3, 3]), ctx, params, CFG).logits.data
        assert not np.allclose(a[0], a[1], atol=1e-9)
