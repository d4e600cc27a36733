"""Image preprocessing and encoder tests."""

import numpy as np
import pytest
from PIL import Image

from endoreport.tensor import ParamStore
from endoreport.vision import (EncoderConfig, PAPER_ENCODER, encode_image,
                               init_encoder_params, patchify, preprocess)

TINY = EncoderConfig(image_size=32, patch_size=16, d_model=32, layers=2, heads=2)


def _pre(arr):
    return preprocess(arr, TINY, dtype="f64")


def _params(seed=0, dtype="f64"):
    params = ParamStore(dtype)
    init_encoder_params(params, TINY, np.random.default_rng(seed))
    return params


class TestConfig:
    def test_patch_counts(self):
        assert TINY.n_patches == 4
        assert TINY.grid == 2
        assert PAPER_ENCODER.image_size == 224
        assert PAPER_ENCODER.n_patches == 196

    def test_indivisible_raises(self):
        with pytest.raises(ValueError):
            EncoderConfig(image_size=30, patch_size=16)


class TestPreprocess:
    def test_normalization_constants(self):
        out = _pre(np.full((32, 32, 3), 255, dtype=np.uint8)).pixels
        mean = np.array([0.485, 0.456, 0.406])
        std = np.array([0.229, 0.224, 0.225])
        assert np.allclose(out[0, 0], (1.0 - mean) / std, atol=1e-12)

    def test_zero_image(self):
        out = _pre(np.zeros((32, 32, 3), dtype=np.uint8)).pixels
        expect = -np.array([0.485, 0.456, 0.406]) / np.array([0.229, 0.224, 0.225])
        assert np.allclose(out[5, 7], expect, atol=1e-12)

    def test_resize_applied(self):
        assert _pre(np.zeros((64, 64, 3), dtype=np.uint8)).pixels.shape == (32, 32, 3)

    def test_bad_shape_rejected(self):
        with pytest.raises(ValueError):
            _pre(np.zeros((32, 32), dtype=np.uint8))


class TestPatchify:
    def test_row_major_order(self):
        # mark each 16x16 patch with a distinct constant; patch order must be
        # row-major over the grid.
        img = np.zeros((32, 32, 3), dtype=np.float64)
        for gy in range(2):
            for gx in range(2):
                img[gy * 16:(gy + 1) * 16, gx * 16:(gx + 1) * 16] = gy * 2 + gx
        from endoreport.vision import ImageTensor
        flat = patchify(ImageTensor(img), TINY)
        assert flat.shape == (4, 16 * 16 * 3)
        for k in range(4):
            assert np.all(flat[k] == k)

    def test_pixel_layout_within_patch(self):
        from endoreport.vision import ImageTensor
        img = np.arange(32 * 32 * 3, dtype=np.float64).reshape(32, 32, 3)
        flat = patchify(ImageTensor(img), TINY)
        assert flat[0, 0] == img[0, 0, 0]
        assert flat[0, 3] == img[0, 1, 0]
        assert flat[1, 0] == img[0, 16, 0]
        assert flat[2, 0] == img[16, 0, 0]

    def test_wrong_size_rejected(self):
        from endoreport.vision import ImageTensor
        with pytest.raises(ValueError):
            patchify(ImageTensor(np.zeros((48, 48, 3))), TINY)


class TestEncoder:
    def test_output_shape(self):
        img = _pre(np.random.default_rng(1).integers(0, 256, (32, 32, 3)).astype(np.uint8))
        z = encode_image(img, _params(), TINY).z
        assert z.data.shape == (4, 32)

    def test_position_sensitivity(self):
        params = _params()
        raw = np.random.default_rng(1).integers(0, 256, (32, 32, 3)).astype(np.uint8)
        swapped = raw.copy()
        swapped[:16, :16], swapped[:16, 16:] = raw[:16, 16:].copy(), raw[:16, :16].copy()
        a = encode_image(_pre(raw), params, TINY).z.data
        b = encode_image(_pre(swapped), params, TINY).z.data
        assert not np.allclose(a[0], b[1], atol=1e-6)

    def test_determinism(self):
        params = _params()
        img = _pre(np.random.default_rng(1).integers(0, 256, (32, 32, 3)).astype(np.uint8))
        a = encode_image(img, params, TINY).z.data
        b = encode_image(img, params, TINY).z.data
        assert np.array_equal(a, b)

    def test_final_layer_norm(self):
        img = _pre(np.random.default_rng(1).integers(0, 256, (32, 32, 3)).astype(np.uint8))
        z = encode_image(img, _params(), TINY).z.data
        # untrained gain=1 bias=0 means each token is standardized
        assert np.allclose(z.mean(axis=-1), 0.0, atol=1e-8)
        assert np.allclose(z.var(axis=-1), 1.0, atol=1e-4)

    def test_init_reproducible(self):
        p1, p2 = _params(), _params()
        assert p1.names() == p2.names()
        for (n, a), (_, b) in zip(p1.items(), p2.items()):
            assert np.array_equal(a.data, b.data), n

    def test_geometry_mismatch_rejected(self):
        big = EncoderConfig(image_size=64, patch_size=16, d_model=32, layers=2, heads=2)
        img = preprocess(np.zeros((64, 64, 3), dtype=np.uint8), big, dtype="f64")
        with pytest.raises(ValueError):
            encode_image(img, _params(), big)
