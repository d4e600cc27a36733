import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from endoreport import tensor as T
from endoreport.tensor import ParamStore, Tensor, grad_check


class TestSoftmaxMasked:
    def test_single_unmasked_entry(self):
        out = T.softmax_masked(Tensor([5.0, -3.0]), np.array([False, True]))
        assert out.data.tolist() == [0.0, 1.0]

    def test_symmetry(self):
        out = T.softmax_masked(Tensor([2.5, 2.5, 2.5]), np.array([True] * 3))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-12)

    def test_closed_form(self):
        out = T.softmax_masked(Tensor([math.log(2.0), 0.0]), np.array([True, True]))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], rtol=1e-12)

    def test_all_masked_row_raises(self):
        with pytest.raises(ValueError, match="degenerate attention row"):
            T.softmax_masked(Tensor([[1.0, 2.0], [3.0, 4.0]]),
                             np.array([[True, True], [False, False]]))

    def test_masked_entries_exactly_zero(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(0, 5, (8, 8)))
        mask = rng.random((8, 8)) < 0.6
        mask[:, 0] = True
        out = T.softmax_masked(x, mask).data
        assert (out[~mask] == 0.0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    @given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["f32", "f64"]))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, seed, dtype):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(0, 3, (4, 6)), dtype=dtype)
        mask = rng.random((4, 6)) < 0.5
        mask[:, 2] = True
        out = T.softmax_masked(x, mask).data
        tol = 1e-6 if dtype == "f32" else 1e-12
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=tol)
        assert (out >= 0).all() and (out <= 1).all()


class TestLayerNorm:
    def test_constant_row_zero(self):
        out = T.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor([1.0] * 3), Tensor([0.0] * 3))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_closed_form(self):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]),
                           eps=1e-14)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-6)

    def test_constant_row_bias(self):
        out = T.layer_norm(Tensor([[7.0, 7.0]]), Tensor([2.0, 2.0]), Tensor([0.5, 0.5]))
        np.testing.assert_allclose(out.data, 0.5, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.layer_norm(Tensor([[1.0, 2.0]]), Tensor([1.0]), Tensor([0.0, 0.0]))


class TestCrossEntropy:
    def test_uniform_logits(self):
        v = 11
        out = T.cross_entropy(Tensor(np.zeros((3, v))), [0, 5, 10])
        np.testing.assert_allclose(out.item(), math.log(v), rtol=1e-12)

    def test_dominant_target_logit(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 50.0
        assert T.cross_entropy(Tensor(logits), [2]).item() < 1e-12

    def test_two_way_tie(self):
        out = T.cross_entropy(Tensor([[0.0, 0.0]]), [0])
        np.testing.assert_allclose(out.item(), math.log(2.0), rtol=1e-12)

    def test_out_of_range_target(self):
        with pytest.raises(ValueError, match="out of range"):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_positive_asymptote(self):
        x = 12.0
        np.testing.assert_allclose(T.gelu(Tensor([x])).data[0], x, rtol=1e-12)

    def test_erf_value_at_one(self):
        np.testing.assert_allclose(T.gelu(Tensor([1.0])).data[0], 0.841345, atol=1e-6)

    def test_monotone_on_grid(self):
        xs = np.linspace(-0.5, 5, 200)
        ys = T.gelu(Tensor(xs)).data
        assert (np.diff(ys) > 0).all()


class TestBackward:
    def test_sum_grad_ones(self):
        ps = ParamStore("f64")
        w = ps.add("w", np.array([1.0, 2.0, 3.0]))
        T.sum_all(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones(3))

    def test_square_sum_grad(self):
        ps = ParamStore("f64")
        w = ps.add("w", np.array([1.5, -2.0]))
        T.sum_all(T.mul(w, w)).backward()
        np.testing.assert_allclose(w.grad, 2 * w.data, rtol=1e-15)

    def test_shared_subexpression_accumulates(self):
        ps = ParamStore("f64")
        w = ps.add("w", np.array([2.0]))
        y = T.mul(w, w)
        T.sum_all(y + y).backward()
        np.testing.assert_allclose(w.grad, [8.0])


class TestGradCheck:
    def test_quadratic(self):
        ps = ParamStore("f64")
        ps.add("x", np.array([3.0]))
        err = grad_check(lambda p: T.sum_all(T.mul(p["x"], p["x"])), ps, h=1e-5,
                         sample_count=5)
        assert err < 1e-8

    def test_layer_norm_params(self):
        rng = np.random.default_rng(3)
        ps = ParamStore("f64")
        ps.add("x", rng.normal(0, 1, (4, 8)))
        ps.add("g", rng.normal(1, 0.1, 8))
        ps.add("b", rng.normal(0, 0.1, 8))

        def fn(p):
            return T.mean_all(T.mul(T.layer_norm(p["x"], p["g"], p["b"]), p["x"]))

        assert grad_check(fn, ps, sample_count=60) < 1e-6

    def test_requires_f64(self):
        ps = ParamStore("f32")
        ps.add("x", np.array([1.0]))
        with pytest.raises(ValueError, match="f64"):
            grad_check(lambda p: T.sum_all(p["x"]), ps)

    def test_rejects_nonfinite_loss(self):
        ps = ParamStore("f64")
        ps.add("x", np.array([1.0]))
        with pytest.raises(ValueError, match="non-finite"):
            grad_check(lambda p: T.sum_all(p["x"] * math.inf), ps)


class TestParamStore:
    def test_lexicographic_iteration(self):
        ps = ParamStore("f32")
        for name in ["zeta", "alpha", "mid"]:
            ps.add(name, np.zeros(2))
        assert ps.names() == ["alpha", "mid", "zeta"]

    def test_duplicate_name_rejected(self):
        ps = ParamStore("f32")
        ps.add("w", np.zeros(1))
        with pytest.raises(ValueError, match="duplicate"):
            ps.add("w", np.zeros(1))


def test_forward_determinism():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(0, 1, (6, 6)), dtype="f32")
    mask = np.ones((6, 6), dtype=bool)
    a = T.softmax_masked(T.matmul(x, x), mask).data
    b = T.softmax_masked(T.matmul(x, x), mask).data
    assert np.array_equal(a, b)
