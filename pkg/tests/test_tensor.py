import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import RTOL, check_grads
from niwf.errors import ContractError, DimensionError
from niwf.tensor import (Tensor, activation, backward, concat, cross_entropy_nll, float64_mode,
                         layer_norm, matmul, mean_pool, no_grad, relu, rms_norm, softmax, sqrt,
                         take, take_along, top_k, tsum)


def leaf(a):
    return Tensor(np.asarray(a), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        m = np.array([[1, 2], [3, 4]], dtype=np.float32)
        assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_hand_expansion(self):
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        assert out.data.tolist() == [[19, 22], [43, 50]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast(self):
        a = np.random.default_rng(0).normal(size=(3, 2, 4)).astype(np.float32)
        b = np.random.default_rng(1).normal(size=(1, 4, 5)).astype(np.float32)
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-6)

    def test_grads(self):
        with float64_mode():
            rng = np.random.default_rng(0)
            a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 2)))
            assert check_grads(lambda: tsum(matmul(a, b) ** 2), [a, b]) < RTOL


class TestActivations:
    def test_values(self):
        assert activation(Tensor(0.0), "gelu").item() == 0.0
        assert activation(Tensor(1.0), "gelu").item() == pytest.approx(0.8413, abs=1e-4)
        assert activation(Tensor(0.0), "tanh").item() == 0.0
        assert activation(Tensor(0.0), "sigmoid").item() == 0.5

    def test_gelu_is_exact_erf_form(self):
        x = 1.5
        exact = 0.5 * x * (1 + math.erf(x / math.sqrt(2)))
        assert activation(Tensor(x), "gelu").item() == pytest.approx(exact, rel=1e-6)

    @pytest.mark.parametrize("kind", ["gelu", "silu", "tanh", "sigmoid"])
    def test_grads(self, kind):
        with float64_mode():
            x = leaf(np.linspace(-3, 3, 13))
            assert check_grads(lambda: tsum(activation(x, kind) * np.arange(13.0)), [x]) < RTOL

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            activation(Tensor(1.0), "swish2")


class TestSoftmax:
    def test_examples(self):
        assert softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]
        np.testing.assert_allclose(softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-6)
        np.testing.assert_allclose(softmax(Tensor([2.0, 1.0])).data, [0.7311, 0.2689], atol=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, (3, 5), elements=st.floats(-50, 50, width=32)))
    def test_rows_sum_to_one(self, x):
        out = softmax(Tensor(x), axis=-1).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)

    def test_grads(self):
        with float64_mode():
            x = leaf(np.random.default_rng(2).normal(size=(2, 5)))
            w = np.random.default_rng(3).normal(size=(2, 5))
            assert check_grads(lambda: tsum(softmax(x) * w), [x]) < RTOL


class TestNorms:
    def test_layer_norm_examples(self):
        assert np.allclose(layer_norm(Tensor([3.0, 3.0, 3.0])).data, 0.0)
        np.testing.assert_allclose(layer_norm(Tensor([1.0, -1.0]), eps=1e-12).data, [1, -1], atol=1e-6)
        x = np.random.default_rng(0).normal(size=(4, 16)).astype(np.float32)
        assert np.abs(layer_norm(Tensor(x)).data.mean(-1)).max() < 1e-6

    def test_rms_norm_examples(self):
        np.testing.assert_allclose(rms_norm(Tensor([2.0, 2.0]), eps=1e-12).data, [1, 1], rtol=1e-6)
        np.testing.assert_allclose(rms_norm(Tensor([3.0, 4.0]), eps=1e-12).data, [0.8485, 1.1314], atol=1e-4)
        assert np.array_equal(rms_norm(Tensor([3.0, 4.0]), Tensor([0.0, 0.0])).data, [0.0, 0.0])

    def test_grads(self):
        with float64_mode():
            rng = np.random.default_rng(4)
            x, g, b = leaf(rng.normal(size=(3, 6))), leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
            w = rng.normal(size=(3, 6))
            assert check_grads(lambda: tsum(layer_norm(x, g, b) * w), [x, g, b]) < RTOL
            assert check_grads(lambda: tsum(rms_norm(x, g) * w), [x, g]) < RTOL


class TestTopK:
    def test_examples(self):
        v, i = top_k(Tensor([3.0, 1.0, 2.0]), 2)
        assert v.data.tolist() == [3, 2] and i.tolist() == [0, 2]
        _, i = top_k(Tensor(np.zeros(4)), 2)
        assert i.tolist() == [0, 1]
        x = np.array([0.3, -1.0, 2.0, 0.5])
        _, i = top_k(Tensor(x), 4)
        assert i.tolist() == list(np.argsort(-x))

    def test_k_out_of_range(self):
        with pytest.raises(ContractError):
            top_k(Tensor(np.zeros(3)), 4)
        with pytest.raises(ContractError):
            top_k(Tensor(np.zeros(3)), 0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-3, 3), min_size=2, max_size=8), st.data())
    def test_selects_largest_with_low_index_ties(self, vals, data):
        k = data.draw(st.integers(1, len(vals)))
        _, idx = top_k(Tensor(np.array(vals, dtype=np.float32)), k)
        expected = sorted(range(len(vals)), key=lambda j: (-vals[j], j))[:k]
        assert idx.tolist() == expected

    def test_gradient_only_through_selected(self):
        x = leaf([1.0, 5.0, 3.0])
        v, _ = top_k(x, 2)
        backward(tsum(v * Tensor([2.0, 7.0])))
        assert x.grad.tolist() == [0.0, 2.0, 7.0]


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy_nll(Tensor(np.zeros((1, 1, 4))), np.zeros((1, 1), int)).item() == pytest.approx(math.log(4), abs=1e-6)
        assert cross_entropy_nll(Tensor(np.zeros((2, 3, 64))), np.ones((2, 3), int)).item() == pytest.approx(math.log(64), abs=1e-6)

    def test_margin_limit(self):
        logits = np.zeros((1, 1, 4), dtype=np.float32)
        logits[0, 0, 2] = 60.0
        assert cross_entropy_nll(Tensor(logits), np.full((1, 1), 2)).item() < 1e-20

    def test_mask_excludes_position(self):
        logits = np.array([[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0]]])
        t = np.array([[0, 2]])
        got = cross_entropy_nll(Tensor(logits), t, np.array([[True, False]])).item()
        single = -(1.0 - math.log(math.e + 2))
        assert got == pytest.approx(single, rel=1e-6)

    def test_empty_mask(self):
        with pytest.raises(ContractError):
            cross_entropy_nll(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))

    def test_grads(self):
        with float64_mode():
            rng = np.random.default_rng(5)
            x = leaf(rng.normal(size=(2, 3, 5)))
            t = rng.integers(0, 5, (2, 3))
            m = np.array([[1, 0, 1], [1, 1, 0]], bool)
            assert check_grads(lambda: cross_entropy_nll(x, t, m), [x]) < RTOL


class TestMeanPool:
    def test_examples(self):
        assert np.allclose(mean_pool(Tensor(np.full((1, 3, 2), 7.0))).data, 7.0)
        assert mean_pool(Tensor([[[1.0], [3.0]]])).data.tolist() == [[2.0]]

    def test_gradient_is_one_over_T(self):
        with float64_mode():
            x = leaf(np.random.default_rng(0).normal(size=(2, 4, 3)))
            backward(tsum(mean_pool(x)))
            assert np.allclose(x.grad, 0.25)
            assert check_grads(lambda: tsum(mean_pool(x)), [x]) < RTOL

    def test_mask(self):
        x = Tensor([[[1.0], [3.0], [100.0]]])
        assert mean_pool(x, np.array([[1, 1, 0]], bool)).data.tolist() == [[2.0]]


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        backward(x * x)
        assert x.grad == 6.0

    def test_linear_sum_matches_outer_structure(self):
        with float64_mode():
            rng = np.random.default_rng(6)
            A, x = leaf(rng.normal(size=(3, 4))), rng.normal(size=(4, 1))
            backward(tsum(matmul(A, Tensor(x))))
            assert np.allclose(A.grad, np.outer(np.ones(3), x[:, 0]))
            assert check_grads(lambda: tsum(matmul(A, Tensor(x))), [A]) < RTOL

    def test_frozen_leaf_gets_nothing(self):
        a, b = leaf([1.0, 2.0]), Tensor([3.0, 4.0])
        backward(tsum(a * b))
        assert b.grad is None and a.grad.tolist() == [3.0, 4.0]

    def test_non_scalar(self):
        with pytest.raises(ContractError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_detach_severs(self):
        x = leaf(2.0)
        y = (x * x).detach() * x
        backward(y)
        assert x.grad == 4.0

    def test_fan_out_accumulates(self):
        x = leaf(1.5)
        backward(x * 2.0 + x * 3.0 + x * x)
        assert x.grad == pytest.approx(8.0)

    def test_no_grad_records_nothing(self):
        x = leaf(1.0)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad


def test_misc_op_grads():
    with float64_mode():
        rng = np.random.default_rng(7)
        a = leaf(rng.normal(size=(4, 3)))
        b = leaf(rng.uniform(0.5, 2.0, size=(4, 3)))
        idx = np.array([[0, 2], [1, 1], [2, 0], [0, 0]])
        w = rng.normal(size=(4, 3))

        def f():
            parts = [
                tsum((a / b) * w), tsum(b.log() * w), tsum(a.exp() * w), tsum(sqrt(b) * w),
                tsum(relu(a) * w), tsum(take(a, np.array([3, 0, 3])) ** 2),
                tsum(take_along(a, idx, -1) * 1.7), tsum(concat([a, b], axis=1) ** 2),
                tsum(a.transpose() ** 3), tsum(a.reshape(2, 6)[1] * 2.5), tsum(a.mean(axis=0) ** 2),
            ]
            out = parts[0]
            for p in parts[1:]:
                out = out + p
            return out

        assert check_grads(f, [a, b]) < RTOL


def test_sqrt_zero_gradient_is_zero():
    x = leaf([0.0, 4.0])
    backward(tsum(sqrt(x)))
    assert x.grad.tolist() == [0.0, 0.25]


def test_seeded_determinism():
    from niwf.rng import Rng
    a = Rng(42).child("x").normal((5, 5))
    b = Rng(42).child("x").normal((5, 5))
    assert a.tobytes() == b.tobytes() and a.dtype == np.float32
