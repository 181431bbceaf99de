import contextlib
import math

import numpy as np
import pytest

from fdcheck import RTOL, check_grads
from niwf.analysis import gating_entropy
from niwf.errors import ContractError
from niwf.field import EXPANSION_LOGIT, WeightField, field_forward, gate_topk
from niwf.rng import Rng
from niwf.tensor import Tensor, backward, float64_mode, tsum


def make_field(**kw):
    args = dict(coord_dim=4, hidden=8, n_layers=2, n_bases=5, rng=Rng(0))
    args.update(kw)
    return WeightField(**args)


def test_zero_weights_give_zero_logits():
    f = make_field()
    for t in f.params.values():
        t.data[:] = 0
    assert not field_forward(f, np.random.default_rng(0).normal(size=(3, 4))).data.any()


def test_shapes():
    f = WeightField(64, 256, 32, 16, Rng(0))
    assert field_forward(f, np.zeros((2, 64))).shape == (2, 32, 16)
    with pytest.raises(ContractError):
        field_forward(make_field(), np.zeros((2, 3)))


def test_equal_rows_equal_logits():
    z = np.random.default_rng(1).normal(size=(1, 4))
    out = field_forward(make_field(), np.concatenate([z, z])).data
    assert out[0].tobytes() == out[1].tobytes()


def test_shared_layers_broadcast():
    out = field_forward(make_field(share_layers=True), np.random.default_rng(2).normal(size=(3, 4))).data
    assert np.array_equal(out[:, 0], out[:, 1])


class TestGate:
    def test_example(self):
        d = gate_topk(Tensor(np.array([[[2.0, 1.0, 0.0, -1.0]]])), 2)[0]
        assert d.indices.tolist() == [[0, 1]]
        np.testing.assert_allclose(d.weights.data, [[0.7311, 0.2689]], atol=1e-4)

    def test_uniform(self):
        d = gate_topk(Tensor(np.zeros((1, 1, 8))), 8)[0]
        assert d.indices.tolist() == [list(range(8))]
        np.testing.assert_allclose(d.weights.data, 1 / 8)
        assert gating_entropy(d.weights)[0] == pytest.approx(math.log(8))

    @pytest.mark.parametrize("c,wide", [(-7.0, False), (0.5, False), (100.0, True)])
    def test_shift_invariance(self, c, wide):
        x = np.random.default_rng(3).normal(size=(4, 3, 6))
        dtype = np.float64 if wide else np.float32
        with float64_mode() if wide else contextlib.nullcontext():
            pairs = zip(gate_topk(Tensor(x.astype(dtype)), 3), gate_topk(Tensor((x + c).astype(dtype)), 3))
            for a, b in pairs:
                assert np.array_equal(a.indices, b.indices)
                np.testing.assert_allclose(a.weights.data, b.weights.data, atol=1e-6)

    def test_layer_permutation(self):
        x = np.random.default_rng(4).normal(size=(2, 3, 5))
        perm = [2, 0, 1]
        d, dp = gate_topk(Tensor(x), 2), gate_topk(Tensor(x[:, perm]), 2)
        for i, p in enumerate(perm):
            assert np.array_equal(dp[i].indices, d[p].indices)

    def test_gradient_reaches_only_selected_logits(self):
        with float64_mode():
            x = Tensor(np.random.default_rng(5).normal(size=(2, 2, 6)), requires_grad=True)
            w = np.random.default_rng(6).normal(size=(2, 3))

            def loss():
                return sum((tsum(d.weights * w) for d in gate_topk(x, 3)), Tensor(0.0))

            backward(loss())
            for layer, d in enumerate(gate_topk(x, 3)):
                off = np.ones((2, 6), bool)
                off[np.arange(2)[:, None], d.indices] = False
                assert not x.grad[:, layer][off].any()
            assert check_grads(loss, [x]) < RTOL


def test_field_gradients():
    with float64_mode():
        f = make_field()
        z = Tensor(np.random.default_rng(7).normal(size=(3, 4)), requires_grad=True)
        w = np.random.default_rng(8).normal(size=(3, 2, 5))
        assert check_grads(lambda: tsum(field_forward(f, z) * w), [z, *f.params.values()]) < RTOL


def test_expand_keeps_old_logits_and_new_columns_unselected():
    f = make_field()
    z = np.random.default_rng(9).normal(size=(3, 4))
    before = field_forward(f, z).data
    f.expand(3)
    after = field_forward(f, z).data
    assert after.shape == (3, 2, 8)
    np.testing.assert_array_equal(after[..., :5], before)
    np.testing.assert_allclose(after[..., 5:], EXPANSION_LOGIT)
    for d in gate_topk(Tensor(after), 2):
        assert (d.indices < 5).all()
