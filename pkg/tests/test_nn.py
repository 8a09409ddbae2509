import math
import struct

import numpy as np
import pytest

from pcacgan import nn
from pcacgan.errors import DetachedLoss, ShapeMismatch, VersionMismatch
from pcacgan.selftest import gradient_cases


def _cases():
    return gradient_cases(np.random.default_rng(2))


CASE_NAMES = [c[0] for c in _cases()]


class TestTape:
    def test_simple_gradient(self):
        t = nn.Tape()
        x = t.variable(np.array([1.0, -2.0, 3.0]))
        loss = nn.sum_all(nn.mul(x, x))
        t.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_loss_on_other_tape(self):
        t1, t2 = nn.Tape(), nn.Tape()
        loss = nn.sum_all(t1.variable(np.ones(3)))
        with pytest.raises(DetachedLoss):
            t2.backward(loss)

    def test_mixing_tapes(self):
        t1, t2 = nn.Tape(), nn.Tape()
        with pytest.raises(DetachedLoss):
            nn.add(t1.variable(np.ones(2)), t2.variable(np.ones(2)))

    def test_non_scalar_loss(self):
        t = nn.Tape()
        with pytest.raises(ShapeMismatch):
            t.backward(t.variable(np.ones(3)))

    def test_param_grads_accumulate(self):
        store = nn.ParamStore()
        p = store.add("w", [2.0])
        for _ in range(2):
            t = nn.Tape()
            t.backward(nn.sum_all(nn.square(t.param(p))))
        np.testing.assert_allclose(p.grad, [8.0])
        store.zero_grad()
        assert p.grad[0] == 0.0

    def test_param_node_reused(self):
        store = nn.ParamStore()
        p = store.add("w", [3.0])
        t = nn.Tape()
        a, b = t.param(p), t.param(p)
        assert a is b
        t.backward(nn.sum_all(nn.mul(a, b)))
        np.testing.assert_allclose(p.grad, [6.0])


class TestGradients:
    @pytest.mark.parametrize("name", CASE_NAMES)
    def test_finite_differences(self, name):
        rng = np.random.default_rng(2)
        cases = {c[0]: c for c in gradient_cases(rng)}
        _, fn, values = cases[name]
        failures = nn.gradient_check(fn, values, np.random.default_rng(7), n_samples=100)
        assert failures == []

    def test_straight_through_round(self):
        t = nn.Tape()
        x = t.variable(np.array([2.4, 2.5, 3.5, -0.5]))
        q = nn.ste_round(x)
        np.testing.assert_array_equal(q.value, [2.0, 2.0, 4.0, -0.0])
        t.backward(nn.sum_all(q))
        np.testing.assert_array_equal(x.grad, np.ones(4))

    def test_dropout_eval_is_identity(self):
        t = nn.Tape(training=False)
        x = t.variable(np.ones((5, 5)))
        assert nn.dropout(x, 0.3) is x

    def test_dropout_training_scales(self):
        t = nn.Tape(training=True, rng=np.random.default_rng(0))
        out = nn.dropout(t.variable(np.ones((200, 50))), 0.3)
        kept = out.value[out.value > 0]
        np.testing.assert_allclose(kept, 1 / 0.7)
        assert abs((out.value == 0).mean() - 0.3) < 0.02


class TestLosses:
    def test_bce_half(self):
        t = nn.Tape()
        assert float(nn.bce(t.variable([0.5]), [1.0]).value) == math.log(2.0)

    def test_bce_clamps(self):
        t = nn.Tape()
        v = float(nn.bce(t.variable([0.0]), [1.0]).value)
        assert v == pytest.approx(-math.log(1e-7))

    def test_laplace_zero_symbol(self):
        t = nn.Tape()
        bits = nn.laplace_bits(t.variable([[0.0]]), t.variable([1.0]))
        p = 1 - math.exp(-0.5)
        assert float(bits.value[0, 0]) == pytest.approx(-math.log2(p), rel=1e-12)
        assert float(bits.value[0, 0]) == pytest.approx(1.346, abs=1e-3)

    def test_laplace_probabilities_sum_to_one(self):
        for b in (0.05, 1.0, 7.5):
            k = np.arange(-4000, 4001)
            assert abs(nn.laplace_bin_probability(k, b).sum() - 1.0) < 1e-9

    def test_laplace_bits_additive(self):
        t = nn.Tape()
        x = np.array([[1.0, -2.0], [0.0, 3.0]])
        s = t.variable([1.0, 2.0])
        one = float(nn.sum_all(nn.laplace_bits(t.variable(x), s)).value)
        two = float(nn.sum_all(nn.laplace_bits(t.variable(np.vstack([x, x])), s)).value)
        assert two == pytest.approx(2 * one, rel=1e-12)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        store = nn.ParamStore()
        p = store.add("w", [1.0, -1.0])
        p.grad[...] = [0.3, -5.0]
        state = nn.OptimizerState(lr=0.01)
        nn.adam_step(store, state)
        np.testing.assert_allclose(p.value, [0.99, -0.99], atol=1e-6)
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])

    def test_minimizes_quadratic(self):
        store = nn.ParamStore()
        p = store.add("w", [5.0, -3.0])
        state = nn.OptimizerState(lr=0.1)
        for _ in range(500):
            t = nn.Tape()
            t.backward(nn.sum_all(nn.square(nn.add_scalar(t.param(p), -1.0))))
            nn.adam_step(store, state)
        np.testing.assert_allclose(p.value, [1.0, 1.0], atol=1e-2)

    def test_only_listed_params_move(self):
        store = nn.ParamStore()
        a, b = store.add("a", [1.0]), store.add("b", [1.0])
        a.grad[...] = 1.0
        b.grad[...] = 1.0
        nn.adam_step(store, nn.OptimizerState(), params=[a])
        assert b.value[0] == 1.0 and a.value[0] != 1.0


class TestCheckpoint:
    def _store(self):
        rng = np.random.default_rng(0)
        s = nn.ParamStore()
        s.add("enc.w", rng.standard_normal((27, 3, 4)))
        s.add("enc.b", rng.standard_normal(4))
        s.add("scalar", 2.5)
        return s

    def test_round_trip(self, tmp_path):
        s = self._store()
        nn.save_checkpoint(s, tmp_path / "m.ckpt")
        back = nn.load_checkpoint(tmp_path / "m.ckpt")
        assert back.equals(s)
        assert back.digest() == s.digest()

    def test_layout(self, tmp_path):
        s = nn.ParamStore()
        s.add("ab", [1.0, 2.0])
        nn.save_checkpoint(s, tmp_path / "x.ckpt")
        data = (tmp_path / "x.ckpt").read_bytes()
        expected = (b"PCGN" + struct.pack("<HI", 1, 1) + struct.pack("<H", 2) + b"ab"
                    + struct.pack("<BI", 1, 2) + struct.pack("<2f", 1.0, 2.0))
        assert data == expected

    def test_truncation_detected_everywhere(self, tmp_path):
        s = self._store()
        nn.save_checkpoint(s, tmp_path / "m.ckpt")
        data = (tmp_path / "m.ckpt").read_bytes()
        for cut in range(0, len(data), 7):
            (tmp_path / "t.ckpt").write_bytes(data[:cut])
            with pytest.raises(VersionMismatch):
                nn.load_checkpoint(tmp_path / "t.ckpt")

    def test_wrong_version(self, tmp_path):
        (tmp_path / "v.ckpt").write_bytes(b"PCGN" + struct.pack("<HI", 9, 0))
        with pytest.raises(VersionMismatch):
            nn.load_checkpoint(tmp_path / "v.ckpt")

    def test_shape_mismatch_names_parameter(self, tmp_path):
        s = self._store()
        nn.save_checkpoint(s, tmp_path / "m.ckpt")
        other = nn.ParamStore()
        other.add("enc.w", np.zeros((27, 3, 5)))
        other.add("enc.b", np.zeros(4))
        other.add("scalar", 0.0)
        with pytest.raises(ShapeMismatch, match="enc.w"):
            nn.load_checkpoint(tmp_path / "m.ckpt", into=other)

    def test_load_into(self, tmp_path):
        s = self._store()
        nn.save_checkpoint(s, tmp_path / "m.ckpt")
        target = s.copy()
        for p in target:
            p.value[...] = 0
        nn.load_checkpoint(tmp_path / "m.ckpt", into=target)
        assert target.equals(s)
