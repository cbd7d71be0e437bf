import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phenokit.objectives import (
    DEFAULT_WEIGHTS,
    SWEEP_OPTIMUM_WEIGHTS,
    LossWeights,
    loss_cls,
    loss_con,
    loss_mse,
    loss_total,
)
from phenokit.tensor import Tape, Tensor, grad_check, make_rng, softmax_rows


class TestLossCls:
    def test_confident_correct(self):
        logits = np.full((2, 3), -50.0)
        logits[0, 1] = logits[1, 2] = 50.0
        assert loss_cls(Tensor(logits), [1, 2]).item() < 1e-30

    def test_uniform_is_ln_n(self):
        assert loss_cls(Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 0]).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = make_rng(0)
        logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        labels = [2, 0, 3]
        with Tape() as tape:
            loss = loss_cls(logits, labels)
        tape.backward(loss)
        expected = softmax_rows(Tensor(logits.data)).data
        expected[np.arange(3), labels] -= 1
        np.testing.assert_allclose(logits.grad, expected / 3, atol=1e-12)
        assert grad_check(lambda t: loss_cls(t, labels), Tensor(rng.normal(size=(3, 4)))) <= 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="range"):
            loss_cls(Tensor(np.zeros((1, 3))), [3])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31))
    def test_nonnegative_and_ln_n_iff_constant(self, b, n, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, n, size=b)
        logits = rng.normal(size=(b, n))
        assert loss_cls(Tensor(logits), labels).item() >= 0
        const = np.repeat(rng.normal(size=(b, 1)), n, axis=1)
        assert loss_cls(Tensor(const), labels).item() == pytest.approx(math.log(n), abs=1e-12)


class TestLossMse:
    def test_equal(self):
        z = make_rng(0).normal(size=(3, 4))
        assert loss_mse(Tensor(z), Tensor(z)).item() == 0.0

    def test_hand_value(self):
        assert loss_mse(Tensor(np.array([[3.0, 2.0]])), Tensor(np.array([[1.0, 2.0]]))).item() == 2.0

    def test_homogeneity(self):
        rng = make_rng(1)
        z, zh = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        base = loss_mse(Tensor(zh), Tensor(z)).item()
        scaled = loss_mse(Tensor(z + 3.0 * (zh - z)), Tensor(z)).item()
        assert scaled == pytest.approx(9.0 * base, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_mse(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_gradient(self):
        z = Tensor(make_rng(2).normal(size=(3, 4)))
        assert grad_check(lambda t: loss_mse(t, z), Tensor(make_rng(3).normal(size=(3, 4)))) <= 1e-6


class TestLossCon:
    def test_single_row_is_zero(self):
        rng = make_rng(0)
        assert loss_con(Tensor(rng.normal(size=(1, 5))), Tensor(rng.normal(size=(1, 5)))).item() == 0.0

    def test_equal_dot_products_is_ln_b(self):
        # every prediction orthogonal to every target => all scores 0
        zh = np.zeros((4, 8))
        zh[:, :4] = make_rng(1).normal(size=(4, 4))
        z = np.zeros((4, 8))
        z[:, 4:] = make_rng(2).normal(size=(4, 4))
        assert loss_con(Tensor(zh), Tensor(z), tau=0.5).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_dominant_diagonal(self):
        z = np.eye(4) * 30.0
        assert loss_con(Tensor(z), Tensor(z), tau=1.0).item() < 1e-10

    def test_tau(self):
        with pytest.raises(ValueError):
            loss_con(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), tau=0.0)

    def test_row_shift_invariance(self):
        # adding c * u to target rows where zh_i . u is constant per row shifts
        # every score of row i by the same amount
        rng = make_rng(3)
        zh = rng.normal(size=(3, 4))
        z = rng.normal(size=(3, 4))
        zh_ext = np.concatenate([zh, np.ones((3, 1))], axis=1)
        z_ext = np.concatenate([z, np.zeros((3, 1))], axis=1)
        z_shift = np.concatenate([z, np.full((3, 1), 7.5)], axis=1)
        a = loss_con(Tensor(zh_ext), Tensor(z_ext)).item()
        b = loss_con(Tensor(zh_ext), Tensor(z_shift)).item()
        assert a == pytest.approx(b, abs=1e-12)

    @pytest.mark.parametrize("normalize", [False, True])
    def test_gradient(self, normalize):
        z = Tensor(make_rng(4).normal(size=(4, 3)))
        x = Tensor(make_rng(5).normal(size=(4, 3)))
        assert grad_check(lambda t: loss_con(t, z, 0.7, normalize), x) <= 1e-6

    def test_brute_force_value(self):
        rng = make_rng(6)
        zh, z = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        tau = 0.3
        total = 0.0
        for i in range(3):
            num = math.exp(zh[i] @ z[i] / tau)
            den = sum(math.exp(zh[i] @ z[j] / tau) for j in range(3))
            total += math.log(num / den)
        assert loss_con(Tensor(zh), Tensor(z), tau).item() == pytest.approx(-total / 3, abs=1e-12)


class TestLossTotal:
    def test_default_weights(self):
        assert (DEFAULT_WEIGHTS.lambda1, DEFAULT_WEIGHTS.lambda2, DEFAULT_WEIGHTS.lambda3) == (0.1, 100, 1)
        assert loss_total(1.0, 0.01, 0.5, DEFAULT_WEIGHTS) == pytest.approx(1.6, abs=1e-12)

    def test_zero_weights(self):
        assert loss_total(3.0, 2.0, 1.0, LossWeights(0, 0, 0)) == 0.0

    def test_sweep_optimum_preset(self):
        w = SWEEP_OPTIMUM_WEIGHTS
        assert (w.lambda1, w.lambda2, w.lambda3) == (1.0, 1000.0, 10.0)

    @settings(max_examples=40, deadline=None)
    @given(*[st.floats(0, 100) for _ in range(6)])
    def test_linearity(self, l1, l2, l3, a, b, c):
        w = LossWeights(l1, l2, l3)
        assert loss_total(a, b, c, w) == pytest.approx(l1 * a + l2 * b + l3 * c, rel=1e-12, abs=1e-12)

    def test_tensor_inputs(self):
        out = loss_total(Tensor(np.array(1.0)), Tensor(np.array(0.01)), Tensor(np.array(0.5)))
        assert out.item() == pytest.approx(1.6)

    @pytest.mark.parametrize("kw", [dict(tau=0), dict(lambda1=-1), dict(lambda2=float("inf"))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossWeights(**kw)
