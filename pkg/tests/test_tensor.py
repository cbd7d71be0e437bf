import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phenokit.errors import CheckpointError, NonFiniteError
from phenokit.tensor import (
    Tape,
    Tensor,
    backward,
    conv2d,
    custom_op,
    diff_conv2d,
    gelu,
    grad_check,
    l2_normalize_rows,
    layer_norm,
    linear,
    log_softmax_rows,
    matmul,
    relu,
    softmax_rows,
    tensor_from_bytes,
    tensor_to_bytes,
    batch_norm2d,
    concat,
    dropout,
    make_rng,
    save_tensor,
    load_tensor,
)


def naive_diff_conv(x, w, theta, stride=1, padding=None):
    """Direct summation of sum_i w_i (x_i - theta x_center) with zero padding."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2 if padding is None else padding
    xp = np.zeros((b, c, h + 2 * p, wd + 2 * p))
    xp[:, :, p:p + h, p:p + wd] = x
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    total = 0.0
                    for ch in range(c):
                        centre = xp[n, ch, i * stride + k // 2, j * stride + k // 2]
                        for u in range(k):
                            for v in range(k):
                                pix = xp[n, ch, i * stride + u, j * stride + v]
                                total += w[oc, ch, u, v] * (pix - theta * centre)
                    out[n, oc, i, j] = total
    return out


class TestDiffConv:
    def test_worked_patch(self):
        x = Tensor(np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = diff_conv2d(x, w, 0.5, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == pytest.approx(22.5, abs=1e-12)

    def test_theta_zero_is_standard_conv(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 3, 6, 5)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)))
        assert np.array_equal(diff_conv2d(x, w, 0.0).data, conv2d(x, w).data)
        np.testing.assert_allclose(conv2d(x, w).data, naive_diff_conv(x.data, w.data, 0.0), atol=1e-12)

    def test_constant_input_theta_one_valid_region_is_zero(self):
        x = Tensor(np.full((1, 2, 5, 5), 3.25))
        w = Tensor(make_rng(0).normal(size=(3, 2, 3, 3)))
        out = diff_conv2d(x, w, 1.0, padding=0)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,k", [(1, None, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5), (3, 0, 3)])
    def test_matches_direct_summation(self, stride, padding, k):
        rng = np.random.default_rng(stride * 10 + k)
        x = rng.normal(size=(2, 2, 7, 6))
        w = rng.normal(size=(3, 2, k, k))
        for theta in (0.0, 0.3, 0.7, 1.0):
            got = diff_conv2d(Tensor(x), Tensor(w), theta, stride, padding).data
            np.testing.assert_allclose(got, naive_diff_conv(x, w, theta, stride, padding), atol=1e-11)

    def test_linear_in_weight(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
        w1 = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        w2 = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        a, b = 0.75, -1.5
        lhs = diff_conv2d(x, Tensor(a * w1 + b * w2), 0.7).data
        rhs = a * diff_conv2d(x, Tensor(w1), 0.7).data + b * diff_conv2d(x, Tensor(w2), 0.7).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_errors(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ValueError, match="channels"):
            diff_conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), 0.5)
        with pytest.raises(ValueError, match="theta"):
            diff_conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), 1.5)
        with pytest.raises(ValueError, match="odd"):
            diff_conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), 0.5)

    @pytest.mark.parametrize("theta,stride", [(0.0, 1), (0.7, 1), (0.3, 2)])
    def test_gradients(self, theta, stride):
        rng = np.random.default_rng(int(theta * 10) + stride)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        c = Tensor(rng.normal(size=diff_conv2d(x, w, theta, stride).shape))
        err = grad_check(lambda t: (diff_conv2d(t, w, theta, stride) * c).sum(), x, wrt=[w])
        assert err <= 1e-6


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(make_rng(2).normal(size=(2, 1, 4, 5)))
        np.testing.assert_array_equal(conv2d(x, Tensor(np.ones((1, 1, 1, 1)))).data, x.data)

    def test_zero_kernel(self):
        x = Tensor(make_rng(3).normal(size=(1, 2, 4, 4)))
        assert not conv2d(x, Tensor(np.zeros((3, 2, 3, 3)))).data.any()

    def test_two_by_two_hand_sum(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 2))
        w = rng.normal(size=(2, 2))
        # even kernels are out of contract for diff_conv2d; embed into 3x3 with a zero row/col
        w3 = np.zeros((3, 3))
        w3[:2, :2] = w
        x3 = np.zeros((3, 3))
        x3[:2, :2] = x
        out = conv2d(Tensor(x3[None, None]), Tensor(w3[None, None]), padding=0)
        assert out.data.item() == pytest.approx(float((x * w).sum()), abs=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows(Tensor(np.full((1, 3), 2.5))).data, 1 / 3, atol=1e-15)

    def test_ln3(self):
        out = softmax_rows(Tensor(np.array([[0.0, math.log(3.0)]]))).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_singleton(self):
        assert softmax_rows(Tensor(np.array([[7.0]]))).data.item() == 1.0

    def test_empty_axis(self):
        with pytest.raises(ValueError):
            softmax_rows(Tensor(np.zeros((2, 0))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.floats(-50, 50), st.integers(0, 2**31))
    def test_sum_and_shift(self, rows, cols, shift, seed):
        x = np.random.default_rng(seed).normal(scale=5, size=(rows, cols))
        y = softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(softmax_rows(Tensor(x + shift)).data, y, atol=1e-6)


class TestLayerNorm:
    def test_constant_row(self):
        out = layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_plus_minus_one(self):
        out = layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)

    def test_zero_gain(self):
        x = Tensor(make_rng(1).normal(size=(3, 5)))
        out = layer_norm(x, Tensor(np.zeros(5)), Tensor(np.full(5, 0.4)), 1e-5)
        np.testing.assert_allclose(out.data, 0.4, atol=1e-15)

    def test_normalised_moments(self):
        x = Tensor(make_rng(2).normal(loc=3, scale=4, size=(6, 9)))
        out = layer_norm(x, Tensor(np.ones(9)), Tensor(np.zeros(9)), 1e-8).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-5)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_half_square(self):
        x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum() / 2.0
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [3.0, -2.0])

    def test_composed_diffconv_relu_mean(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(1, 1, 4, 4)))
        w = Tensor(rng.normal(size=(2, 1, 3, 3)))
        assert grad_check(lambda t: relu(diff_conv2d(t, w, 0.7)).mean(), x, 1e-5, wrt=[w]) <= 1e-6

    def test_second_call_without_reset(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)
        tape.reset()
        assert len(tape) == 0

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_disconnected_leaf_gets_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        gx, gu = tape.backward(loss, wrt=[x, unused])
        np.testing.assert_array_equal(gu, np.zeros((2, 2)))
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 3.0
        assert not y.requires_grad

    def test_tape_visits_each_node_once(self):
        x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
        with Tape() as tape:
            y = x * x
            loss = (y + y).sum()
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 4 * x.data)


class TestGradCheck:
    def test_sum_exact(self):
        x = Tensor(np.arange(-6, 6, dtype=np.float64).reshape(3, 4) / 4)
        assert grad_check(lambda t: t.sum(), x) == 0.0

    def test_layer_norm_self_test(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 5)))
        g = Tensor(rng.normal(size=5))
        b = Tensor(rng.normal(size=5))
        c = Tensor(rng.normal(size=(3, 5)))
        assert grad_check(lambda t: (layer_norm(t, g, b, 1e-5) * c).mean(), x, wrt=[g, b]) <= 1e-6

    def test_wrong_backward_detected(self):
        def bad_square(t):
            return custom_op("bad_square", t.data ** 2, [t], lambda g: (g * 2 * t.data + 1.0,))

        x = Tensor(np.random.default_rng(0).normal(size=4))
        assert grad_check(lambda t: bad_square(t).sum(), x) >= 1e-2

    def test_vector_valued_rejected(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: t * 2.0, Tensor(np.ones(3)))


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


OP_CASES = {
    "matmul": lambda r, x: (matmul(x, _c(r, 4, 2)) * _c(r, 3, 2)).sum(),
    "linear": lambda r, x: (linear(x, _c(r, 5, 4), _c(r, 5)) * _c(r, 3, 5)).sum(),
    "relu": lambda r, x: (relu(x) * _c(r, 3, 4)).sum(),
    "gelu": lambda r, x: (gelu(x) * _c(r, 3, 4)).sum(),
    "softmax": lambda r, x: (softmax_rows(x) * _c(r, 3, 4)).sum(),
    "log_softmax": lambda r, x: (log_softmax_rows(x) * _c(r, 3, 4)).sum(),
    "l2_normalize": lambda r, x: (l2_normalize_rows(x) * _c(r, 3, 4)).sum(),
    "layer_norm": lambda r, x: (layer_norm(x, _c(r, 4), _c(r, 4), 1e-5) * _c(r, 3, 4)).sum(),
    "div": lambda r, x: (x / (x * x + 2.0)).sum(),
    "sub_mean": lambda r, x: ((x - x.mean(axis=1, keepdims=True)) * _c(r, 3, 4)).sum(),
    "reshape_transpose": lambda r, x: (x.reshape(2, 6).transpose(1, 0) * _c(r, 6, 2)).sum(),
    "concat": lambda r, x: (concat([x, x * 2.0], axis=1) * _c(r, 3, 8)).sum(),
    "broadcast_add": lambda r, x: ((x + x.sum(axis=0)) * _c(r, 3, 4)).sum(),
}


def _c(rng, *shape):
    return Tensor(rng.normal(size=shape))


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    fn = OP_CASES[name]
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = _rand(rng, 3, 4)
        consts_seed = seed + 100

        def f(t):
            return fn(np.random.default_rng(consts_seed), t)

        assert grad_check(f, x) <= 1e-6, name


def test_batch_norm_gradients():
    rng = np.random.default_rng(7)
    x = _rand(rng, 3, 2, 3, 3)
    g, b, c = _rand(rng, 2), _rand(rng, 2), _rand(rng, 3, 2, 3, 3)
    assert grad_check(lambda t: (batch_norm2d(t, g, b) * c).sum(), x, wrt=[g, b]) <= 1e-6
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)
    assert grad_check(lambda t: (batch_norm2d(t, g, b, 1e-5, rm, rv) * c).sum(), x, wrt=[g, b]) <= 1e-6


def test_dropout_mask_and_identity():
    x = Tensor(np.ones((50, 40)), requires_grad=True)
    assert dropout(x, 0.0, make_rng(0)) is x
    assert dropout(x, 0.5, None) is x
    out = dropout(x, 0.5, make_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert 0.4 < (out == 0).mean() < 0.6


def test_non_finite_is_reported_with_op():
    with pytest.raises(NonFiniteError, match="div"):
        Tensor(np.ones(2)) / Tensor(np.zeros(2))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))


def test_float32_preserved():
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    assert (x * 2.0 + 1.0).dtype == np.float32
    assert gelu(x).dtype == np.float32
    assert layer_norm(x, Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32))).dtype == np.float32


def test_determinism():
    def run():
        rng = make_rng(42)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32))
        return dropout(relu(diff_conv2d(x, w, 0.7)), 0.2, make_rng(42, 1)).data

    assert run().tobytes() == run().tobytes()


class TestBinaryFormat:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip(self, dtype, tmp_path):
        arr = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(dtype)
        buf = tensor_to_bytes(arr)
        assert buf[:5] == b"PTNS1"
        assert buf[5] == (0 if dtype == np.float32 else 1)
        assert buf[6] == 3
        back, end = tensor_from_bytes(buf)
        assert end == len(buf)
        assert back.dtype == dtype and back.tobytes() == arr.tobytes()
        save_tensor(tmp_path / "t.ptns", arr)
        assert load_tensor(tmp_path / "t.ptns").tobytes() == arr.tobytes()

    def test_header_layout(self):
        buf = tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
        assert buf == b"PTNS1\x00\x02" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") \
            + np.array([1.0, 2.0], dtype="<f4").tobytes()

    def test_truncated(self):
        buf = tensor_to_bytes(np.ones((4, 4)))
        with pytest.raises(CheckpointError, match="truncated"):
            tensor_from_bytes(buf[:-3])
        with pytest.raises(CheckpointError, match="magic"):
            tensor_from_bytes(b"XXXXX" + buf[5:])
