import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import selflabel.autodiff as ad
from selflabel.autodiff import GradTape, Tensor

from gradcheck import check_gradients

rng = np.random.default_rng(7)


def randt(*shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def rand_proj(shape):
    """Fixed random projection to turn any output into a scalar loss."""
    r = rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return r


# ---------------------------------------------------------------------------
# forward values


def test_sigmoid_forward_value():
    x = Tensor(np.array([2.0]))
    y = ad.sigmoid(x)
    assert y.data[0] == pytest.approx(0.8807970779778823, abs=1e-12)


def test_sigmoid_backward_value():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with GradTape() as tape:
        y = ad.tsum(ad.sigmoid(x))
    tape.backward(y)
    assert x.grad[0] == pytest.approx(0.104993585403507, abs=1e-9)


def test_sigmoid_saturates_cleanly():
    y = ad.sigmoid(Tensor(np.array([-800.0, 800.0])))
    assert y.data[0] == 0.0 and y.data[1] == 1.0
    assert np.all(np.isfinite(y.data))


def test_matmul_forward():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    c = ad.matmul(a, b)
    np.testing.assert_allclose(c.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_dim_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_elementwise_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_scalar_broadcast_allowed():
    out = ad.mul(Tensor(np.full((2, 2), 3.0)), Tensor(np.array(2.0)))
    np.testing.assert_allclose(out.data, 6.0)


def test_log_rejects_nonpositive():
    with pytest.raises(ad.DomainError):
        ad.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(ad.DomainError):
        ad.log(Tensor(np.array([-1.0])))


def test_div_by_zero_raises():
    with pytest.raises(ad.DomainError):
        ad.div(Tensor(np.ones(3)), Tensor(np.array([1.0, 0.0, 2.0])))


def test_softmax_rows_uniform_on_constant_rows():
    x = Tensor(np.full((3, 4), 9.3))
    s = ad.softmax_rows(x)
    np.testing.assert_allclose(s.data, 0.25, atol=1e-15)


def test_softmax_shift_invariance():
    x = randt(4, 5)
    s1 = ad.softmax_rows(Tensor(x)).data
    s2 = ad.softmax_rows(Tensor(x + 123.456)).data
    np.testing.assert_allclose(s1, s2, atol=1e-12)


def test_softmax_stable_at_large_magnitudes():
    s = ad.softmax_rows(Tensor(np.array([[1000.0, 0.0, -1000.0]])))
    assert np.all(np.isfinite(s.data))
    assert s.data[0, 0] == pytest.approx(1.0)


def test_l2_normalize_unit_norm():
    v = ad.l2_normalize(Tensor(np.array([3.0, 4.0])))
    np.testing.assert_allclose(v.data, [0.6, 0.8])


def test_l2_normalize_zero_vector():
    v = ad.l2_normalize(Tensor(np.zeros(4)))
    np.testing.assert_allclose(v.data, 0.0)


def test_clamp_zero_gradient_outside_range():
    x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    with GradTape() as tape:
        y = ad.tsum(ad.clamp(x, 0.0, 1.0))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


def test_upsample_then_pool_is_identity():
    x = randt(2, 3, 4, 4)
    y = ad.avg_pool2d(ad.upsample_nearest(Tensor(x), 2), 2)
    np.testing.assert_allclose(y.data, x, atol=1e-12)


# ---------------------------------------------------------------------------
# tape semantics


def test_gradient_accumulates_across_uses():
    x = Tensor(np.array([1.5]), requires_grad=True)
    with GradTape() as tape:
        y = ad.tsum(ad.add(ad.mul(x, x), x))   # x^2 + x
    tape.backward(y)
    assert x.grad[0] == pytest.approx(2 * 1.5 + 1.0)


def test_double_backward_doubles_gradient():
    x = Tensor(randt(3, 3), requires_grad=True)
    w = Tensor(randt(3, 3), requires_grad=True)
    with GradTape() as tape:
        loss = ad.tsum(ad.sigmoid(ad.matmul(x, w)))
    tape.backward(loss)
    g1 = w.grad.copy()
    tape.backward(loss)
    np.testing.assert_allclose(w.grad, 2.0 * g1, rtol=0, atol=0)


def test_clear_resets_grads_and_entries():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with GradTape() as tape:
        y = ad.tsum(ad.mul(x, x))
    tape.backward(y)
    assert x.grad[0] != 0.0
    tape.clear()
    assert x.grad[0] == 0.0
    assert not tape._entries


def test_backward_requires_scalar():
    x = Tensor(randt(2, 2), requires_grad=True)
    with GradTape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ad.ShapeError):
        tape.backward(y)


def test_no_recording_without_tape():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = ad.mul(x, x)
    assert y._tape is None


# ---------------------------------------------------------------------------
# finite-difference checks, one op at a time

N_INSTANCES = 100


def _away_from(x, pts, margin=0.05):
    """Nudge values that sit too close to non-smooth points."""
    for p in pts:
        close = np.abs(x - p) < margin
        x = x + close * 2 * margin
    return x


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "neg", "sigmoid",
                                "relu", "log", "clamp", "minimum"])
def test_fd_elementwise(op):
    for _ in range(N_INSTANCES):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        a = randt(*shape)
        b = randt(*shape)
        r = rand_proj(shape)
        if op == "add":
            build = lambda t: ad.tsum(ad.mul(ad.add(t[0], t[1]), Tensor(r)))
            args = [a, b]
        elif op == "sub":
            build = lambda t: ad.tsum(ad.mul(ad.sub(t[0], t[1]), Tensor(r)))
            args = [a, b]
        elif op == "mul":
            build = lambda t: ad.tsum(ad.mul(ad.mul(t[0], t[1]), Tensor(r)))
            args = [a, b]
        elif op == "div":
            bb = np.sign(b) * (np.abs(b) + 0.5)
            build = lambda t: ad.tsum(ad.mul(ad.div(t[0], t[1]), Tensor(r)))
            args = [a, bb]
        elif op == "neg":
            build = lambda t: ad.tsum(ad.mul(ad.neg(t[0]), Tensor(r)))
            args = [a]
        elif op == "sigmoid":
            build = lambda t: ad.tsum(ad.mul(ad.sigmoid(t[0]), Tensor(r)))
            args = [a]
        elif op == "relu":
            build = lambda t: ad.tsum(ad.mul(ad.relu(t[0]), Tensor(r)))
            args = [_away_from(a, [0.0])]
        elif op == "log":
            build = lambda t: ad.tsum(ad.mul(ad.log(t[0]), Tensor(r)))
            args = [np.abs(a) + 0.2]
        elif op == "clamp":
            build = lambda t: ad.tsum(ad.mul(ad.clamp(t[0], -1.0, 1.0), Tensor(r)))
            args = [_away_from(a, [-1.0, 1.0])]
        else:  # minimum
            spread = np.where(np.abs(a - b) < 0.05, b + 0.2, b)
            build = lambda t: ad.tsum(ad.mul(ad.minimum(t[0], t[1]), Tensor(r)))
            args = [a, spread]
        check_gradients(build, args)


def test_fd_scalar_broadcast():
    for _ in range(N_INSTANCES):
        a = randt(3, 2)
        s = randt(1)
        r = rand_proj((3, 2))
        check_gradients(lambda t: ad.tsum(ad.mul(ad.mul(t[0], t[1]), Tensor(r))), [a, s])
        check_gradients(lambda t: ad.tsum(ad.mul(ad.add(t[0], t[1]), Tensor(r))), [a, s])


def test_fd_matmul_2d():
    for _ in range(N_INSTANCES):
        m, k, n = rng.integers(1, 5, size=3)
        a, b = randt(m, k), randt(k, n)
        r = rand_proj((m, n))
        check_gradients(lambda t: ad.tsum(ad.mul(ad.matmul(t[0], t[1]), Tensor(r))), [a, b])


def test_fd_matmul_batched():
    for _ in range(20):
        B, m, k, n = 2, 3, 2, 3
        a, b2, b3 = randt(B, m, k), randt(k, n), randt(B, k, n)
        r = Tensor(rand_proj((B, m, n)))
        check_gradients(
            lambda t: ad.tsum(ad.mul(ad.matmul(t[0], t[1]), r)), [a, b2])
        check_gradients(
            lambda t: ad.tsum(ad.mul(ad.matmul(t[0], t[1]), r)), [a, b3])


def test_fd_softmax_rows():
    for _ in range(N_INSTANCES):
        a = randt(3, 4)
        r = rand_proj((3, 4))
        check_gradients(lambda t: ad.tsum(ad.mul(ad.softmax_rows(t[0]), Tensor(r))), [a])


def test_fd_l2_normalize():
    for _ in range(N_INSTANCES):
        a = randt(5)
        a = a + np.sign(a.sum() or 1.0) * 0.5   # keep away from the zero vector
        r = rand_proj((5,))
        check_gradients(lambda t: ad.tsum(ad.mul(ad.l2_normalize(t[0]), Tensor(r))), [a])


def test_fd_reductions_and_moves():
    for _ in range(30):
        a = randt(3, 4)
        rt, rr, rs = (Tensor(rand_proj(s)) for s in [(4, 3), (2, 6), (3, 2)])
        check_gradients(lambda t: ad.tmean(ad.mul(t[0], t[0])), [a])
        check_gradients(lambda t: ad.tsum(ad.mul(ad.transpose(t[0]), rt)), [a])
        check_gradients(lambda t: ad.tsum(ad.mul(ad.reshape(t[0], (2, 6)), rr)), [a])
        check_gradients(lambda t: ad.tsum(ad.mul(ad.slice_last(t[0], 1, 3), rs)), [a])


def test_fd_concat_and_bias():
    for _ in range(30):
        a, b = randt(3, 2), randt(3, 3)
        r = rand_proj((3, 5))
        check_gradients(lambda t: ad.tsum(ad.mul(ad.concat(t[0], t[1]), Tensor(r))), [a, b])
        x, bias = randt(4, 3), randt(3)
        r2 = rand_proj((4, 3))
        check_gradients(lambda t: ad.tsum(ad.mul(ad.add_bias(t[0], t[1]), Tensor(r2))), [x, bias])


def test_fd_gather_rows():
    for _ in range(30):
        table = randt(6, 3)
        idx = rng.integers(0, 6, size=(2, 4))
        r = rand_proj((2, 4, 3))
        check_gradients(
            lambda t: ad.tsum(ad.mul(ad.gather_rows(t[0], idx), Tensor(r))), [table])


def test_fd_conv_pool_upsample():
    for _ in range(15):
        x = randt(2, 2, 4, 4)
        w = randt(3, 2, 3, 3) * 0.5
        b = randt(3)
        r = rand_proj((2, 3, 4, 4))
        check_gradients(
            lambda t: ad.tsum(ad.mul(ad.conv2d(t[0], t[1], t[2]), Tensor(r))), [x, w, b])
        r2 = rand_proj((2, 2, 2, 2))
        check_gradients(
            lambda t: ad.tsum(ad.mul(ad.avg_pool2d(t[0], 2), Tensor(r2))), [x])
        r3 = rand_proj((2, 2, 8, 8))
        check_gradients(
            lambda t: ad.tsum(ad.mul(ad.upsample_nearest(t[0], 2), Tensor(r3))), [x])


# ---------------------------------------------------------------------------
# property tests


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    s = ad.softmax_rows(Tensor(np.array([vals])))
    assert s.data.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(s.data >= 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=6))
def test_l2_normalize_norm_at_most_one(vals):
    v = ad.l2_normalize(Tensor(np.array(vals)))
    assert np.linalg.norm(v.data) <= 1.0 + 1e-9


def test_select_batch_values_and_errors():
    x = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
    row = ad.select_batch(x, 1)
    assert row.data.shape == (3, 4)
    assert np.array_equal(row.data, x.data[1])
    with pytest.raises(ad.ShapeError):
        ad.select_batch(x, 2)
    with pytest.raises(ad.ShapeError):
        ad.select_batch(Tensor(1.0), 0)


def test_fd_select_batch():
    rng = np.random.default_rng(77)
    x0 = rng.normal(size=(3, 4, 4))

    def build(leaves):
        a = ad.select_batch(leaves[0], 0)
        b = ad.select_batch(leaves[0], 2)
        return ad.tsum(ad.sigmoid(a) * ad.sigmoid(b))

    check_gradients(build, [x0])


def test_concat_channels_values_and_errors():
    a = ad.Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    b = ad.Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    out = ad.concat_channels(a, b)
    assert out.shape == (1, 3, 2, 2)
    np.testing.assert_array_equal(out.data[:, :2], a.data)
    np.testing.assert_array_equal(out.data[:, 2:], b.data)
    with pytest.raises(ad.ShapeError):
        ad.concat_channels(a, ad.Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ad.ShapeError):
        ad.concat_channels(a, ad.Tensor(np.zeros((2, 2))))


def test_fd_concat_channels():
    rng = np.random.default_rng(78)
    x0 = rng.normal(size=(2, 3, 2, 2))
    y0 = rng.normal(size=(2, 2, 2, 2))
    r = rng.normal(size=(2, 5, 2, 2))

    def build(leaves):
        joined = ad.concat_channels(leaves[0], leaves[1])
        return ad.tsum(joined * ad.Tensor(r))

    check_gradients(build, [x0, y0])
