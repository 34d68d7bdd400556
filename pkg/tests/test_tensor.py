import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcntag import tensor as T
from fcntag.tensor import ShapeError, Tensor, grad_check, no_grad

from oracles import conv2d_loops, maxpool_loops, numeric_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_add_mul_hand_values():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 5.0])
    out = (a * b + a).sum()
    out.backward()
    assert float(out.data) == 1 * 3 + 2 * 5 + 3
    np.testing.assert_array_equal(a.grad, [4.0, 6.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])


def test_reused_node_accumulates():
    x = leaf([3.0])
    (x * x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [27.0])


def test_broadcast_grad_is_reduced_to_operand_shape():
    x = leaf(np.ones((4, 3)))
    b = leaf(np.zeros(3))
    (x + b).sum().backward()
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


def test_matmul_grads_match_formula():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    (T.matmul(a, b) * g).sum().backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_matmul_shape_error_names_op():
    with pytest.raises(ShapeError) as err:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert err.value.op == "matmul"


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(ValueError):
        y.sum().backward()


def test_relu_kink_gets_zero_gradient():
    x = leaf([-1.0, 0.0, 2.0])
    T.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sigmoid_is_stable_at_extremes():
    s = T.sigmoid(Tensor(np.array([-40.0, 0.0, 800.0, -800.0]))).data
    assert np.all(np.isfinite(s))
    assert 0.0 < s[0] < 1e-17
    assert s[1] == 0.5
    assert s[3] >= 0.0 and s[2] == 1.0


def test_dropout_identity_in_infer_mode_and_inverted_scale_in_train():
    x = Tensor(np.ones((200, 50), dtype=np.float32))
    assert T.dropout(x, 0.5, train=False) is x
    y = T.dropout(x, 0.5, train=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.03


def test_bce_matches_closed_form_and_is_clamped():
    p = leaf([0.2, 0.9, 0.0])
    y = np.array([0.0, 1.0, 1.0])
    loss = T.binary_cross_entropy(p, y, clamp=1e-7)
    expect = -(np.log(0.8) + np.log(0.9) + np.log(1e-7)) / 3
    assert float(loss.data) == pytest.approx(expect, rel=1e-12)
    loss.backward()
    assert p.grad[2] == 0.0  # outside the clamp
    assert p.grad[0] == pytest.approx((0.2 - 0) / (0.2 * 0.8) / 3)


def test_conv_matches_loops_and_rejects_even_kernels():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, conv2d_loops(x, w, b),
                               rtol=1e-12, atol=1e-12)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(x), Tensor(np.ones((4, 3, 2, 2))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(x), Tensor(np.ones((4, 2, 3, 3))))


def test_conv_gradients_match_numeric():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    g = rng.normal(size=(2, 3, 4, 5))
    xt, wt = leaf(x), leaf(w)
    (T.conv2d(xt, wt) * g).sum().backward()
    np.testing.assert_allclose(xt.grad, numeric_grad(lambda v: (conv2d_loops(v, w) * g).sum(), x), atol=1e-6)
    np.testing.assert_allclose(wt.grad, numeric_grad(lambda v: (conv2d_loops(x, v) * g).sum(), w), atol=1e-6)


def test_maxpool_floor_and_first_index_ties():
    x = np.zeros((1, 1, 5, 7))
    x[0, 0, 0, 1] = 1.0
    x[0, 0, 1, 0] = 1.0  # tie with (0, 1): the row-major first one wins
    xt = leaf(x)
    out = T.maxpool2d(xt, (2, 3))
    assert out.shape == (1, 1, 2, 2)
    out.sum().backward()
    ref_out, mask = maxpool_loops(x, 2, 3)
    np.testing.assert_array_equal(out.data, ref_out)
    np.testing.assert_array_equal(xt.grad, mask.astype(float))
    assert xt.grad[0, 0, 0, 1] == 1.0 and xt.grad[0, 0, 1, 0] == 0.0
    assert xt.grad[0, 0, 4].sum() == 0.0 and xt.grad[0, 0, :, 6].sum() == 0.0


def test_maxpool_rejects_oversized_pool():
    with pytest.raises(ShapeError):
        T.maxpool2d(Tensor(np.ones((1, 1, 2, 2))), (3, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_maxpool_matches_loop_oracle(ph, pw, seed):
    rng = np.random.default_rng(seed)
    # few distinct values so ties are common
    x = rng.integers(0, 3, size=(2, 2, 7, 8)).astype(np.float64)
    xt = leaf(x)
    out = T.maxpool2d(xt, (ph, pw))
    out.sum().backward()
    ref, mask = maxpool_loops(x, ph, pw)
    np.testing.assert_array_equal(out.data, ref)
    np.testing.assert_array_equal(xt.grad, mask.astype(float))


def test_batchnorm_train_output_is_normalized():
    rng = np.random.default_rng(3)
    x = rng.normal(5.0, 3.0, size=(8, 4, 3, 3))
    out, mu, var = T.batchnorm(Tensor(x), np.ones(4), np.zeros(4))
    np.testing.assert_allclose(mu, x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(var, x.var(axis=(0, 2, 3)))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), var / (var + 1e-5), rtol=1e-9)


def test_batchnorm_constant_channel_maps_to_beta():
    x = np.full((4, 2, 2, 2), 7.0)
    beta = np.array([0.5, -1.0])
    out, _, var = T.batchnorm(Tensor(x), np.ones(2), beta)
    np.testing.assert_array_equal(var, 0.0)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], x.shape))


@pytest.mark.parametrize("name,fn,shape", [
    ("relu", lambda t: T.relu(t), (3, 4)),
    ("sigmoid", lambda t: T.sigmoid(t), (3, 4)),
    ("mean", lambda t: T.mean(t, axis=1), (3, 4)),
    ("reshape", lambda t: T.reshape(t, (4, 3)), (3, 4)),
    ("concat", lambda t: T.concat([t, t * t], axis=0), (2, 3)),
    ("conv", lambda t: T.conv2d(t, Tensor(np.linspace(-1, 1, 18).reshape(2, 1, 3, 3))), (2, 1, 4, 4)),
    ("bn", lambda t: T.batchnorm(t, np.array([1.5, 0.5]), np.array([0.1, 0.2]))[0], (3, 2, 2, 2)),
])
def test_grad_check_helper_passes_on_each_op(name, fn, shape):
    rng = np.random.default_rng(4)
    x = rng.normal(size=shape) + 0.05
    w = rng.normal(size=fn(Tensor(x)).shape)
    assert grad_check(lambda t: (fn(t) * w).sum(), x) < 1e-6


def test_grad_check_detects_a_wrong_gradient():
    def bad(t):
        def backward(g):
            return (g * 0.5,)  # true derivative of 2x is 2
        return T._make("bad", t.data * 2.0, (t,), backward).sum()

    assert grad_check(bad, np.ones(3)) > 0.1


def test_forward_op_dispatch_and_unknown():
    out = T.forward_op("add", [Tensor(np.ones(2)), Tensor(np.ones(2))])
    np.testing.assert_array_equal(out.data, [2.0, 2.0])
    with pytest.raises(ValueError):
        T.forward_op("softmax", [Tensor(np.ones(2))])
