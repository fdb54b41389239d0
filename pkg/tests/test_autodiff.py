"""Tensor-core checks: forward definitions, tape semantics, gradient oracle."""

import numpy as np
import pytest

from eeg_gsl import autodiff as ad
from eeg_gsl.autodiff import Tensor, Tape, backward, grad_check

RNG = np.random.default_rng(1234)


def rand(*shape, scale=1.0):
    return (RNG.standard_normal(shape) * scale).astype(np.float32)


def probe(*shape, signed=False):
    """Constant with entries bounded away from 0 so relative FD error is
    well conditioned under float32 forward rounding. Positive by default:
    signed probes can cancel in inner-product gradients."""
    mag = RNG.uniform(0.5, 1.5, shape)
    if signed:
        mag *= np.where(RNG.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(mag.astype(np.float32))


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_matmul_identity():
    m = Tensor(rand(3, 3))
    out = ad.matmul(Tensor(np.eye(3, dtype=np.float32)), m)
    np.testing.assert_allclose(out.data, m.data, rtol=0, atol=0)


def test_row_softmax_uniform():
    out = ad.row_softmax(Tensor(np.zeros((4, 4), dtype=np.float32)))
    np.testing.assert_allclose(out.data, np.full((4, 4), 0.25), atol=1e-7)


def test_gelu_reference_points():
    # frozen from a 30-digit erf evaluation of x * Phi(x)
    x = Tensor(np.array([-2.0, 0.0, 2.0], dtype=np.float32))
    expected = np.array([-0.0455002638964, 0.0, 1.9544997361], dtype=np.float64)
    np.testing.assert_allclose(ad.gelu(x).data, expected, atol=1e-6)


def test_row_softmax_rows_sum_to_one():
    x = Tensor(rand(6, 9, scale=4.0))
    out = ad.row_softmax(x)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(6), atol=1e-6)


def test_shape_mismatch_is_diagnosed():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(rand(2, 3)), Tensor(rand(4, 2)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(rand(2, 3)), Tensor(rand(3, 2)))


def test_dropout_identity_cases():
    x = Tensor(rand(5, 7))
    rng = np.random.default_rng(0)
    out_rate0 = ad.dropout(x, 0.0, rng, train=True)
    out_eval = ad.dropout(x, 0.5, rng, train=False)
    np.testing.assert_array_equal(out_rate0.data, x.data)
    np.testing.assert_array_equal(out_eval.data, x.data)


def test_batch_norm_eval_is_deterministic_affine():
    state = ad.BatchNormState(3)
    state.mean = np.array([0.5, -1.0, 2.0], dtype=np.float32)
    state.var = np.array([1.5, 0.2, 3.0], dtype=np.float32)
    gamma = Tensor(np.array([1.0, 2.0, 0.5], dtype=np.float32))
    beta = Tensor(np.array([0.0, 1.0, -1.0], dtype=np.float32))
    x = Tensor(rand(4, 3, 10))
    a = ad.batch_norm(x, gamma, beta, state, train=False)
    b = ad.batch_norm(x, gamma, beta, state, train=False)
    np.testing.assert_array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------

def test_backward_linear_map():
    w = Tensor(rand(3, 4), requires_grad=True)
    x = Tensor(rand(4, 1))
    with Tape():
        loss = ad.tsum(ad.matmul(w, x))
        backward(loss)
    np.testing.assert_allclose(w.grad, np.broadcast_to(x.data.T, (3, 4)), atol=1e-6)


def test_backward_softmax_sum_is_zero():
    z = Tensor(rand(5, 6), requires_grad=True)
    with Tape():
        loss = ad.tsum(ad.row_softmax(z))
        backward(loss)
    np.testing.assert_allclose(z.grad, np.zeros_like(z.data), atol=1e-6)


def test_backward_rejects_nonscalar():
    x = Tensor(rand(3), requires_grad=True)
    with Tape():
        y = ad.scalar_mul(x, 2.0)
        with pytest.raises(ad.ShapeError):
            backward(y)


def test_reused_tensor_accumulates_both_paths():
    def f(x):
        return ad.tsum(ad.add(ad.mul(x, x), ad.scalar_mul(x, 3.0)))

    err = grad_check(f, Tensor(rand(4, 3)), h=1e-3)
    assert err < 1e-3


def test_random_composite_graph_matches_fd():
    a = Tensor(rand(4, 4, scale=0.5))

    def f(x):
        y = ad.matmul(x, a)
        y = ad.gelu(y)
        y = ad.row_softmax(y)
        y = ad.mul(y, x)
        return ad.tmean(ad.exp(ad.scalar_mul(y, 0.5)))

    err = grad_check(f, Tensor(rand(4, 4, scale=0.5)), h=1e-3)
    assert err < 1e-3


# ---------------------------------------------------------------------------
# grad_check across the op catalog
# ---------------------------------------------------------------------------

def test_grad_check_quadratic_is_exact():
    err = grad_check(lambda x: ad.tsum(ad.mul(x, x)), Tensor(rand(5, 2)), h=1e-3)
    assert err < 1e-6


def test_grad_check_cross_entropy():
    labels = np.array([0, 2, 1, 2], dtype=np.int64)
    err = grad_check(
        lambda z: ad.cross_entropy_with_logits(z, labels),
        Tensor(rand(4, 3)),
        h=1e-3,
    )
    assert err < 1e-3


def _op_cases():
    """(input, f) per op. Each f closes over fixed constants so repeated
    grad_check evaluations see the same function; cases are kept tiny and
    gradients O(1) so FD at h=1e-3 is well conditioned in float32."""
    x23 = probe(2, 3, signed=True)
    x23p = probe(2, 3)
    c23, c23b, c32, c13 = probe(2, 3), probe(2, 3), probe(3, 2), probe(1, 3)
    c22, c222 = probe(2, 2), probe(2, 2, 2)
    c2, c3, c26, c29 = probe(2), probe(3), probe(2, 6), probe(2, 9)
    c22n = probe(2, 2)
    soft_probe = Tensor(np.array([[2.2, 0.3, 1.0], [0.4, 1.8, 0.9]], np.float32))
    offset = Tensor(np.full((2, 3), 1.5, np.float32))
    return {
        "add": (x23, lambda x: ad.tsum(ad.mul(ad.add(x, c23), c23b))),
        "sub": (x23, lambda x: ad.tsum(ad.mul(ad.sub(c23, x), c23b))),
        "mul_broadcast": (x23, lambda x: ad.tsum(ad.mul(x, c13))),
        "div": (x23, lambda x: ad.tsum(ad.div(x, offset))),
        "neg": (x23, lambda x: ad.tsum(ad.mul(ad.neg(x), c23))),
        "scalar_mul": (x23, lambda x: ad.tsum(ad.scalar_mul(x, -1.7))),
        "pow": (x23, lambda x: ad.tsum(ad.pow_scalar(ad.add(ad.mul(x, x), offset), 1.5))),
        "exp": (x23, lambda x: ad.tsum(ad.exp(ad.scalar_mul(x, 0.5)))),
        "log": (x23, lambda x: ad.tsum(ad.log(ad.add(ad.mul(x, x), offset)))),
        "relu": (x23, lambda x: ad.tsum(ad.mul(ad.relu(x), c23))),
        "gelu": (x23p, lambda x: ad.tsum(ad.mul(ad.gelu(x), c23))),
        "matmul": (x23, lambda x: ad.tsum(ad.mul(ad.matmul(x, c32), c22))),
        "batched_matmul": (probe(2, 4, signed=True),
                           lambda x: ad.tsum(ad.mul(ad.matmul(ad.reshape(x, (2, 2, 2)), c22n), c222))),
        "transpose": (x23, lambda x: ad.tsum(ad.mul(ad.transpose(x), c32))),
        "row_softmax": (x23, lambda x: ad.tsum(ad.mul(ad.row_softmax(x), soft_probe))),
        "mean_axis": (x23, lambda x: ad.tsum(ad.mul(ad.tmean(x, axis=1), c2))),
        "sum_axis": (x23, lambda x: ad.tsum(ad.mul(ad.tsum(x, axis=0), c3))),
        "l2_norm": (x23, lambda x: ad.l2_norm(x)),
        "l2_normalize": (x23, lambda x: ad.tsum(ad.mul(ad.l2_normalize(x, axis=1), soft_probe))),
        "concat": (x23, lambda x: ad.tsum(ad.mul(ad.concat([x, ad.mul(x, x)], axis=1), c26))),
        "narrow": (x23, lambda x: ad.tsum(ad.mul(ad.narrow(x, 1, 1, 2), c22))),
        "repeat_interleave": (x23, lambda x: ad.tsum(ad.mul(ad.repeat_interleave(x, 3, axis=1), c29))),
    }


OP_CASES = _op_cases()


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_catalog_grad_check(name):
    x, f = OP_CASES[name]
    err = grad_check(f, x, h=1e-3)
    assert err < 1e-3, f"{name}: max rel err {err}"


def test_conv1d_grad_check_input_weight_bias():
    w = Tensor(probe(3, 2, 4).data, requires_grad=True)
    b = Tensor(probe(3).data, requires_grad=True)
    pr = probe(2, 3, 5)

    def loss_from_x(x):
        return ad.tsum(ad.mul(ad.conv1d(x, w, b, stride=2, pad=(3, 0)), pr))

    assert grad_check(loss_from_x, Tensor(rand(2, 2, 9)), h=1e-3) < 1e-3

    x_fixed = Tensor(rand(2, 2, 9))

    def loss_from_w(wv):
        return ad.tsum(ad.mul(ad.conv1d(x_fixed, wv, b, stride=2, pad=(3, 0)), pr))

    assert grad_check(loss_from_w, w, h=1e-3) < 1e-3

    def loss_from_b(bv):
        return ad.tsum(ad.mul(ad.conv1d(x_fixed, w, bv, stride=2, pad=(3, 0)), pr))

    assert grad_check(loss_from_b, b, h=1e-3) < 1e-3


def test_depthwise_conv1d_grad_check():
    w = Tensor(probe(3, 1, 5).data, requires_grad=True)
    x_fixed = Tensor(probe(2, 3, 8).data)
    pr = probe(2, 3, 8)

    def loss(wv):
        return ad.tsum(ad.mul(ad.conv1d(x_fixed, wv, pad=(4, 0), groups=3), pr))

    assert grad_check(loss, w, h=1e-3) < 1e-3

    def loss_x(x):
        return ad.tsum(ad.mul(ad.conv1d(x, w, pad=(4, 0), groups=3), pr))

    assert grad_check(loss_x, probe(2, 3, 8), h=1e-3) < 1e-3


def test_max_pool1d_grad_check():
    pr = probe(2, 3, 4)
    # spaced values keep every pool-window argmax stable under the FD step
    vals = RNG.permutation(72).astype(np.float32).reshape(2, 3, 12) / 18.0

    def loss(x):
        return ad.tsum(ad.mul(ad.max_pool1d(x, 3), pr))

    assert grad_check(loss, Tensor(vals), h=1e-3) < 1e-3


def test_batch_norm_grad_check_train_and_eval():
    state = ad.BatchNormState(3)
    gamma = Tensor(np.array([1.0, 0.8, 1.2], np.float32), requires_grad=True)
    beta = Tensor(np.array([0.1, -0.2, 0.0], np.float32), requires_grad=True)
    pr = probe(4, 3, 6)

    def loss_train(x):
        st = ad.BatchNormState(3)  # fresh state so repeated calls match
        return ad.tsum(ad.mul(ad.batch_norm(x, gamma, beta, st, train=True), pr))

    assert grad_check(loss_train, Tensor(rand(4, 3, 6) * 2.0), h=1e-3) < 1e-3

    state.mean = rand(3) * 0.1
    state.var = np.abs(rand(3)) + 0.5

    def loss_eval(x):
        return ad.tsum(ad.mul(ad.batch_norm(x, gamma, beta, state, train=False), pr))

    assert grad_check(loss_eval, Tensor(rand(4, 3, 6)), h=1e-3) < 1e-3


def test_dropout_grad_check_fixed_mask():
    pr = probe(6, 5)

    def loss(x):
        rng = np.random.default_rng(77)  # same mask every evaluation
        return ad.tsum(ad.mul(ad.dropout(x, 0.4, rng, train=True), pr))

    assert grad_check(loss, Tensor(rand(6, 5)), h=1e-3) < 1e-3


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_tensor_roundtrip(tmp_path):
    path = tmp_path / "params.bin"
    named = {"enc/w0": rand(3, 4, 5), "cls/b": rand(2)}
    ad.save_tensors(path, named, meta={"config": {"d_m": 8}})
    loaded, meta = ad.load_tensors(path)
    assert meta == {"config": {"d_m": 8}}
    assert set(loaded) == set(named)
    for k in named:
        np.testing.assert_array_equal(loaded[k], named[k])


def test_tensor_roundtrip_without_meta(tmp_path):
    path = tmp_path / "single.bin"
    ad.save_tensors(path, {"x": rand(7)})
    loaded, meta = ad.load_tensors(path)
    assert meta == {}
    np.testing.assert_array_equal(loaded["x"].shape, (7,))
