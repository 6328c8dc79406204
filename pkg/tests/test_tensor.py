import numpy as np
import pytest

import dnl.tensor as T
from dnl.errors import ContractViolation, NumericError
from dnl.tensor import Tensor

from gradcheck import check_gradients


def conv2d_loops(x, w, stride, padding):
    """Direct 7-loop cross-correlation, float64."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


# -- conv2d --------------------------------------------------------------------------
def test_conv2d_sum_of_ones():
    out = T.conv2d(Tensor.ones((1, 1, 3, 3)), Tensor.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 7)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 2, 5)])
def test_conv2d_matches_loops(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding + k)
    x = rng.normal(size=(2, 3, 8, 9))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    got = T.conv2d(Tensor(x), Tensor(w), stride, padding, bias=Tensor(b)).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, stride, padding) + b[None, :, None, None], atol=1e-10)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_same_padding_preserves_extent(k):
    out = T.conv2d(Tensor.zeros((1, 2, 7, 6)), Tensor.zeros((3, 2, k, k)), 1, (k - 1) // 2)
    assert out.shape == (1, 3, 7, 6)


def test_conv2d_output_extent_formula():
    for h, k, s, p in [(64, 4, 2, 1), (7, 4, 1, 1), (10, 3, 3, 0)]:
        out = T.conv2d(Tensor.zeros((1, 1, h, h)), Tensor.zeros((1, 1, k, k)), s, p)
        assert out.shape[2] == (h + 2 * p - k) // s + 1


def test_conv2d_gradient_of_sum():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    err = check_gradients(lambda a, b: T.sum_all(T.conv2d(a, b)), [x, w])
    assert err < 1e-4


def test_conv2d_contract_violations():
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor.zeros((1, 2, 5, 5)), Tensor.zeros((1, 3, 3, 3)))
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor.zeros((1, 1, 5, 5)), Tensor.zeros((1, 1, 3, 3)), stride=0)
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor.zeros((1, 1, 5, 5)), Tensor.zeros((1, 1, 3, 3)), padding=-1)
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor.zeros((1, 1, 2, 2)), Tensor.zeros((1, 1, 3, 3)))


def test_conv2d_non_finite_is_numeric_error():
    x = np.ones((1, 1, 3, 3), dtype=np.float32)
    x[0, 0, 1, 1] = np.inf
    with pytest.raises(NumericError):
        T.conv2d(Tensor(x), Tensor.ones((1, 1, 3, 3)))


# -- upsampling ------------------------------------------------------------------------
def test_upsample_duplicates_blocks():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float64)
    np.testing.assert_array_equal(T.upsample2x(x).data[0, 0], expected)
    np.testing.assert_array_equal(T.upsample2x_conv(x, Tensor(np.ones((1, 1, 1, 1)))).data[0, 0], expected)


def test_upsample_conv_gradient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 3, 3))
    w = rng.normal(size=(2, 2, 3, 3))
    err = check_gradients(lambda a, b: T.sum_all(T.square(T.upsample2x_conv(a, b))), [x, w])
    assert err < 1e-4


# -- instance norm -----------------------------------------------------------------------
def test_instance_norm_constant_plane_is_zero():
    out = T.instance_norm(Tensor(np.full((1, 2, 4, 4), 3.5)), Tensor.ones(2), Tensor.zeros(2))
    np.testing.assert_array_equal(out.data, 0.0)


def test_instance_norm_standardises():
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(2, 3, 8, 8))
    out = T.instance_norm(Tensor(x), Tensor.ones(3, dtype=np.float64), Tensor.zeros(3, dtype=np.float64)).data
    np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=(2, 3)), 1.0, atol=1e-4)


def test_instance_norm_zero_gamma_gives_beta():
    x = np.random.default_rng(2).normal(size=(1, 2, 3, 3))
    beta = np.array([0.25, -1.5])
    out = T.instance_norm(Tensor(x), Tensor(np.zeros(2)), Tensor(beta)).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta[None, :, None, None], x.shape))


def test_instance_norm_eps_must_be_positive():
    with pytest.raises(ContractViolation):
        T.instance_norm(Tensor.zeros((1, 1, 2, 2)), Tensor.ones(1), Tensor.zeros(1), eps=0.0)


# -- activations --------------------------------------------------------------------------
def test_leaky_relu_values_and_slope_gradient():
    x = Tensor(np.array([2.0, -2.0, -1.0, 0.0]), requires_grad=True)
    y = T.leaky_relu(x, 0.2)
    np.testing.assert_allclose(y.data, [2.0, -0.4, -0.2, 0.0])
    T.sum_all(y).backward()
    np.testing.assert_allclose(x.grad, [1.0, 0.2, 0.2, 0.2])


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ContractViolation):
        T.leaky_relu(Tensor.zeros(3), 1.0)


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise"):
        out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


# -- backward -----------------------------------------------------------------------------
def test_backward_sum_of_squares():
    x = np.random.default_rng(4).normal(size=(3, 4)).astype(np.float32)
    t = Tensor(x, requires_grad=True)
    T.sum_all(t * t).backward()
    np.testing.assert_array_equal(t.grad, 2 * x)


def test_unreached_parameter_has_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    p = Tensor(np.ones(3), requires_grad=True)
    T.sum_all(x * 2.0).backward()
    assert p.grad is None or not p.grad.any()


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractViolation):
        (x * 2.0).backward()


def test_gradient_linearity():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(2, 1, 3, 3))
    x = Tensor(rng.normal(size=(1, 1, 6, 6)))

    def f(wt):
        return T.mean_all(T.square(T.conv2d(x, wt, padding=1)))

    def g(wt):
        return T.sum_all(T.sigmoid(T.conv2d(x, wt)))

    joint = Tensor(w, requires_grad=True)
    (f(joint) + g(joint)).backward()
    separate = Tensor(w, requires_grad=True)
    f(separate).backward()
    g(separate).backward()
    np.testing.assert_allclose(joint.grad, separate.grad, rtol=1e-12, atol=1e-14)


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x
    T.sum_all(y + y * 3.0).backward()
    np.testing.assert_allclose(x.grad, 8 * x.data)


def test_three_layer_composite_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 1, 6, 6))
    w1 = rng.normal(size=(2, 1, 3, 3))
    g1, b1 = rng.normal(1.0, 0.2, size=2), rng.normal(size=2)
    w2 = rng.normal(size=(2, 2, 3, 3))
    g2, b2 = rng.normal(1.0, 0.2, size=2), rng.normal(size=2)
    w3 = rng.normal(size=(1, 2, 3, 3))

    def net(x, w1, g1, b1, w2, g2, b2, w3):
        h = T.leaky_relu(T.instance_norm(T.conv2d(x, w1, padding=1), g1, b1), 0.2)
        h = T.leaky_relu(T.instance_norm(T.conv2d(h, w2, padding=1), g2, b2), 0.2)
        return T.mean_all(T.square(T.conv2d(h, w3, padding=1)))

    assert check_gradients(net, [x, w1, g1, b1, w2, g2, b2, w3]) < 1e-3


def test_detach_cuts_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    y = (x * 3.0).detach()
    assert not y.requires_grad
    z = T.sum_all(y * x)
    z.backward()
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_concat_gradient_splits():
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
    out = T.concat([a, b], axis=1)
    assert out.shape == (1, 5, 2, 2)
    T.sum_all(out * np.arange(5, dtype=np.float64).reshape(1, 5, 1, 1)).backward()
    np.testing.assert_array_equal(a.grad[0, :, 0, 0], [0, 1])
    np.testing.assert_array_equal(b.grad[0, :, 0, 0], [2, 3, 4])


def test_float32_default_and_float64_preserved():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64
    assert T.conv2d(Tensor.ones((1, 1, 3, 3)), Tensor.ones((1, 1, 3, 3))).dtype == np.float32
