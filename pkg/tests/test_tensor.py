import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dgptycho.tensor as T
from dgptycho.errors import ContractError, DTypeError, ShapeError
from dgptycho.tensor import Tensor

from helpers import crandn, gradcheck


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- fft ---------------------------------------------------------------------------


def test_fft2_of_zeros_is_zero():
    out = T.fft2(Tensor(np.zeros((4, 4), complex)))
    assert np.all(out.data == 0)


def test_fft_round_trip(rng):
    x = crandn(rng, 8, 8)
    back = T.ifft2(T.fft2(Tensor(x))).data
    assert np.max(np.abs(back - x)) < 1e-10


def test_parseval_direct_sum(rng):
    x = crandn(rng, 16, 16)
    X = T.fft2(Tensor(x)).data
    lhs = np.sum(np.abs(x) ** 2)
    rhs = np.sum(np.abs(X) ** 2) / x.size
    assert abs(lhs - rhs) / lhs < 1e-10


def test_fft_rejects_real_input():
    with pytest.raises(DTypeError):
        T.fft2(Tensor(np.zeros((4, 4))))


def test_fft_gradients(rng):
    w = crandn(rng, 6, 6)
    gradcheck(lambda x: T.tsum(T.abs2(T.fft2(x) * Tensor(w))), [crandn(rng, 6, 6)])
    gradcheck(lambda x: T.tsum(T.abs2(T.ifft2(x) * Tensor(w))), [crandn(rng, 6, 6)])
    w2 = crandn(rng, 5, 6)
    gradcheck(lambda x: T.tsum(T.real(T.fftshift(x) * Tensor(w2))), [crandn(rng, 5, 6)])


# -- conv / upsample ---------------------------------------------------------------


def test_identity_kernel(rng):
    x = rng.standard_normal((3, 5, 6))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c] = 1
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)


def test_ones_kernel_on_constant_interior():
    c = 2.5
    out = T.conv2d(Tensor(np.full((1, 6, 6), c)), Tensor(np.ones((1, 1, 3, 3))), padding=1).data
    assert np.allclose(out[0, 1:-1, 1:-1], 9 * c)
    assert np.isclose(out[0, 0, 0], 4 * c)


def test_conv_is_cross_correlation():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1
    k = np.arange(9.0).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(k), padding=1).data[0]
    # an impulse reproduces the kernel flipped when correlating
    assert np.array_equal(out[1:4, 1:4], k[0, 0, ::-1, ::-1])


def test_conv_stride_shape(rng):
    out = T.conv2d(Tensor(rng.standard_normal((2, 8, 8))), Tensor(rng.standard_normal((4, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (4, 4, 4)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(rng.standard_normal((2, 4, 4))), Tensor(rng.standard_normal((1, 3, 3, 3))))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients_real(rng, stride):
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    gradcheck(lambda a, b: T.tsum(T.abs2(T.conv2d(a, b, stride=stride, padding=1))), [x, k])


def test_conv_gradients_complex(rng):
    x = crandn(rng, 2, 5, 5)
    k = crandn(rng, 2, 2, 3, 3)
    gradcheck(lambda a, b: T.tsum(T.abs2(T.conv2d(a, b, padding=1))), [x, k])


def test_upsample_single_pixel():
    assert np.array_equal(T.upsample2x(Tensor(np.ones((1, 1, 1)))).data, np.ones((1, 2, 2)))


def test_upsample_mean_and_gradient(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    up = T.upsample2x(x)
    assert np.isclose(up.data.mean(), x.data.mean())
    T.tsum(up).backward()
    assert np.array_equal(x.grad, np.full(x.shape, 4.0))


# -- activations -------------------------------------------------------------------


def test_relu_values():
    assert np.array_equal(T.relu(Tensor(np.array([-2.0, 3.0]))).data, [0.0, 3.0])


def test_softplus_values():
    assert np.isclose(T.softplus(Tensor(np.array(0.0))).data, np.log(2), atol=1e-15)
    assert abs(T.softplus(Tensor(np.array(40.0))).data - 40.0) < 1e-12
    assert np.isfinite(T.softplus(Tensor(np.array(1000.0))).data)


def test_complex_activation_acts_on_parts():
    z = np.array([-1 + 2j, 3 - 4j])
    assert np.array_equal(T.relu(Tensor(z)).data, [2j, 3])


@pytest.mark.parametrize("act", [T.relu, T.softplus])
def test_activation_gradients(rng, act):
    x = rng.standard_normal(12)
    x[np.abs(x) < 0.05] += 0.2  # keep away from the relu kink
    gradcheck(lambda a: T.tsum(T.abs2(act(a))), [x])
    z = crandn(rng, 6)
    z.real[np.abs(z.real) < 0.05] += 0.2
    z.imag[np.abs(z.imag) < 0.05] += 0.2
    gradcheck(lambda a: T.tsum(T.abs2(act(a))), [z])


# -- backward contract -------------------------------------------------------------


def test_quadratic_gradient(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    T.tsum(x * x).backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_complex_descent_direction(rng):
    z0 = crandn(rng, 10)
    z = Tensor(z0, requires_grad=True)
    loss = T.tsum(T.abs2(z))
    loss.backward()
    stepped = z0 - 0.1 * z.grad
    assert np.sum(np.abs(stepped) ** 2) < loss.data


def test_backward_rejects_nonscalar_and_complex():
    with pytest.raises(ContractError):
        Tensor(np.ones(3), requires_grad=True).backward()
    z = Tensor(np.ones(2, complex), requires_grad=True)
    with pytest.raises(ContractError):
        T.tsum(z).backward()


def test_fan_out_accumulates(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    y = x * 2.0
    T.tsum(y * y + y).backward()
    assert np.allclose(x.grad, 8 * x.data + 2)


def test_linearity_of_backward(rng):
    x0 = crandn(rng, 3, 4)

    def grads(a, b):
        x = Tensor(x0, requires_grad=True)
        l1 = T.tsum(T.abs2(T.fft2(x)))
        l2 = T.tsum(T.real(x * x))
        (l1 * a + l2 * b).backward()
        return x.grad

    g1, g2, g12 = grads(1.0, 0.0), grads(0.0, 1.0), grads(0.7, -1.3)
    assert np.allclose(g12, 0.7 * g1 - 1.3 * g2, rtol=1e-12, atol=1e-12)


def test_tape_determinism(rng):
    x0 = crandn(rng, 2, 6, 6)
    k0 = crandn(rng, 3, 2, 3, 3)

    def run():
        x, k = Tensor(x0, requires_grad=True), Tensor(k0, requires_grad=True)
        T.tsum(T.abs2(T.fft2(T.conv2d(x, k, padding=1)))).backward()
        return x.grad, k.grad

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# -- remaining primitives: finite differences --------------------------------------


def test_elementwise_gradients(rng):
    a, b = crandn(rng, 3, 4), crandn(rng, 3, 4)
    gradcheck(lambda x, y: T.tsum(T.abs2(x * y)), [a, b])
    gradcheck(lambda x, y: T.tsum(T.abs2(x / y + x)), [a, b + 3])
    gradcheck(lambda x, y: T.tsum(T.real(x - y) * T.imag(x)), [a, b])
    gradcheck(lambda x: T.tsum(T.abs2(T.exp(x * 0.3))), [a])
    gradcheck(lambda x: T.tsum(T.real(T.conj(x) * Tensor(b))), [a])


def test_real_valued_gradients(rng):
    r = rng.uniform(0.5, 2.0, (3, 4))
    w = crandn(rng, 3, 4)
    gradcheck(lambda x: T.tsum(T.real(T.expi(x) * Tensor(w))), [r])
    gradcheck(lambda x: T.tsum(T.sqrt(x) * x), [r])
    gradcheck(lambda x: T.tsum(T.log(x)), [r])
    gradcheck(lambda x: T.tsum(T.clamp_min(x, 1.0) * x), [r + 0.01 * (np.abs(r - 1) < 0.02)])


def test_abs_angle_gradients(rng):
    z = crandn(rng, 5)
    gradcheck(lambda x: T.tsum(T.tabs(x) * 1.5), [z])
    gradcheck(lambda x: T.tsum(T.abs2(T.angle(x))), [z])
    r = rng.standard_normal(6)
    gradcheck(lambda x: T.l1(x), [r])


def test_reduction_gradients(rng):
    x = rng.standard_normal((3, 4, 5))
    w = rng.standard_normal((3, 5))
    gradcheck(lambda a: T.tsum(T.tsum(a, axis=1) * Tensor(w)), [x])
    gradcheck(lambda a: T.tsum(T.abs2(T.mean(a, axis=(0, 2)))), [x])
    gradcheck(lambda a: T.mean(T.abs2(a)), [x])


def test_shape_gradients(rng):
    x = crandn(rng, 2, 3, 4)
    y = crandn(rng, 1, 3, 4)
    gradcheck(lambda a, b: T.tsum(T.abs2(T.concat([a, b], axis=0) * 1.3)), [x, y])
    gradcheck(lambda a: T.tsum(T.abs2(T.pad(a, ((0, 0), (1, 2), (2, 1))))), [x])
    gradcheck(lambda a: T.tsum(T.abs2(a[:, 1:3, ::2])), [x])
    gradcheck(lambda a: T.tsum(T.abs2(a[np.array([0, 0, 1])])), [x])
    w = Tensor(rng.standard_normal((4, 6)))
    gradcheck(lambda a: T.tsum(T.real(T.transpose(a, (2, 0, 1)).reshape(4, 6) * w)), [x])


def test_broadcast_bias_gradient(rng):
    x = rng.standard_normal((3, 4, 4))
    bias = rng.standard_normal((3, 1, 1))
    gradcheck(lambda a, b: T.tsum(T.abs2(a + b)), [x, bias])


def test_extract_patches_gradient(rng):
    x = crandn(rng, 2, 7, 7)
    rows, cols = np.array([0, 2, 3]), np.array([1, 1, 3])
    w = crandn(rng, 3, 2, 4, 4)
    gradcheck(lambda a: T.tsum(T.real(T.extract_patches(a, rows, cols, (4, 4)) * Tensor(w))), [x])
    with pytest.raises(ShapeError):
        T.extract_patches(Tensor(x), [5], [0], (4, 4))


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    seed=st.integers(0, 2**16),
)
def test_fft_round_trip_property(h, w, seed):
    x = crandn(np.random.default_rng(seed), h, w)
    assert np.max(np.abs(T.ifft2(T.fft2(Tensor(x))).data - x)) < 1e-10


@settings(max_examples=20, deadline=None)
@given(
    c=st.integers(1, 3),
    h=st.integers(3, 7),
    w=st.integers(3, 7),
    stride=st.sampled_from([1, 2]),
    seed=st.integers(0, 2**16),
)
def test_conv_matches_direct_loop(c, h, w, stride, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, h, w))
    k = rng.standard_normal((2, c, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    for o in range(2):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                ref = np.sum(k[o] * xp[:, stride * i : stride * i + 3, stride * j : stride * j + 3])
                assert abs(out[o, i, j] - ref) < 1e-12
