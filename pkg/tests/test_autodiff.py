import numpy as np
import pytest

import casd.autodiff as ad
from casd.autodiff import Tensor
from casd.errors import ContractError, ShapeError
from casd.gradcheck import op_checks


def test_every_op_matches_finite_differences():
    for result in op_checks(seed=3):
        assert result.passed, str(result)


def test_backward_accumulates_through_reused_node():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True, dtype=np.float64)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x
    ad.tsum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        ad.mul(x, x).backward()


def test_no_grad_blocks_graph_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad
    assert y._backward is None


def test_detach_cuts_gradient_flow():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    y = ad.mul(x.detach(), x)
    ad.tsum(y).backward()
    np.testing.assert_allclose(x.grad, x.data)  # only the live factor


def test_use_dtype_scopes_new_tensors():
    assert Tensor(1.5).dtype == np.float32
    with ad.use_dtype(np.float64):
        assert Tensor(1.5).dtype == np.float64
    assert Tensor(1.5).dtype == np.float32


def test_broadcast_limited_to_size_one_axes():
    a = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.add(a, Tensor(np.ones((2, 2))))


def test_reshape_with_inferred_axis():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    assert ad.reshape(x, (2, -1)).shape == (2, 6)
    with pytest.raises(ShapeError):
        ad.reshape(x, (5, 5))


def test_softmax_rows_sum_to_one_and_is_shift_stable():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 7)) * 300
    y = ad.softmax(Tensor(logits, dtype=np.float64), axis=1)
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, atol=1e-12)
    shifted = ad.softmax(Tensor(logits + 1234.5, dtype=np.float64), axis=1)
    np.testing.assert_allclose(y.data, shifted.data, atol=1e-12)
    assert np.isfinite(y.data).all()


def test_sigmoid_saturates_without_overflow():
    y = ad.sigmoid(Tensor(np.array([-200.0, 0.0, 200.0]), dtype=np.float64))
    np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0], atol=1e-12)


def test_elementwise_max_ties_route_gradient_to_first():
    a = Tensor(np.full(4, 2.0), requires_grad=True, dtype=np.float64)
    b = Tensor(np.full(4, 2.0), requires_grad=True, dtype=np.float64)
    ad.tsum(ad.elementwise_max([a, b])).backward()
    np.testing.assert_array_equal(a.grad, np.ones(4))
    assert b.grad is None or not b.grad.any()


def test_clip_gradient_zero_outside_bounds():
    x = Tensor(np.array([-0.5, 0.5, 1.5]), requires_grad=True, dtype=np.float64)
    ad.tsum(ad.clip(x, 0.0, 1.0)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_conv2d_matches_direct_convolution():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        got = ad.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                        Tensor(b, dtype=np.float64), stride=stride, pad=pad).data
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        ho = (xp.shape[1] - 3) // stride + 1
        wo = (xp.shape[2] - 3) // stride + 1
        want = np.zeros((3, ho, wo))
        for o in range(3):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    want[o, i, j] = (patch * w[o]).sum() + b[o]
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_conv2d_rejects_even_kernels():
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones(1)))


def test_maxpool_drops_odd_tail():
    x = Tensor(np.arange(2 * 5 * 5, dtype=np.float64).reshape(2, 5, 5))
    y = ad.maxpool2d(x)
    assert y.shape == (2, 2, 2)
    assert y.data[0, 0, 0] == 6.0  # max of the top-left 2x2 window


def test_sgd_step_matches_manual_update():
    lr, mu, wd = 0.1, 0.9, 0.01
    theta = np.array([1.0, -2.0])
    g1, g2 = np.array([0.5, 0.5]), np.array([-1.0, 0.25])

    p = Tensor(theta.copy(), requires_grad=True, dtype=np.float64)
    p.grad = g1.copy()
    ad.sgd_step([p], lr, mu, wd)
    v = g1 + wd * theta
    theta = theta - lr * v
    np.testing.assert_allclose(p.data, theta, rtol=1e-12)
    assert p.grad is None

    p.grad = g2.copy()
    ad.sgd_step([p], lr, mu, wd)
    v = mu * v + g2 + wd * theta
    theta = theta - lr * v
    np.testing.assert_allclose(p.data, theta, rtol=1e-12)


def test_mse_and_smooth_l1_values():
    a = Tensor(np.array([0.6]), dtype=np.float64)
    b = Tensor(np.array([0.2]), dtype=np.float64)
    assert abs(ad.mse(a, b).item() - 0.16) < 1e-12
    # below the kink: 0.5 d^2, above: |d| - 0.5
    half = ad.smooth_l1(Tensor(np.array([0.5]), dtype=np.float64), Tensor(np.zeros(1), dtype=np.float64))
    two = ad.smooth_l1(Tensor(np.array([2.0]), dtype=np.float64), Tensor(np.zeros(1), dtype=np.float64))
    assert abs(half.item() - 0.125) < 1e-12
    assert abs(two.item() - 1.5) < 1e-12


def test_finite_checks_flag_catches_nonfinite():
    ad.set_finite_checks(True)
    try:
        with np.errstate(divide="ignore"), pytest.raises(ContractError):
            ad.log(Tensor(np.zeros(2)))
    finally:
        ad.set_finite_checks(False)


def test_reverse_realigns_flipped_input():
    x = np.arange(6.0).reshape(2, 3)
    y = ad.reverse(Tensor(x), axis=-1)
    np.testing.assert_array_equal(y.data, x[:, ::-1])
    z = ad.reverse(y, axis=-1)
    np.testing.assert_array_equal(z.data, x)
