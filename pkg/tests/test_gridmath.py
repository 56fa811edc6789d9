import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from srgd import gridmath as gm
from srgd.gridmath import DomainError, Grid, Param, ShapeError, Tape
from srgd.gradcheck import REL_TOL, max_rel_error

from oracles import central_difference


def grad_of(fn, x0):
    x = Grid(np.array(x0, dtype=float), requires_grad=True)
    with Tape() as t:
        t.backward(fn(x))
    return t.grad(x)


def test_add_arrays():
    assert np.array_equal(gm.add(Grid([1.0, 2.0]), Grid([3.0, 4.0])).data, [4.0, 6.0])


def test_mul_by_zero_has_zero_adjoint():
    g = grad_of(lambda x: gm.total(gm.mul(x, 0.0)), np.ones((3, 3)))
    assert np.array_equal(g, np.zeros((3, 3)))


def test_exp_derivative_at_zero():
    assert grad_of(lambda x: gm.exp(x), 0.0) == pytest.approx(1.0)


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "pow"])
def test_elementwise_binary_gradients(kind):
    rng = np.random.default_rng(1)
    b = rng.uniform(0.5, 1.5, (4, 5))
    other = 2.0 if kind == "pow" else b
    err = max_rel_error(lambda x: gm.total(gm.elementwise(kind, x, other) * b),
                        rng.uniform(0.5, 1.5, (4, 5)), rng)
    assert err <= REL_TOL


@pytest.mark.parametrize("kind", ["exp", "log", "relu", "leaky_relu"])
def test_elementwise_unary_gradients(kind):
    rng = np.random.default_rng(2)
    x0 = rng.uniform(0.2, 1.0, (4, 5)) * rng.choice([-1, 1], (4, 5))
    if kind == "log":
        x0 = np.abs(x0)
    w = rng.random((4, 5))
    err = max_rel_error(lambda x: gm.total(gm.elementwise(kind, x) * w), x0, rng)
    assert err <= REL_TOL


def test_domain_errors():
    with pytest.raises(DomainError):
        gm.log(Grid([1.0, 0.0]))
    with pytest.raises(DomainError):
        gm.div(Grid([1.0]), Grid([0.0]))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        gm.add(Grid(np.ones((2, 3))), Grid(np.ones((3, 2))))


def test_mean_of_ones():
    assert gm.reduce("mean", Grid(np.ones((4, 4)))).item() == 1.0


def test_window_sum_of_centre_impulse():
    x = np.zeros((3, 3))
    x[1, 1] = 1
    assert np.array_equal(gm.reduce("sum", Grid(x), "window", 3).data, np.ones((3, 3)))


def test_window_sum_corner_counts_in_bounds_neighbours():
    out = gm.window_sum(Grid(np.ones((5, 5))), 3).data
    assert out[0, 0] == 4
    assert out[0, 2] == 6
    assert out[2, 2] == 9


def test_window_sum_rejects_even_k():
    with pytest.raises(ValueError):
        gm.window_sum(Grid(np.ones((4, 4))), 4)


def test_window_sum_is_self_adjoint():
    rng = np.random.default_rng(3)
    w = rng.random((1, 7, 6))
    g = grad_of(lambda x: gm.total(gm.window_sum(x, 3) * w), rng.random((1, 7, 6)))
    assert np.allclose(g, gm.window_sum(Grid(w), 3).data, atol=1e-14)


def test_conv_identity_kernel():
    rng = np.random.default_rng(4)
    x = rng.random((3, 6, 6))
    k = np.zeros((3, 3, 1, 1))
    k[np.arange(3), np.arange(3)] = 1
    assert np.array_equal(gm.conv2d(Grid(x), Param(k)).data, x)


def test_conv_average_of_constant():
    out = gm.conv2d(Grid(np.full((1, 6, 6), 2.5)), Param(np.full((1, 1, 3, 3), 1 / 9))).data
    assert np.allclose(out[0, 1:-1, 1:-1], 2.5, atol=1e-15)


def test_conv_stride_two_output_size():
    out = gm.conv2d(Grid(np.ones((1, 7, 8))), Param(np.ones((2, 1, 3, 3))), stride=2)
    assert out.shape == (2, 4, 4)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        gm.conv2d(Grid(np.ones((2, 4, 4))), Param(np.ones((1, 3, 3, 3))))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_kernel_and_input_gradients(stride):
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-1, 1, (2, 8, 8))
    k0 = rng.uniform(-1, 1, (3, 2, 3, 3))
    wout = rng.random((3, 8 // stride, 8 // stride))
    assert max_rel_error(lambda k: gm.total(gm.conv2d(Grid(x0), k, stride=stride) * wout),
                         k0, rng, 40) <= 1e-6
    assert max_rel_error(lambda x: gm.total(gm.conv2d(x, Grid(k0), stride=stride) * wout),
                         x0, rng, 40) <= 1e-6


def test_upsample_constant_and_single_pixel():
    assert np.array_equal(gm.upsample2x(Grid(np.full((1, 3, 4), 0.7))).data,
                          np.full((1, 6, 8), 0.7))
    assert np.array_equal(gm.upsample2x(Grid(np.full((1, 1, 1), 3.0))).data,
                          np.full((1, 2, 2), 3.0))


def test_upsample_gradient():
    rng = np.random.default_rng(6)
    w = rng.random((2, 10, 8))
    assert max_rel_error(lambda x: gm.total(gm.upsample2x(x) * w),
                         rng.uniform(-1, 1, (2, 5, 4)), rng, 40) <= 1e-6


def test_backward_of_sum_and_half_square():
    x0 = np.random.default_rng(7).random((3, 4))
    assert np.array_equal(grad_of(gm.total, x0), np.ones((3, 4)))
    assert np.allclose(grad_of(lambda x: gm.total(x * x) / 2.0, x0), x0, atol=1e-15)


def test_backward_rejects_non_scalar_and_repeat():
    x = Grid(np.ones(3), requires_grad=True)
    with Tape() as t:
        y = x * 2.0
        with pytest.raises(ShapeError):
            t.backward(y)
        s = gm.total(y)
        t.backward(s)
        with pytest.raises(RuntimeError):
            t.backward(s)
        t.reset()


def test_unreached_input_gets_zero_gradient():
    x = Grid(np.ones(3), requires_grad=True)
    z = Grid(np.ones(2), requires_grad=True)
    with Tape() as t:
        t.backward(gm.total(x))
    assert np.array_equal(t.grad(z), np.zeros(2))


def test_tape_is_deterministic():
    rng = np.random.default_rng(8)
    x0, w = rng.random((1, 9, 9)), rng.random((4, 1, 3, 3))

    def run():
        x = Grid(x0, requires_grad=True)
        with Tape() as t:
            y = gm.total(gm.leaky_relu(gm.conv2d(x, Grid(w))) ** 2)
            t.backward(y)
        return y.item(), t.grad(x)

    (v1, g1), (v2, g2) = run(), run()
    assert v1 == v2 and np.array_equal(g1, g2)


def test_adam_zero_gradient_keeps_param():
    p = Param(np.array([1.0, -2.0]))
    gm.adam_update(p, np.zeros(2))
    assert np.array_equal(p.grid.data, [1.0, -2.0])
    assert p.step_count == 1


def test_adam_first_step_hand_computed():
    g = np.array([0.3, -2.0, 1e-3])
    p = Param(np.zeros(3))
    gm.adam_update(p, g, lr=1e-4)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expected = -1e-4 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p.grid.data, expected, rtol=1e-12, atol=0)


def test_adam_default_rate_and_shape_check():
    import inspect
    assert inspect.signature(gm.adam_update).parameters["lr"].default == 1e-4
    with pytest.raises(ShapeError):
        gm.adam_update(Param(np.zeros(3)), np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1, 1)),
       arrays(np.float64, (3, 4), elements=st.floats(-1, 1)))
def test_product_rule_property(a, b):
    ga = grad_of(lambda x: gm.total(x * b), a)
    assert np.array_equal(ga, b)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (1, 6, 6), elements=st.floats(-1, 1)))
def test_ops_stay_finite(x):
    y = gm.leaky_relu(gm.conv2d(Grid(x), Param(np.full((2, 1, 3, 3), 0.5))))
    assert np.all(np.isfinite(gm.upsample2x(y).data))


def test_take_gradient_with_fancy_index():
    rng = np.random.default_rng(9)
    idx = np.array([0, 2, 2, 5])
    g = grad_of(lambda x: gm.total(gm.take(x, idx)), rng.random(6))
    assert np.array_equal(g, [1, 0, 2, 0, 0, 1])


def test_bilinear_sample_gradient_matches_difference():
    rng = np.random.default_rng(10)
    img = rng.random((1, 6, 6))
    coords0 = rng.uniform(0.3, 4.7, (2, 5))
    w = rng.random((1, 5))
    f = lambda c: float((gm.bilinear_sample(img, c).data * w).sum())
    g = grad_of(lambda c: gm.total(gm.bilinear_sample(img, c) * w), coords0)
    for idx in [(0, 1), (1, 3), (0, 4)]:
        assert g[idx] == pytest.approx(central_difference(f, coords0, idx), rel=1e-6)
