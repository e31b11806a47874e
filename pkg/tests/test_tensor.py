import numpy as np
import pytest

from erft.errors import ConfigError, ContractError, DimensionError
from erft.tensor import (DIV_EPS, Adam, AdamState, Tensor, adam_step, add_all, backward,
                         bilinear_upsample, concat, conv2d, decimate_tensor, eltwise,
                         guard_denominator, l1_mean, relu, scale, separable_conv2d, trace,
                         upsample_matrix)
from oracles import bilinear_loop, central_difference, conv2d_loop, relative_error


@pytest.mark.parametrize("padding", ["zero", "reflect", "symmetric"])
def test_conv2d_matches_loop(rng, padding):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(1, 4, 1, 1))
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding).data
    np.testing.assert_allclose(out, conv2d_loop(x, w, b, padding), atol=1e-12)


def test_conv2d_five_tap_kernel(rng):
    x = rng.normal(size=(1, 2, 9, 9))
    w = rng.normal(size=(1, 2, 5, 5))
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w), padding="reflect").data,
                               conv2d_loop(x, w, None, "reflect"), atol=1e-12)


def test_conv2d_rejects_bad_shapes(rng):
    x = Tensor(rng.normal(size=(1, 3, 5, 5)))
    with pytest.raises(ConfigError):
        conv2d(x, Tensor(np.zeros((2, 3, 2, 2))))
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros((1, 3, 1, 1))))


def test_separable_matches_outer_product_kernel(rng):
    x = rng.normal(size=(1, 2, 8, 8))
    taps = rng.uniform(size=(2, 5))
    out = separable_conv2d(Tensor(x), taps, "symmetric").data
    for c in range(2):
        w = np.outer(taps[c], taps[c])[None, None]
        ref = conv2d_loop(x[:, c:c + 1], w, None, "symmetric")
        np.testing.assert_allclose(out[:, c:c + 1], ref, atol=1e-12)


@pytest.mark.parametrize("r", [2, 3, 4])
def test_bilinear_matches_loop(rng, r):
    x = rng.normal(size=(1, 2, 5, 4))
    np.testing.assert_allclose(bilinear_upsample(Tensor(x), r).data, bilinear_loop(x, r), atol=1e-12)


def test_upsample_matrix_rows_sum_to_one():
    u = upsample_matrix(7, 4, np.float64)
    np.testing.assert_allclose(u.sum(axis=1), 1.0)
    assert u.shape == (28, 7)


def test_upsample_preserves_constants():
    x = Tensor(np.full((1, 1, 3, 3), 2.5))
    np.testing.assert_allclose(bilinear_upsample(x, 4).data, 2.5)


def test_guard_denominator_keeps_sign():
    d = np.array([-1.0, -1e-9, 0.0, 1e-9, 3.0])
    np.testing.assert_array_equal(guard_denominator(d), [-1.0, -DIV_EPS, DIV_EPS, DIV_EPS, 3.0])


def test_decimate_phase():
    x = np.arange(64.0).reshape(1, 1, 8, 8)
    out = decimate_tensor(Tensor(x), 4).data
    np.testing.assert_array_equal(out[0, 0], x[0, 0, 2::4, 2::4])


def test_l1_mean_value(rng):
    a, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3))
    assert l1_mean(Tensor(a), Tensor(b)).item() == pytest.approx(np.abs(a - b).mean(), rel=1e-12)


def test_eltwise_broadcasts_single_channel(rng):
    a, b = rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(1, 1, 4, 4))
    np.testing.assert_allclose(eltwise(Tensor(a), Tensor(b), "mul").data, a * b)
    with pytest.raises(DimensionError):
        eltwise(Tensor(a), Tensor(rng.normal(size=(1, 2, 4, 4))), "add")
    with pytest.raises(ConfigError):
        eltwise(Tensor(a), Tensor(b), "pow")


def test_frozen_inputs_build_no_graph(rng):
    x = Tensor(rng.normal(size=(1, 1, 4, 4)))
    y = relu(conv2d(x, Tensor(rng.normal(size=(1, 1, 3, 3)))))
    assert not y.requires_grad and y._parents == ()


def test_backward_needs_scalar(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        backward(scale(x, 2.0))


def test_unreached_parameter_gets_zero_gradient(rng):
    a = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    ga, gb = backward(l1_mean(a, 0.0), [a, b])
    assert np.all(gb == 0) and np.any(ga != 0)


def test_trace_is_topological(rng):
    a = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    h = relu(a)
    out = l1_mean(add_all([h, h, a]), 0.0)
    g = trace(out)
    assert g.index(a) < g.index(h) < g.index(out)


# ----------------------------------------------------------------------------
# finite differences, float64, inputs kept away from kinks

OFFSET = 1e3


def _probe_sum(out: Tensor, probe: np.ndarray) -> Tensor:
    """``mean(out * probe) + OFFSET`` as a scalar tensor.

    The l1 against ``-OFFSET`` never crosses its kink, so it acts as a plain mean.
    """
    prod = eltwise(out, Tensor(probe), "mul")
    return l1_mean(prod, -OFFSET)


def _check_grad(rng, build, leaves, samples=10, step=1e-5, tol=1e-6):
    probe = rng.normal(size=build().shape)
    grads = backward(_probe_sum(build(), probe), leaves)

    def f():
        return float((build().data * probe).mean())

    for leaf, g in zip(leaves, grads):
        for _ in range(samples):
            idx = tuple(int(rng.integers(s)) for s in leaf.shape)
            fd = central_difference(f, leaf.data, idx, step)
            assert relative_error(g[idx], fd, floor=1e-7) < tol, (leaf.shape, idx, g[idx], fd)


def _leaf(rng, shape, low=None):
    x = rng.normal(size=shape)
    if low is not None:  # push values away from zero
        x = np.sign(x) * (np.abs(x) + low)
    return Tensor(x, requires_grad=True, dtype=np.float64)


@pytest.mark.parametrize("padding", ["zero", "reflect", "symmetric"])
def test_grad_conv2d(rng, padding):
    x, w, b = _leaf(rng, (2, 3, 6, 5)), _leaf(rng, (2, 3, 3, 3)), _leaf(rng, (1, 2, 1, 1))
    _check_grad(rng, lambda: conv2d(x, w, b, padding), [x, w, b])


def test_grad_separable(rng):
    x = _leaf(rng, (1, 2, 9, 9))
    taps = rng.uniform(size=(2, 7))
    _check_grad(rng, lambda: separable_conv2d(x, taps, "symmetric"), [x])


def test_grad_upsample(rng):
    x = _leaf(rng, (1, 2, 4, 3))
    _check_grad(rng, lambda: bilinear_upsample(x, 4), [x])


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div_guard"])
def test_grad_eltwise(rng, kind):
    a = _leaf(rng, (1, 3, 4, 4))
    b = _leaf(rng, (1, 1, 4, 4), low=0.5)
    _check_grad(rng, lambda: eltwise(a, b, kind), [a, b])


def test_grad_div_guard_clamped_region_is_flat(rng):
    a = _leaf(rng, (1, 1, 2, 2))
    b = Tensor(np.full((1, 1, 2, 2), 1e-9), requires_grad=True, dtype=np.float64)
    _, gb = backward(_probe_sum(eltwise(a, b, "div_guard"), np.ones((1, 1, 2, 2))), [a, b])
    assert np.all(gb == 0)


def test_grad_relu_scale_concat_decimate(rng):
    a = _leaf(rng, (1, 2, 8, 8), low=0.05)
    b = _leaf(rng, (1, 1, 8, 8))
    _check_grad(rng, lambda: decimate_tensor(concat([relu(a), scale(b, -1.5)]), 4), [a, b])


def test_grad_l1_mean(rng):
    a = _leaf(rng, (1, 2, 3, 3))
    b = Tensor(a.data + np.sign(rng.normal(size=a.shape)) * rng.uniform(0.1, 1.0, size=a.shape),
               requires_grad=True, dtype=np.float64)
    ga, gb = backward(l1_mean(a, b), [a, b])
    for leaf, g in ((a, ga), (b, gb)):
        idx = (0, 1, 2, 0)
        fd = central_difference(lambda: l1_mean(a, b).item(), leaf.data, idx, 1e-5)
        assert relative_error(g[idx], fd) < 1e-6


def test_grad_accumulates_over_shared_nodes(rng):
    a = _leaf(rng, (1, 1, 3, 3), low=0.05)
    _check_grad(rng, lambda: add_all([relu(a), a, eltwise(a, a, "mul")]), [a])


# ----------------------------------------------------------------------------
# Adam


def test_adam_first_step_by_hand():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True, dtype=np.float64)
    g = np.array([0.3, -0.01, 0.0]).reshape(p.shape)
    state = AdamState(lr=0.1, weight_decay=0.01)
    adam_step([p], [g], state)
    x = np.array([1.0, -2.0, 0.5])
    gg = g.ravel()
    m_hat = (0.1 * gg) / (1 - 0.9)
    v_hat = (0.001 * gg * gg) / (1 - 0.999)
    expected = x * (1 - 0.1 * 0.01) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p.data.ravel(), expected, rtol=1e-12)


def test_adam_second_step_by_hand():
    p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    state = AdamState(lr=0.01, weight_decay=0.0)
    adam_step([p], [np.full(p.shape, 1.0)], state)
    adam_step([p], [np.full(p.shape, -1.0)], state)
    m = 0.9 * 0.1 + 0.1 * -1.0
    v = 0.999 * 0.001 + 0.001 * 1.0
    step2 = 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    step1 = 0.01 * 1.0 / (1.0 + 1e-8)
    assert p.data.item() == pytest.approx(-step1 - step2, rel=1e-12)


def test_adam_skips_frozen_and_accepts_missing_grad():
    frozen = Tensor(np.ones(2), dtype=np.float64)
    live = Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    adam_step([frozen, live], [np.ones(frozen.shape), None], AdamState(lr=1.0, weight_decay=0.5))
    np.testing.assert_array_equal(frozen.data, 1.0)
    np.testing.assert_allclose(live.data, 0.5)  # decay only


def test_adam_rejects_length_mismatch():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(DimensionError):
        adam_step([p], [], AdamState())


def test_adam_class_descends_quadratic():
    p = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([p], lr=0.1, weight_decay=0.0)
    for _ in range(200):
        backward(l1_mean(p, 0.0), [p])
        opt.step()
    assert abs(p.data.item()) < 0.2


def test_div_guard_by_zero():
    out = eltwise(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros((1, 1, 1, 1))), "div_guard")
    assert out.item() == pytest.approx(1e6)
