import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clcn import autodiff as ad
from clcn.errors import ContractError, DegenerateError, DimensionError, OracleError

finite = st.floats(-10, 10, allow_nan=False, width=32)


def grads_of(fn, *values):
    tape = ad.Tape()
    leaves = [tape.watch(v) for v in values]
    grads = tape.backward(fn(*leaves))
    return [grads[leaf] for leaf in leaves]


# -- affine -------------------------------------------------------------------


def test_affine_identity_weights():
    out = ad.affine([[1.0, 2.0]], np.eye(2), [0.0, 0.0])
    np.testing.assert_array_equal(out.data, [[1, 2]])


def test_affine_zero_weights_gives_bias():
    out = ad.affine([[1.0, 2.0]], np.zeros((2, 2)), [3.0, 4.0])
    np.testing.assert_array_equal(out.data, [[3, 4]])


def test_affine_matches_triple_loop(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = b[j]
            for d in range(4):
                acc += x[i, d] * w[d, j]
            expected[i, j] = acc
    np.testing.assert_allclose(ad.affine(x, w, b).data, expected, atol=1e-6)


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.affine(np.ones((2, 3)), np.ones((4, 2)), np.ones(2))
    with pytest.raises(DimensionError):
        ad.affine(np.ones((2, 3)), np.ones((3, 2)), np.ones(3))


# -- relu ---------------------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(ad.relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])


def test_relu_all_negative_has_zero_gradient():
    x = -np.arange(1, 7, dtype=np.float32).reshape(2, 3)
    (g,) = grads_of(lambda t: ad.total(ad.relu(t)), x)
    assert not ad.relu(x).data.any()
    assert not g.any()


def test_relu_gradient_at_zero_is_zero():
    (g,) = grads_of(lambda t: ad.total(ad.relu(t)), np.zeros(3))
    np.testing.assert_array_equal(g, 0)


def test_relu_gradient_matches_fd(rng):
    x = rng.random((4, 3)) + 0.1
    assert ad.grad_check(lambda t: ad.total(ad.mul(ad.relu(t), t)), x, h=1e-3) < 1e-3


# -- l2norm_rescale -------------------------------------------------------------


def test_l2norm_rescale_examples():
    np.testing.assert_allclose(ad.l2norm_rescale([[3.0, 4.0]], 5).data, [[3, 4]], atol=1e-6)
    np.testing.assert_allclose(ad.l2norm_rescale([[1.0, 0.0]], 5).data, [[5, 0]], atol=1e-6)


def test_l2norm_rescale_degenerate_row():
    with pytest.raises(DegenerateError):
        ad.l2norm_rescale([[1.0, 1.0], [0.0, 0.0]], 5)


def test_l2norm_rescale_gradient(rng):
    w = rng.standard_normal((2, 3))
    err = ad.grad_check(lambda t: ad.total(ad.mul(ad.l2norm_rescale(t, 5.0), w)), rng.standard_normal((2, 3)))
    assert err < 1e-3


@given(arrays(np.float32, (4, 3), elements=finite), st.floats(0.1, 10))
def test_l2norm_rescale_rows_have_norm_s_and_idempotent(x, s):
    if (np.linalg.norm(x.astype(np.float64), axis=1) < 1e-3).any():
        return
    once = ad.l2norm_rescale(x, s).data
    np.testing.assert_allclose(np.linalg.norm(once, axis=1), s, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(ad.l2norm_rescale(once, s).data, once, atol=1e-5)


# -- softmax cross-entropy ----------------------------------------------------------


def test_sce_uniform_logits_is_log_k():
    loss = ad.softmax_cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-6)


def test_sce_saturated_margin():
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 50.0
    assert ad.softmax_cross_entropy(logits, np.array([1, 3])).item() < 1e-6


def test_sce_accepts_distributions_and_rejects_unnormalized():
    t = np.array([[0.25, 0.75], [1.0, 0.0]])
    z = np.array([[0.3, -0.2], [1.0, 2.0]])
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert ad.softmax_cross_entropy(z, t).item() == pytest.approx(-(t * logp).sum(axis=1).mean(), abs=1e-6)
    with pytest.raises(ContractError):
        ad.softmax_cross_entropy(z, np.array([[0.5, 0.6], [1.0, 0.0]]))


def test_sce_gradient(rng):
    labels = np.array([0, 4, 2, 1])
    assert ad.grad_check(lambda z: ad.softmax_cross_entropy(z, labels), rng.standard_normal((4, 5))) < 1e-3


def test_sce_is_stable_for_huge_logits():
    loss = ad.softmax_cross_entropy(np.array([[1e4, -1e4, 0.0]]), np.array([1]))
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(2e4, rel=1e-6)


@given(arrays(np.float32, (3, 4), elements=finite), st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_sce_nonnegative_for_one_hot(z, labels):
    assert ad.softmax_cross_entropy(z, np.array(labels)).item() >= 0


# -- backward -------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(1,), (3,), (2, 5)])
def test_backward_of_sum_is_ones(shape):
    (g,) = grads_of(ad.total, np.arange(np.prod(shape), dtype=np.float32).reshape(shape))
    np.testing.assert_array_equal(g, np.ones(shape))


def test_backward_of_product():
    gx, gy = grads_of(ad.mul, 3.0, 4.0)
    assert (float(gx), float(gy)) == (4.0, 3.0)


def test_backward_rejects_non_scalar_root():
    tape = ad.Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(ContractError):
        tape.backward(ad.relu(x))


def test_unreached_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x, y = tape.watch(np.ones(3)), tape.watch(np.ones((2, 2)))
    grads = tape.backward(ad.total(x))
    np.testing.assert_array_equal(grads[y], np.zeros((2, 2)))


def test_tape_is_single_use():
    tape = ad.Tape()
    x = tape.watch(np.ones(2))
    root = ad.total(x)
    tape.backward(root)
    with pytest.raises(ContractError):
        tape.backward(root)


def test_composite_classifier_gradient(rng):
    labels = np.array([0, 2, 1, 1, 0])

    def f(x, w, b):
        return ad.softmax_cross_entropy(ad.affine(ad.relu(x), w, b), labels)

    x = rng.standard_normal((5, 4))
    x = np.where(np.abs(x) < 0.05, 0.1, x)
    assert ad.grad_check(f, [x, rng.standard_normal((4, 3)), rng.standard_normal(3)]) < 1e-3


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**16))
def test_backward_is_linear(a, b, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((3, 4))
    labels = np.array([0, 1, 3])
    l1 = lambda t: ad.softmax_cross_entropy(t, labels)  # noqa: E731
    l2 = lambda t: ad.mean(ad.mul(ad.softmax(t), t))  # noqa: E731
    (g1,) = grads_of(l1, x)
    (g2,) = grads_of(l2, x)
    (g,) = grads_of(lambda t: ad.add(ad.scale(l1(t), a), ad.scale(l2(t), b)), x)
    np.testing.assert_allclose(g, a * g1 + b * g2, atol=1e-5)


# -- grad_check itself --------------------------------------------------------------


def test_grad_check_square():
    assert ad.grad_check(lambda x: ad.mul(x, x), np.array(3.0)) < 1e-6


def test_grad_check_constant_is_exact():
    assert ad.grad_check(lambda x: ad.Tensor(7.0), np.ones(4)) == 0.0


def test_grad_check_step_bounds():
    with pytest.raises(ContractError):
        ad.grad_check(lambda x: ad.total(x), np.ones(2), h=1e-7)
    with pytest.raises(ContractError):
        ad.grad_check(lambda x: ad.total(x), np.ones(2), h=0.1)


def test_grad_check_non_finite_probe():
    def f(x):
        if ad.active_dtype() is np.float64 and x.data[0] != 1.0:
            return ad.Tensor(np.inf)
        return ad.total(x)

    with pytest.raises(OracleError):
        ad.grad_check(f, np.ones(2))


def test_grad_check_detects_a_wrong_gradient():
    def wrong(x):
        # forward is x^2 but the recorded vjp says 3x
        return ad._emit(x.data**2, [x], lambda g: [g * 3 * x.data])

    assert ad.grad_check(lambda x: ad.total(wrong(x)), np.array([2.0])) > 0.1


# -- remaining primitives --------------------------------------------------------


def test_segment_mean_and_mask():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [5.0, 5.0]])
    means, present = ad.segment_mean(x, np.array([0, 0, 0, 2]), 4)
    np.testing.assert_allclose(means.data, [[1, 1], [0, 0], [5, 5], [0, 0]])
    np.testing.assert_array_equal(present, [True, False, True, False])


def test_nll_clamps_and_counts():
    probs = np.array([[1.0, 0.0], [0.5, 0.5]])
    loss, clamped = ad.nll(probs, np.array([1, 0]))
    assert clamped == 1
    assert loss.item() == pytest.approx((-math.log(1e-12) - math.log(0.5)) / 2, rel=1e-5)


@given(arrays(np.float32, (5, 6), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = ad.softmax(x).data
    assert (p >= 0).all() and (p <= 1).all()
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)


def test_float32_by_default_float64_in_shadow_mode():
    assert ad.Tensor([1.0]).data.dtype == np.float32
    with ad.float64():
        assert ad.Tensor([1.0]).data.dtype == np.float64
    assert ad.active_dtype() is np.float32


def test_finite_check():
    assert ad.Tensor([1.0, 2.0]).is_finite()
    assert not ad.Tensor([1.0, np.nan]).is_finite()
