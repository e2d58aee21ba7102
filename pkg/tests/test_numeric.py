import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caltune.errors import NonFiniteEvaluation, NonFiniteScore, NonPositiveTemperature, ZeroVector
from caltune.numeric import (
    cosine_similarity,
    entropy,
    entropy_grad,
    finite_difference_gradient,
    grad_check,
    l2_normalize,
    softmax_backward,
    softmax_temperature,
)


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
    with pytest.raises(ZeroVector):
        l2_normalize([0.0, 0.0])


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=16))
def test_l2_normalize_unit_norm(xs):
    x = np.array(xs)
    if np.linalg.norm(x) <= 1e-12:
        with pytest.raises(ZeroVector):
            l2_normalize(x)
        return
    assert abs(np.linalg.norm(l2_normalize(x)) - 1.0) <= 1e-9


@pytest.mark.parametrize(
    "a, b, expected",
    [((1, 0), (1, 0), 1.0), ((1, 0), (0, 1), 0.0), ((1, 1), (1, 0), 0.7071067811865475)],
)
def test_cosine_similarity(a, b, expected):
    assert cosine_similarity(a, b) == pytest.approx(expected, abs=1e-15)


def test_cosine_similarity_zero_vector():
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 0])


def test_softmax_examples():
    for c in (-3.0, 0.0, 7.5):
        np.testing.assert_allclose(softmax_temperature([c, c, c], 0.01), [1 / 3] * 3, atol=1e-15)
    # e / (e + 1) evaluated by hand
    e = math.e
    np.testing.assert_allclose(softmax_temperature([1.0, 0.0], 1.0), [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    np.testing.assert_allclose(softmax_temperature([1.0, 0.0], 1.0), [0.73105858, 0.26894142], atol=5e-9)
    assert softmax_temperature([1.0, 0.0], 0.01)[0] > 1 - 1e-9


def test_softmax_no_overflow_at_small_tau():
    p = softmax_temperature([1.0, -1.0, 0.99], 1e-3)
    assert np.all(np.isfinite(p))
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_softmax_errors():
    with pytest.raises(NonPositiveTemperature):
        softmax_temperature([1.0, 2.0], 0.0)
    with pytest.raises(NonPositiveTemperature):
        softmax_temperature([1.0, 2.0], -1.0)
    with pytest.raises(NonFiniteScore):
        softmax_temperature([1.0, np.nan], 1.0)
    with pytest.raises(NonFiniteScore):
        softmax_temperature([np.inf, 0.0], 1.0)


# scores on a 0.01 lattice: either exactly tied or separated far beyond float resolution at tau = 1e3
lattice = st.lists(st.integers(-300, 300), min_size=2, max_size=12).map(lambda v: np.array(v) / 100.0)
taus = st.floats(1e-3, 1e3)


@given(lattice, taus)
def test_softmax_sums_to_one(scores, tau):
    p = softmax_temperature(scores, tau)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all((p >= 0) & (p <= 1))


@given(lattice, taus, taus)
def test_softmax_argmax_independent_of_tau(scores, tau1, tau2):
    a = int(np.argmax(softmax_temperature(scores, tau1)))
    b = int(np.argmax(softmax_temperature(scores, tau2)))
    assert a == b == int(np.argmax(scores))


def test_entropy_examples():
    assert entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-15)
    assert entropy([0.0, 1.0, 0.0]) == 0.0
    assert entropy([0.5, 0.5, 0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)


@given(st.lists(st.floats(0, 1), min_size=2, max_size=10), st.randoms(use_true_random=False))
def test_entropy_permutation_invariant_and_bounded(ws, rnd):
    w = np.array(ws)
    if w.sum() <= 0:
        return
    p = w / w.sum()
    q = p.copy()
    rnd.shuffle(q)
    assert entropy(p) == pytest.approx(entropy(q), abs=1e-12)
    assert -1e-12 <= entropy(p) <= math.log(len(p)) + 1e-12


def test_entropy_batched_rows():
    p = np.array([[0.25] * 4, [1.0, 0, 0, 0]])
    np.testing.assert_allclose(entropy(p), [math.log(4), 0.0], atol=1e-15)


def test_grad_check_quadratic():
    err = grad_check(lambda x: float(x @ x), np.array([1.0, 2.0]), np.array([2.0, 4.0]))
    assert err < 1e-6


def test_grad_check_entropy_of_softmax():
    rng = np.random.default_rng(11)
    x = rng.standard_normal(5)
    tau = 0.7

    def f(s):
        return entropy(softmax_temperature(s, tau))

    p = softmax_temperature(x, tau)
    g = softmax_backward(p, entropy_grad(p), tau)
    assert grad_check(f, x, g) < 1e-5


def test_grad_check_detects_sign_flip():
    x = np.array([0.3, -1.2, 2.0])
    assert grad_check(lambda v: float(v @ v), x, -2 * x) > 0.5


def test_grad_check_non_finite():
    with pytest.raises(NonFiniteEvaluation):
        grad_check(lambda v: float(np.log(v[0])), np.array([0.0]), np.array([1.0]))


def test_finite_difference_step_scales_with_magnitude():
    # cubic: the central-difference error is h^2 f'''/6, so the relative step must stay small
    x = np.array([1e4])
    g = finite_difference_gradient(lambda v: float(v[0] ** 3), x)
    assert g[0] == pytest.approx(3e8, rel=1e-8)


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    s = rng.standard_normal(6)
    w = rng.standard_normal(6)
    tau = 0.3

    def f(v):
        return float(w @ softmax_temperature(v, tau))

    g = softmax_backward(softmax_temperature(s, tau), w, tau)
    assert grad_check(f, s, g) < 1e-8
