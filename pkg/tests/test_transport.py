import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import wasserstein_distance

from dtrec.models import init_mlp_critic, point_forward
from dtrec.transport import (
    DegenerateBatch,
    LipschitzPenaltyConfig,
    certified_ipm,
    exact_ot,
    fit_critic,
    interpolate,
    ipm_estimate,
    lipschitz_penalty,
    pairwise_cost,
    penalty_at,
)


def test_dirac_to_dirac():
    assert exact_ot([1.0], [1.0], [[2.5]]) == pytest.approx(2.5)


def test_identical_is_zero():
    x = np.array([[0.0], [1.0], [3.0]])
    p = np.array([0.2, 0.3, 0.5])
    assert exact_ot(p, p, pairwise_cost(x, x)) == pytest.approx(0.0, abs=1e-12)


def test_two_point():
    C = pairwise_cost([[0.0], [2.0]], [[1.0], [3.0]])
    assert exact_ot([0.5, 0.5], [0.5, 0.5], C) == pytest.approx(1.0)


def test_bad_inputs():
    with pytest.raises(ValueError):
        exact_ot([0.5, 0.4], [1.0], [[1.0], [1.0]])
    with pytest.raises(ValueError):
        exact_ot([1.0], [1.0], [[1.0, 2.0]])
    with pytest.raises(ValueError):
        exact_ot(np.full(17, 1 / 17), [1.0], np.ones((17, 1)))


def _dist(data, n):
    m = data.draw(st.lists(st.floats(0.01, 1), min_size=n, max_size=n))
    return np.array(m) / np.sum(m)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_one_dimensional_matches_cdf_formula(data):
    n, k = data.draw(st.integers(1, 6)), data.draw(st.integers(1, 6))
    xs = np.array(data.draw(st.lists(st.floats(-3, 3), min_size=n, max_size=n)))
    ys = np.array(data.draw(st.lists(st.floats(-3, 3), min_size=k, max_size=k)))
    p, q = _dist(data, n), _dist(data, k)
    lp = exact_ot(p, q, pairwise_cost(xs[:, None], ys[:, None]))
    assert lp == pytest.approx(wasserstein_distance(xs, ys, p, q), abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.data())
def test_symmetry_and_triangle(data):
    pts = np.array(data.draw(st.lists(st.floats(-2, 2), min_size=8, max_size=8))).reshape(4, 2)
    a, b, c = _dist(data, 4), _dist(data, 4), _dist(data, 4)
    C = pairwise_cost(pts, pts)
    ab, ba = exact_ot(a, b, C), exact_ot(b, a, C)
    assert ab == pytest.approx(ba, abs=1e-9)
    assert ab <= exact_ot(a, c, C) + exact_ot(c, b, C) + 1e-9


# -- batch IPM -------------------------------------------------------------------


def test_ipm_simple_values():
    t = ipm_estimate(np.array([1.0, 0.0]), None, [1.0, 0.0], [0.0, 1.0])
    assert t.value == 1.0
    t = ipm_estimate(np.array([1.0, 0.0]), None, [0.0, 1.0], [1.0, 0.0])
    assert t.value == -1.0


def test_ipm_self_normalized_vs_raw():
    g = np.array([2.0, 4.0])
    sn = ipm_estimate(g, None, [1.0, 3.0], [0.5, 0.5])
    assert sn.source_side == pytest.approx(3.5) and sn.target_side == pytest.approx(3.0)
    raw = ipm_estimate(g, None, [1.0, 3.0], [0.5, 0.5], "raw_sum")
    assert raw.value == pytest.approx(14.0 - 3.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.floats(-2, 2), st.floats(-2, 2))
def test_ipm_linear_in_critic(g1, g2, a, b):
    w, r = [0.2, 1.0, 0.4], [0.9, 0.1, 0.5]
    lhs = ipm_estimate(a * np.array(g1) + b * np.array(g2), None, w, r).value
    rhs = a * ipm_estimate(np.array(g1), None, w, r).value + b * ipm_estimate(np.array(g2), None, w, r).value
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_ipm_errors():
    with pytest.raises(DegenerateBatch):
        ipm_estimate(np.array([1.0]), None, [0.0], [1.0])
    with pytest.raises(DegenerateBatch):
        ipm_estimate(np.array([]), None, [], [])
    with pytest.raises(ValueError):
        ipm_estimate(np.array([1.0]), None, [-1.0], [1.0])
    with pytest.raises(ValueError):
        ipm_estimate(np.array([1.0]), None, [1.0], [1.5])


# -- gradient penalty -----------------------------------------------------------------


def _linear_critic(slope, dim=2):
    # one hidden unit kept positive, so the critic is affine with gradient `slope`
    c = init_mlp_critic(dim, np.random.default_rng(0), (1,))
    c.layers[0][0][...] = np.asarray(slope)[None, :]
    c.layers[0][1][...] = 100.0
    c.layers[1][0][...] = 1.0
    c.layers[1][1][...] = 0.0
    return c


def test_penalty_zero_for_unit_slope():
    g = _linear_critic([0.6, 0.8])
    Z = np.random.default_rng(1).normal(size=(10, 2))
    assert penalty_at(g, Z)[0] == pytest.approx(0.0, abs=1e-14)


def test_penalty_one_for_constant():
    g = _linear_critic([0.0, 0.0])
    assert penalty_at(g, np.zeros((3, 2)))[0] == 1.0


def test_penalty_hand_computed():
    # gradient (3, 4) everywhere: (5 - 1)^2
    g = _linear_critic([3.0, 4.0])
    cfg = LipschitzPenaltyConfig(n_interpolates=7)
    assert lipschitz_penalty(g, np.zeros((2, 2)), np.ones((3, 2)), cfg, np.random.default_rng(0)) == 16.0


def test_interpolates_on_segments():
    a = np.array([[0.0, 0.0]])
    b = np.array([[2.0, 2.0]])
    Z, t, _, _ = interpolate(a, b, np.random.default_rng(0), 20)
    assert np.allclose(Z[:, 0], Z[:, 1]) and np.all((Z >= 0) & (Z <= 2))
    assert np.allclose(Z[:, 0], 2 * (1 - t))


def test_penalty_config_validation():
    with pytest.raises(ValueError):
        LipschitzPenaltyConfig(mode="spectral")
    with pytest.raises(ValueError):
        LipschitzPenaltyConfig(coefficient=0)


def test_certified_estimate_never_exceeds_exact():
    rng = np.random.default_rng(4)
    xs, ys = rng.normal(size=(4, 2)), rng.normal(size=(3, 2)) + 1.0
    p, q = np.full(4, 0.25), np.array([0.5, 0.3, 0.2])
    exact = exact_ot(p, q, pairwise_cost(xs, ys))
    for seed in range(3):
        # an untrained critic still gives a valid lower bound
        c = init_mlp_critic(2, np.random.default_rng(seed), (8,))
        assert certified_ipm(c, xs, p, ys, q) <= exact + 1e-12
    c = fit_critic(xs, p, ys, q, rng, steps=300)
    est = certified_ipm(c, xs, p, ys, q)
    assert 0.5 * exact <= est <= exact + 1e-12
    assert np.all(np.isfinite(point_forward(c, xs)))
