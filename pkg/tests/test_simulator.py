import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtrec.data import DataError, make_log
from dtrec.simulator import (
    McfFitConfig,
    SimConfig,
    SyntheticGroundTruth,
    bernoulli_scale,
    click_ratio,
    exposure_mlp,
    fit_relevance,
    generate_clicks,
    init_exposure_mlp,
    load_ground_truth,
    make_toy_ratings,
    relevance_from_scores,
    save_ground_truth,
    simulate,
    threshold_cutoff,
)

FAST = McfFitConfig(dim=4, epochs=15)


def _ratings(n_users=30, n_items=40, seed=0):
    u, i, r, ts = make_toy_ratings(n_users, n_items, density=0.15, seed=seed)
    return make_log(u, i, (r > 3).astype(int), ts, r)


@pytest.fixture(scope="module")
def simulated():
    log = _ratings()
    return log, *simulate(log, SimConfig(relevance_fit=FAST, exposure_fit=FAST))


def test_relevance_formula_at_center():
    assert relevance_from_scores(3.0, 3.0, 2.0) == pytest.approx(0.25)


def test_relevance_saturates():
    assert relevance_from_scores(1e3) == pytest.approx(1.0)
    assert relevance_from_scores(-1e3) == pytest.approx(0.0)


def test_relevance_monotone_on_grid():
    v = relevance_from_scores(np.linspace(-5, 10, 301), 3.0, 2.0)
    assert np.all(np.diff(v) >= 0)


@pytest.mark.parametrize("u,p", [(np.inf, 2.0), (3.0, 0.0), (3.0, -1.0)])
def test_relevance_rejects_bad_parameters(u, p):
    with pytest.raises(ValueError):
        relevance_from_scores(1.0, u, p)


def test_relevance_needs_ratings():
    log = make_log(["a", "b"], ["x", "y"])
    with pytest.raises(DataError):
        fit_relevance(log)


def test_exposure_mlp_zero_input_and_bias_free():
    Ws = init_exposure_mlp(6, np.random.default_rng(0))
    assert exposure_mlp(Ws, np.zeros((3, 6))) == pytest.approx(0.5)
    assert len(Ws) == 3 and Ws[-1].shape == (1, 16)


def test_click_ratio_matches_source(simulated):
    ratings, clicks, gt = simulated
    src = click_ratio(ratings)
    assert gt.meta["source_click_ratio"] == src
    got = len(clicks) / (len(gt.user_ids) * len(gt.item_ids))
    assert abs(got - src) / src <= 0.01


def test_clicks_are_threshold_set(simulated):
    _, clicks, gt = simulated
    cp = gt.click_prob
    want = {(gt.user_ids[a], gt.item_ids[b]) for a, b in zip(*np.nonzero(cp >= gt.cutoff))}
    got = {(clicks.user_ids[u], clicks.item_ids[i]) for u, i in zip(clicks.users, clicks.items)}
    assert got == want


def test_click_prob_bounded(simulated):
    _, _, gt = simulated
    cp = gt.click_prob
    assert np.all(cp <= np.minimum(gt.relevance_prob, gt.exposure_prob) + 1e-15)
    assert np.all((cp >= 0) & (cp <= 1))


def test_simulation_deterministic(simulated):
    ratings, clicks, gt = simulated
    c2, g2 = simulate(ratings, SimConfig(relevance_fit=FAST, exposure_fit=FAST))
    assert np.array_equal(c2.users, clicks.users) and np.array_equal(c2.orders, clicks.orders)
    assert np.array_equal(g2.relevance_prob, gt.relevance_prob)


def test_ground_truth_round_trip(tmp_path, simulated):
    _, _, gt = simulated
    p = tmp_path / "gt.tsv"
    save_ground_truth(gt, p)
    back = load_ground_truth(p)
    assert np.array_equal(back.relevance_prob, gt.relevance_prob)
    assert np.array_equal(back.exposure_prob, gt.exposure_prob)
    assert back.cutoff == gt.cutoff and back.user_ids == gt.user_ids


def test_ground_truth_validation():
    with pytest.raises(ValueError):
        SyntheticGroundTruth(np.full((1, 1), 1.5), np.zeros((1, 1)), ("u",), ("i",))
    with pytest.raises(ValueError):
        SyntheticGroundTruth(np.zeros((2, 1)), np.zeros((2, 1)), ("u",), ("i",))


def test_aligned_to_marks_unknown_ids():
    gt = SyntheticGroundTruth(np.array([[0.1, 0.2]]), np.array([[0.3, 0.4]]), ("u",), ("a", "b"))
    log = make_log(["u", "u"], ["b", "c"])
    al = gt.aligned_to(log)
    assert al.relevance_prob[0, 0] == 0.2 and np.isnan(al.relevance_prob[0, 1])


def test_unreachable_ratio():
    # every probability equal: any cutoff yields share 0 or 1
    with pytest.raises(ValueError, match="unreachable"):
        threshold_cutoff(np.full((10, 10), 0.3), 0.2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.02, 0.5))
def test_threshold_share_within_tolerance(seed, ratio):
    cp = np.random.default_rng(seed).random((40, 50))
    c = threshold_cutoff(cp, ratio)
    assert abs(np.mean(cp >= c) - ratio) / ratio <= 0.01


def test_bernoulli_mode_hits_ratio_in_expectation():
    cp = np.random.default_rng(1).random((60, 80)) ** 3
    a = bernoulli_scale(cp, 0.1)
    assert np.mean(np.minimum(1, a * cp)) == pytest.approx(0.1, rel=1e-9)
    gt = SyntheticGroundTruth(cp, np.ones_like(cp), tuple(map(str, range(60))), tuple(map(str, range(80))))
    log, out = generate_clicks(gt, 0.1, np.random.default_rng(2), bernoulli=True)
    assert out.cutoff is None
    assert abs(len(log) / cp.size - 0.1) < 4 * np.sqrt(0.1 * 0.9 / cp.size)
