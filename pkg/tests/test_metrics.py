import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtrec.data import leave_last_out_split, make_log
from dtrec.metrics import (
    EvalConfig,
    evaluate,
    format_table,
    hit_ndcg_from_rank,
    hit_ndcg_sampled,
    rank_full,
    rel_at_k,
    weight_analysis,
    write_table_tsv,
)
from dtrec.models import init_params

SIX = np.array([[0.3, 0.9, 0.3, 0.1, 0.7, 0.5]])
SIX_REL = np.array([0.0, 1.0, 0.5, 0.2, 0.0, 0.8])


def brute_rank(scores, target, pool):
    """1-based rank of ``target`` in a stable (-score, id) sort of ``pool`` plus the target."""
    items = sorted(set(pool) | {target}, key=lambda i: (-scores[i], i))
    return items.index(target) + 1


def brute_metrics(scores, target, pool, rel, K, excl=()):
    r = brute_rank(scores, target, pool)
    hit = int(r <= K)
    ndcg = 1.0 / np.log2(r + 1) if hit else 0.0
    top = [i for i in sorted(range(len(scores)), key=lambda i: (-scores[i], i)) if i not in excl][:K]
    return hit, ndcg, float(sum(rel[i] for i in top))


def test_rank_full_examples():
    assert list(rank_full(np.array([[0.9, 0.1]]), 0)) == [0, 1]
    assert list(rank_full(np.array([[0.2, 0.2, 0.2]]), 0)) == [0, 1, 2]
    assert list(rank_full(SIX, 0)) == [1, 4, 5, 0, 2, 3]
    assert list(rank_full(SIX, 0, exclusions=[4, 0])) == [1, 5, 2, 3]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=20, max_size=20))
def test_rank_full_matches_stable_sort(vals):
    scores = np.array([vals], dtype=float)
    assert list(rank_full(scores, 0)) == sorted(range(20), key=lambda i: -vals[i])


@pytest.mark.parametrize("rank,K,hit,ndcg", [(1, 10, 1, 1.0), (2, 10, 1, 1 / np.log2(3)), (11, 10, 0, 0.0), (10, 10, 1, 1 / np.log2(11))])
def test_hit_ndcg_from_rank(rank, K, hit, ndcg):
    assert hit_ndcg_from_rank(rank, K) == (hit, pytest.approx(ndcg, abs=1e-15))
    assert round(1 / np.log2(3), 4) == 0.6309


def test_rel_examples():
    assert rel_at_k(SIX, 0, 3, np.zeros(6)) == 0.0
    assert rel_at_k(SIX, 0, 3, np.ones(6)) == 3.0
    # top-3 is items 1, 4, 5
    assert rel_at_k(SIX, 0, 3, SIX_REL) == 1.0 + 0.0 + 0.8
    with pytest.raises(ValueError):
        rel_at_k(SIX, 0, 3, np.full(6, np.nan))


def check_six_item_oracle():
    """Every (target, K, exclusion) on the 6-item toy against brute force; returns the mismatch count."""
    bad = 0
    scores = SIX[0]
    for target, K in itertools.product(range(6), range(1, 7)):
        for excl in ((), (3,), (1, 4)):
            if target in excl or K > 6 - len(excl):
                continue
            pool = [i for i in range(6) if i != target and i not in excl]
            h, n = hit_ndcg_sampled(SIX, 0, target, K, len(pool), np.random.default_rng(0), excl)
            rel = rel_at_k(SIX, 0, K, SIX_REL, excl)
            want = brute_metrics(scores, target, pool, SIX_REL, K, excl)
            bad += (h, n, rel) != want
    return bad


def test_six_item_metrics_match_brute_force():
    assert check_six_item_oracle() == 0


def _toy_split(n_users=5, n_items=12, per_user=5, seed=0):
    rng = np.random.default_rng(seed)
    users, items = [], []
    for u in range(n_users):
        for i in rng.choice(n_items, size=per_user, replace=False):
            users.append(u)
            items.append(int(i))
    return leave_last_out_split(make_log(users, items, orders=np.arange(len(users))))


def check_sampled_equals_full(seed=0):
    split = _toy_split(seed=seed)
    model = np.random.default_rng(seed).normal(size=(split.n_users, split.n_items))
    # each user has 4 items seen through validation, so the pool is catalog - 1 - 4 exactly
    n_neg = split.n_items - 1 - 4
    a = evaluate(model, split, None, EvalConfig(K=3, n_negatives=n_neg, seed=seed))
    b = evaluate(model, split, None, EvalConfig(K=3, mode="full_rank"))
    return (a.hit_at_k, a.ndcg_at_k, a.rel_at_k), (b.hit_at_k, b.ndcg_at_k, b.rel_at_k)


@pytest.mark.parametrize("seed", range(5))
def test_sampled_with_whole_pool_equals_full_rank(seed):
    a, b = check_sampled_equals_full(seed)
    assert a == b


def test_sampled_without_exclusions_uses_catalog_minus_one():
    for target in range(6):
        h, n = hit_ndcg_sampled(SIX, 0, target, 2, 5, np.random.default_rng(target))
        assert (h, n) == hit_ndcg_from_rank(brute_rank(SIX[0], target, range(6)), 2)


def test_insufficient_negatives():
    with pytest.raises(ValueError, match="negatives"):
        hit_ndcg_sampled(SIX, 0, 0, 2, 6, np.random.default_rng(0))


def test_evaluate_matches_per_user_recomputation():
    split = _toy_split(seed=3)
    S = np.random.default_rng(1).normal(size=(split.n_users, split.n_items))
    rep = evaluate(S, split, None, EvalConfig(K=4, mode="full_rank"))
    hits, ndcgs, rels = [], [], []
    for u, target in zip(split.test.users, split.test.items):
        seen = set(split.seen_items(u, through="validation").tolist()) - {target}
        pool = [i for i in range(split.n_items) if i != target and i not in seen]
        rel = np.zeros(split.n_items)
        rel[target] = 1.0
        h, n, r = brute_metrics(S[u], target, pool, rel, 4, seen)
        hits.append(h)
        ndcgs.append(n)
        rels.append(r)
    assert rep.hit_at_k == pytest.approx(np.mean(hits), abs=1e-15)
    assert rep.ndcg_at_k == pytest.approx(np.mean(ndcgs), abs=1e-15)
    assert rep.rel_at_k == pytest.approx(np.mean(rels), abs=1e-15)
    assert rep.relevance_source == "observed_label" and rep.n_users == 5


def test_perfect_single_user():
    split = _toy_split(n_users=1)
    S = np.zeros((1, split.n_items))
    S[0, split.test.items[0]] = 10.0
    rep = evaluate(S, split, None, EvalConfig(K=1, mode="full_rank"))
    assert rep.hit_at_k == 1.0 and rep.ndcg_at_k == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_hit_at_least_ndcg_and_bounded(seed):
    split = _toy_split(seed=seed % 10)
    S = np.random.default_rng(seed).normal(size=(split.n_users, split.n_items))
    rep = evaluate(S, split, None, EvalConfig(K=3, n_negatives=5, seed=seed))
    assert 0 <= rep.ndcg_at_k <= rep.hit_at_k <= 1 and rep.rel_at_k >= 0


def test_table_row_scales_hit_and_ndcg():
    split = _toy_split()
    rep = evaluate(np.zeros((split.n_users, split.n_items)), split, None, EvalConfig(K=3, n_negatives=5))
    row = rep.table_row()
    assert row["Hit@3"] == 100 * rep.hit_at_k and row["Rel@3"] == rep.rel_at_k
    assert "Hit@3" in format_table({"m": row})


def test_weight_analysis_table(tmp_path):
    split = _toy_split(n_users=6, n_items=15)
    rng = np.random.default_rng(0)
    w = init_params("mcf", split.n_users, split.n_items, rng, dim=2)
    for a in w.arrays().values():
        a[...] = 0.0  # constant weight 0.5
    f = init_params("mcf", split.n_users, split.n_items, rng, dim=2, emb_std=1.0)
    t = weight_analysis(w, f, split, K=3)
    assert np.all(t["w"] == 0.5)
    pos, neg = t["label"] == 1, t["label"] == 0
    assert pos.sum() == neg.sum()
    for u in np.unique(t["user"]):
        top = set(rank_full(f.user_emb @ f.item_emb.T + f.item_bias + f.user_bias[:, None] + f.global_bias, int(u))[:3].tolist())
        rows = t["user"] == u
        assert all((i in top) == bool(m) for i, m in zip(t["item"][rows], t["in_top_k"][rows]))
    write_table_tsv(t, tmp_path / "w.tsv")
    lines = (tmp_path / "w.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["user", "item", "w", "f", "label", "in_top_k"]
    assert len(lines) == len(t["w"]) + 1
