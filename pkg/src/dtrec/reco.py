"""The deployment indicator reco(u, i; f): exact, sampled, and a smooth surrogate.

Everywhere in this package ties in score are broken by item id: the smaller
id ranks higher.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ModelParams, score_matrix, sigmoid


@dataclass(frozen=True)
class RecoConfig:
    K: int = 10
    m: int = 100
    temperature: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if self.K > self.m + 1:
            raise ValueError("K must not exceed m + 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def as_scorer(f):
    """Wrap ``f`` as ``user -> full-catalog score vector``.

    Accepts :class:`ModelParams`, a 2-D score table, or a callable already of
    that form.
    """
    if isinstance(f, ModelParams):
        return lambda u: score_matrix(f, [u])[0]
    if isinstance(f, np.ndarray):
        if f.ndim != 2:
            raise ValueError("score table must be 2-D (users x items)")
        return lambda u: f[u]
    if callable(f):
        return f
    raise TypeError(f"cannot score with {type(f).__name__}")


def beats(scores: np.ndarray, cands: np.ndarray, item: int) -> np.ndarray:
    """Mask of candidates ranked above ``item``."""
    s = scores[item]
    sc = scores[cands]
    return (sc > s) | ((sc == s) & (cands < item))


def topk_exact(f, user: int, item: int, K: int, exclusions=()) -> int:
    scores = as_scorer(f)(user)
    excl = np.asarray(list(exclusions) if not isinstance(exclusions, np.ndarray) else exclusions)
    if item in set(excl.tolist()):
        raise ValueError("item is in the exclusion set")
    mask = np.ones(len(scores), dtype=bool)
    if len(excl):
        mask[excl.astype(np.int64)] = False
    cands = np.flatnonzero(mask)
    if K > len(cands):
        raise ValueError(f"K={K} exceeds the {len(cands)} candidates")
    others = cands[cands != item]
    return int(beats(scores, others, item).sum() < K)


def sample_candidates(
    n_items: int, item: int, m: int, exclusions, rng: np.random.Generator
) -> np.ndarray:
    """``m`` items drawn uniformly without replacement, never ``item`` or an exclusion."""
    mask = np.ones(n_items, dtype=bool)
    excl = np.asarray(list(exclusions) if not isinstance(exclusions, np.ndarray) else exclusions)
    if len(excl):
        mask[excl.astype(np.int64)] = False
    mask[item] = False
    pool = np.flatnonzero(mask)
    if len(pool) < m:
        raise ValueError(f"only {len(pool)} candidates available, {m} requested")
    return rng.choice(pool, size=m, replace=False)


def topk_sampled(f, user: int, item: int, cfg: RecoConfig, rng, exclusions=()) -> int:
    scores = as_scorer(f)(user)
    cands = sample_candidates(len(scores), item, cfg.m, exclusions, rng)
    return int(beats(scores, cands, item).sum() < cfg.K)


def kth_largest(cand_scores: np.ndarray, K: int) -> np.ndarray:
    """Row-wise K-th largest value; ``-inf`` where a row has fewer than K entries."""
    cand_scores = np.atleast_2d(cand_scores)
    n, m = cand_scores.shape
    if K > m:
        return np.full(n, -np.inf)
    return -np.partition(-cand_scores, K - 1, axis=1)[:, K - 1]


def soft_reco_value(item_scores, tau, temperature: float):
    with np.errstate(over="ignore"):
        return sigmoid((np.asarray(item_scores) - tau) / temperature)


def soft_reco(f, user: int, item: int, cfg: RecoConfig, rng, exclusions=()) -> float:
    """Sigmoid of the item's margin over the K-th best sampled candidate.

    The threshold is treated as a constant when differentiating.
    """
    scores = as_scorer(f)(user)
    cands = sample_candidates(len(scores), item, cfg.m, exclusions, rng)
    tau = kth_largest(scores[cands][None, :], cfg.K)[0]
    return float(soft_reco_value(scores[item], tau, cfg.temperature))


def sample_candidate_matrix(
    items: np.ndarray, excluded: np.ndarray, m: int, rng: np.random.Generator
) -> np.ndarray:
    """Batched :func:`sample_candidates`.

    ``excluded`` is a boolean (batch x n_items) mask; each row gets ``m``
    distinct items outside the mask and different from its own item.
    """
    B, n_items = excluded.shape
    if m == 0:
        return np.empty((B, 0), dtype=np.int64)
    keys = rng.random((B, n_items))
    keys[excluded] = np.inf
    keys[np.arange(B), items] = np.inf
    if np.any(np.isinf(keys).sum(axis=1) > n_items - m):
        raise ValueError("insufficient candidates for sampled reco")
    return np.argpartition(keys, m - 1, axis=1)[:, :m]
