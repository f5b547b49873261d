"""Semi-synthetic clicks from fitted relevance and exposure models.

``click_prob = relevance_prob * exposure_prob`` on every (user, item) pair;
clicks are the pairs above a cutoff chosen to reproduce a source click
ratio. The ground-truth tables are meant for evaluation only: nothing in the
training modules imports this file.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DataError, InteractionLog, make_log
from .models import (
    apply_update,
    backward,
    forward,
    init_adam,
    init_params,
    score_matrix,
    sigmoid,
)


@dataclass(frozen=True)
class McfFitConfig:
    dim: int = 16
    lr: float = 0.02
    epochs: int = 60
    batch_size: int = 1024
    l2: float = 1e-4
    negatives_per_positive: int = 3  # exposure fit only
    seed: int = 0


@dataclass(frozen=True)
class SimConfig:
    u: float = 3.0
    p: float = 2.0
    relevance_fit: McfFitConfig = McfFitConfig()
    exposure_fit: McfFitConfig = McfFitConfig()
    mlp_hidden: tuple = (32, 16)
    mlp_seed: int = 0
    bernoulli: bool = False
    seed: int = 0


@dataclass(eq=False)
class SyntheticGroundTruth:
    relevance_prob: np.ndarray  # (users, items)
    exposure_prob: np.ndarray
    user_ids: tuple
    item_ids: tuple
    cutoff: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("relevance_prob", "exposure_prob"):
            a = getattr(self, name)
            if a.shape != (len(self.user_ids), len(self.item_ids)):
                raise ValueError(f"{name} has shape {a.shape}")
            if np.any(~np.isfinite(a)) or np.any((a < 0) | (a > 1)):
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def click_prob(self) -> np.ndarray:
        return self.relevance_prob * self.exposure_prob

    def aligned_to(self, log: InteractionLog) -> "SyntheticGroundTruth":
        """Tables re-indexed to the dense ids of ``log``; unknown ids become NaN rows/columns."""
        if log.user_ids == self.user_ids and log.item_ids == self.item_ids:
            return self
        uix = {u: k for k, u in enumerate(self.user_ids)}
        iix = {i: k for k, i in enumerate(self.item_ids)}
        ru = np.array([uix.get(u, -1) for u in log.user_ids])
        ri = np.array([iix.get(i, -1) for i in log.item_ids])

        def take(a):
            out = a[np.ix_(np.maximum(ru, 0), np.maximum(ri, 0))].copy()
            out[ru < 0] = np.nan
            out[:, ri < 0] = np.nan
            return out

        out = object.__new__(SyntheticGroundTruth)
        out.relevance_prob = take(self.relevance_prob)
        out.exposure_prob = take(self.exposure_prob)
        out.user_ids, out.item_ids = log.user_ids, log.item_ids
        out.cutoff, out.meta = self.cutoff, dict(self.meta)
        return out


def relevance_from_scores(r_hat, u: float = 3.0, p: float = 2.0) -> np.ndarray:
    if not (np.isfinite(u) and np.isfinite(p)) or p <= 0:
        raise ValueError("u must be finite and p positive")
    return sigmoid(np.asarray(r_hat, dtype=np.float64) - u) ** p


def _fit(users, items, targets, n_users, n_items, cfg: McfFitConfig, loss: str, neg_sampler=None):
    rng = np.random.default_rng(cfg.seed)
    params = init_params(
        "mcf", n_users, n_items, rng, dim=cfg.dim, output="unbounded", emb_std=0.1
    )
    if loss == "squared":
        params.global_bias[0] = float(np.mean(targets))
    adam = init_adam(params)
    for _ in range(cfg.epochs):
        if neg_sampler is not None:
            nu, ni = neg_sampler(rng)
            eu = np.concatenate([users, nu])
            ei = np.concatenate([items, ni])
            et = np.concatenate([targets, np.zeros(len(nu))])
        else:
            eu, ei, et = users, items, targets
        perm = rng.permutation(len(eu))
        for s in range(0, len(perm), cfg.batch_size):
            b = perm[s : s + cfg.batch_size]
            out, cache = forward(params, eu[b], ei[b])
            err = out - et[b] if loss == "squared" else sigmoid(out) - et[b]
            grads = backward(params, cache, err / len(b))
            if cfg.l2 > 0:
                grads = grads.merge()
                for k, (rows, v) in grads.sparse.items():
                    grads.sparse[k] = (rows, v + cfg.l2 * getattr(params, k)[rows])
            apply_update(params, adam, grads, cfg.lr)
    return params


def fit_relevance(ratings: InteractionLog, cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Squared-loss MCF on explicit ratings, mapped to ``sigmoid(R_hat - u) ** p``."""
    if ratings.ratings is None:
        raise DataError("relevance fit needs explicit ratings")
    model = _fit(
        ratings.users,
        ratings.items,
        ratings.ratings.astype(np.float64),
        ratings.n_users,
        ratings.n_items,
        cfg.relevance_fit,
        "squared",
    )
    return relevance_from_scores(score_matrix(model), cfg.u, cfg.p)


def init_exposure_mlp(in_dim: int, rng: np.random.Generator, hidden=(32, 16)) -> list:
    """Bias-free ReLU MLP weights, N(0, 1) / sqrt(fan_in); the last layer has one output."""
    Ws, fan_in = [], in_dim
    for width in (*hidden, 1):
        Ws.append(rng.normal(size=(width, fan_in)) / np.sqrt(fan_in))
        fan_in = width
    return Ws


def exposure_mlp(Ws: list, X: np.ndarray) -> np.ndarray:
    h = X
    for W in Ws[:-1]:
        h = np.maximum(h @ W.T, 0.0)
    return sigmoid((h @ Ws[-1].T)[:, 0])


def fit_exposure(indicator: InteractionLog, cfg: SimConfig = SimConfig(), mlp_weights=None):
    """Exposure from embeddings fitted on the observation indicator.

    Observed pairs are positives, uniformly drawn unobserved pairs are
    negatives (BCE). The embeddings feed a frozen random MLP whose output
    through a sigmoid is the exposure probability.
    """
    n_u, n_i = indicator.n_users, indicator.n_items
    observed = np.zeros((n_u, n_i), dtype=bool)
    observed[indicator.users, indicator.items] = True
    if observed.all():
        raise DataError("every pair is observed; no unobserved pairs to contrast")
    free = np.flatnonzero(~observed.ravel())
    fcfg = cfg.exposure_fit
    n_neg = fcfg.negatives_per_positive * len(indicator)

    def negatives(rng):
        k = free[rng.integers(0, len(free), size=n_neg)]
        return k // n_i, k % n_i

    model = _fit(
        indicator.users,
        indicator.items,
        np.ones(len(indicator)),
        n_u,
        n_i,
        fcfg,
        "bce",
        negatives,
    )
    if mlp_weights is None:
        mlp_weights = init_exposure_mlp(
            2 * fcfg.dim, np.random.default_rng(cfg.mlp_seed), cfg.mlp_hidden
        )
    uu = np.repeat(np.arange(n_u), n_i)
    ii = np.tile(np.arange(n_i), n_u)
    X = np.concatenate([model.user_emb[uu], model.item_emb[ii]], axis=1)
    return exposure_mlp(mlp_weights, X).reshape(n_u, n_i)


def click_ratio(log: InteractionLog) -> float:
    """Fraction of all (user, item) cells holding a positive record."""
    pos = log.labels == 1
    cells = len(np.unique(log.users[pos] * log.n_items + log.items[pos]))
    return cells / (log.n_users * log.n_items)


def threshold_cutoff(click_prob: np.ndarray, ratio: float, rel_tol: float = 0.01) -> float:
    """Largest cutoff ``c`` whose share of ``click_prob >= c`` is closest to ``ratio``."""
    if not 0 < ratio < 1:
        raise ValueError("click ratio must lie in (0, 1)")
    v = np.sort(click_prob.ravel())[::-1]
    n = len(v)
    k = max(1, int(round(ratio * n)))
    best, best_err = None, np.inf
    for c in (v[k - 1], v[min(k, n - 1)]):
        share = np.count_nonzero(v >= c) / n
        err = abs(share - ratio) / ratio
        if err < best_err:
            best, best_err = float(c), err
    if best_err > rel_tol:
        raise ValueError(
            f"ratio {ratio:.4g} unreachable by thresholding (closest share off by {best_err:.1%})"
        )
    return best


def bernoulli_scale(click_prob: np.ndarray, ratio: float, iters: int = 100) -> float:
    """Scale ``a`` such that ``mean(min(1, a * click_prob)) = ratio`` (bisection)."""
    if not 0 < ratio < 1:
        raise ValueError("click ratio must lie in (0, 1)")
    if click_prob.max() <= 0:
        raise ValueError("all click probabilities are zero")
    lo, hi = 0.0, 1.0
    while np.mean(np.minimum(1.0, hi * click_prob)) < ratio:
        hi *= 2.0
        if hi > 1e12:
            raise ValueError("ratio unreachable")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.mean(np.minimum(1.0, mid * click_prob)) < ratio:
            lo = mid
        else:
            hi = mid
    return hi


def generate_clicks(
    gt: SyntheticGroundTruth,
    source_click_ratio: float,
    rng: np.random.Generator,
    bernoulli: bool = False,
):
    """Positive-only click log plus ``gt`` with its cutoff recorded.

    By default label 1 goes to exactly the pairs with ``click_prob >= cutoff``.
    With ``bernoulli`` each pair clicks independently with a scaled
    probability and no cutoff is recorded. Orders are a random permutation
    within each user.
    """
    cp = gt.click_prob
    if bernoulli:
        a = bernoulli_scale(cp, source_click_ratio)
        clicked = rng.random(cp.shape) < np.minimum(1.0, a * cp)
        out_gt = replace(gt, cutoff=None, meta={**gt.meta, "bernoulli_scale": a})
    else:
        cutoff = threshold_cutoff(cp, source_click_ratio)
        clicked = cp >= cutoff
        out_gt = replace(gt, cutoff=cutoff)
    uu, ii = np.nonzero(clicked)
    if len(uu) == 0:
        raise ValueError("no clicks generated")
    orders = np.empty(len(uu), dtype=np.int64)
    for u in np.unique(uu):
        rows = np.flatnonzero(uu == u)
        orders[rows] = rng.permutation(len(rows))
    log = make_log(
        [gt.user_ids[k] for k in uu],
        [gt.item_ids[k] for k in ii],
        np.ones(len(uu), dtype=np.int8),
        orders,
    )
    return log, out_gt


def simulate(ratings: InteractionLog, cfg: SimConfig = SimConfig()):
    """Fit both models on ``ratings`` and draw a click log with its click ratio."""
    relevance = fit_relevance(ratings, cfg)
    exposure = fit_exposure(ratings, cfg)
    gt = SyntheticGroundTruth(
        relevance,
        exposure,
        ratings.user_ids,
        ratings.item_ids,
        meta={"seed": cfg.seed, "u": cfg.u, "p": cfg.p, "mlp_seed": cfg.mlp_seed},
    )
    ratio = click_ratio(ratings)
    log, gt = generate_clicks(gt, ratio, np.random.default_rng(cfg.seed), cfg.bernoulli)
    gt.meta["source_click_ratio"] = ratio
    return log, gt


def save_ground_truth(gt: SyntheticGroundTruth, path: str | os.PathLike):
    """TSV ``user item relevance_prob exposure_prob`` plus a ``.json`` sidecar."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#user\titem\trelevance_prob\texposure_prob\n")
        for a, u in enumerate(gt.user_ids):
            for b, i in enumerate(gt.item_ids):
                fh.write(
                    f"{u}\t{i}\t{float(gt.relevance_prob[a, b])!r}\t{float(gt.exposure_prob[a, b])!r}\n"
                )
    side = {"cutoff": gt.cutoff, **gt.meta}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, sort_keys=True, indent=1)


def load_ground_truth(path: str | os.PathLike) -> SyntheticGroundTruth:
    users, items, rel, exp = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 4:
                raise DataError(f"line {lineno}: expected 4 columns")
            users.append(cols[0])
            items.append(cols[1])
            rel.append(float(cols[2]))
            exp.append(float(cols[3]))
    uids = tuple(dict.fromkeys(users))
    iids = tuple(dict.fromkeys(items))
    if len(users) != len(uids) * len(iids):
        raise DataError("ground-truth table is not a full user x item grid")
    uix = {u: k for k, u in enumerate(uids)}
    iix = {i: k for k, i in enumerate(iids)}
    R = np.full((len(uids), len(iids)), np.nan)
    E = np.full_like(R, np.nan)
    for u, i, r, e in zip(users, items, rel, exp):
        R[uix[u], iix[i]] = r
        E[uix[u], iix[i]] = e
    meta = {}
    side = str(path) + ".json"
    if os.path.exists(side):
        with open(side, encoding="utf-8") as fh:
            meta = json.load(fh)
    cutoff = meta.pop("cutoff", None)
    return SyntheticGroundTruth(R, E, uids, iids, cutoff, meta)


def make_toy_ratings(
    n_users: int = 200, n_items: int = 300, density: float = 0.08, dim: int = 4, seed: int = 0
):
    """A seeded explicit-rating table with popularity-skewed observation.

    Ratings in 1..5 come from a rank-``dim`` latent model; which cells are
    observed depends on item popularity and on the user's taste, so exposure
    is not uniform. Returns ``(users, items, ratings, timestamps)`` columns.
    """
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(n_users, dim))
    Q = rng.normal(size=(n_items, dim))
    taste = P @ Q.T / np.sqrt(dim)
    pop = -np.log(np.arange(1, n_items + 1) / n_items + 0.02)[rng.permutation(n_items)]
    logit = 0.8 * pop[None, :] + 0.6 * taste + rng.normal(scale=0.5, size=taste.shape)
    shift = np.quantile(logit, 1 - density)
    observed = rng.random(taste.shape) < sigmoid(3.0 * (logit - shift))
    # every user gets at least 5 ratings
    for u in np.flatnonzero(observed.sum(axis=1) < 5):
        observed[u, np.argsort(-logit[u])[:5]] = True
    raw = 3.2 + 1.1 * taste + rng.normal(scale=0.6, size=taste.shape)
    rating = np.clip(np.rint(raw), 1, 5)
    uu, ii = np.nonzero(observed)
    ts = rng.permutation(len(uu)) + 1_000_000
    return uu, ii, rating[uu, ii], ts


def write_toy_ratings(path, **kw):
    uu, ii, r, ts = make_toy_ratings(**kw)
    with open(path, "w", encoding="utf-8") as fh:
        for a, b, c, d in zip(uu, ii, r, ts):
            fh.write(f"u{a}\ti{b}\t{int(c)}\t{int(d)}\n")


__all__ = [
    "McfFitConfig",
    "SimConfig",
    "SyntheticGroundTruth",
    "bernoulli_scale",
    "click_ratio",
    "exposure_mlp",
    "fit_exposure",
    "fit_relevance",
    "generate_clicks",
    "init_exposure_mlp",
    "load_ground_truth",
    "make_toy_ratings",
    "relevance_from_scores",
    "save_ground_truth",
    "simulate",
    "threshold_cutoff",
    "write_toy_ratings",
]
