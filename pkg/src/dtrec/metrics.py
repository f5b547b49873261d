"""Ranking metrics (Rel@K, Hit@K, NDCG@K) and the learnt-weight analysis table."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SplitDataset
from .models import ModelParams, score_matrix, sigmoid, weights_forward
from .reco import as_scorer


@dataclass(frozen=True)
class EvalConfig:
    K: int = 10
    n_negatives: int = 100
    mode: str = "sampled"  # "sampled" or "full_rank" for Hit/NDCG
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("sampled", "full_rank"):
            raise ValueError(f"unknown eval mode {self.mode!r}")


@dataclass
class MetricsReport:
    rel_at_k: float
    hit_at_k: float
    ndcg_at_k: float
    K: int
    n_users: int
    mode: str
    relevance_source: str
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table_row(self, scale: float = 100.0) -> dict:
        """Hit and NDCG multiplied by ``scale`` for presentation; Rel is left as a sum."""
        return {
            f"Rel@{self.K}": self.rel_at_k,
            f"Hit@{self.K}": scale * self.hit_at_k,
            f"NDCG@{self.K}": scale * self.ndcg_at_k,
        }


def format_table(rows: dict, digits: int = 2) -> str:
    """Aligned text table: ``rows`` maps a row label to ``{column: value}``."""
    cols = []
    for r in rows.values():
        cols += [c for c in r if c not in cols]
    labels = list(rows)
    w0 = max([len(x) for x in labels] + [6])
    widths = [max(len(c), 10) for c in cols]
    lines = [" ".join([" " * w0] + [c.rjust(w) for c, w in zip(cols, widths)])]
    for lab in labels:
        cells = []
        for c, w in zip(cols, widths):
            v = rows[lab].get(c)
            if v is None:
                cells.append("-".rjust(w))
            elif isinstance(v, str):
                cells.append(v.rjust(w))
            else:
                cells.append(f"{v:.{digits}f}".rjust(w))
        lines.append(" ".join([lab.ljust(w0)] + cells))
    return "\n".join(lines)


def _order(scores: np.ndarray, cands: np.ndarray) -> np.ndarray:
    # descending score, ascending id on ties
    return cands[np.lexsort((cands, -scores[cands]))]


def rank_full(f, user: int, exclusions=()) -> np.ndarray:
    """All non-excluded items, best first."""
    scores = as_scorer(f)(user)
    mask = np.ones(len(scores), dtype=bool)
    excl = np.asarray(list(exclusions) if not isinstance(exclusions, np.ndarray) else exclusions)
    if len(excl):
        mask[excl.astype(np.int64)] = False
    return _order(scores, np.flatnonzero(mask))


def hit_ndcg_from_rank(rank: int, K: int) -> tuple[int, float]:
    """Single-relevant-item Hit@K and NDCG@K for a 1-based rank."""
    if rank <= K:
        return 1, float(1.0 / np.log2(rank + 1))
    return 0, 0.0


def _rank_among(scores, target, others) -> int:
    s = scores[target]
    so = scores[others]
    return int(np.sum((so > s) | ((so == s) & (others < target)))) + 1


def negative_pool(n_items: int, target: int, exclusions) -> np.ndarray:
    mask = np.ones(n_items, dtype=bool)
    excl = np.asarray(list(exclusions) if not isinstance(exclusions, np.ndarray) else exclusions)
    if len(excl):
        mask[excl.astype(np.int64)] = False
    mask[target] = False
    return np.flatnonzero(mask)


def hit_ndcg_sampled(
    f, user: int, target_item: int, K: int, n_negatives: int, rng, exclusions=()
) -> tuple[int, float]:
    scores = as_scorer(f)(user)
    pool = negative_pool(len(scores), target_item, exclusions)
    if len(pool) < n_negatives:
        raise ValueError(f"only {len(pool)} negatives available, {n_negatives} requested")
    negs = rng.choice(pool, size=n_negatives, replace=False)
    return hit_ndcg_from_rank(_rank_among(scores, target_item, negs), K)


def rel_at_k(f, user: int, K: int, relevance_lookup, exclusions=()) -> float:
    """Sum of relevance over the user's top-K full-catalog ranking."""
    ranking = rank_full(f, user, exclusions)[:K]
    rel = np.asarray(relevance_lookup, dtype=np.float64)
    if rel.ndim != 1 or len(rel) <= ranking.max(initial=-1) or np.any(np.isnan(rel[ranking])):
        raise ValueError("relevance lookup does not cover the ranked items")
    return float(rel[ranking].sum())


def _score_table(model, n_users: int) -> np.ndarray:
    if isinstance(model, ModelParams):
        return score_matrix(model)
    if isinstance(model, np.ndarray):
        return model
    scorer = as_scorer(model)
    return np.stack([scorer(u) for u in range(n_users)])


def user_rng(seed: int, user: int) -> np.random.Generator:
    """Per-user generator so negative samples do not depend on the model or visit order."""
    return np.random.default_rng([seed, user])


def evaluate(
    model,
    split: SplitDataset,
    gt=None,
    cfg: EvalConfig = EvalConfig(),
    stage: str = "test",
    meta: dict | None = None,
) -> MetricsReport:
    """Average Rel/Hit/NDCG over the positive held-out interactions of ``stage``.

    At test time the user's train and validation items are masked; at
    validation time only train items. Rel@K uses ``gt`` relevance when given,
    otherwise the observed held-out labels.
    """
    held = split.test if stage == "test" else split.validation
    through = "validation" if stage == "test" else "train"
    pos = np.flatnonzero(held.labels == 1)
    if len(pos) == 0:
        raise ValueError(f"{stage} split has no positive interactions")
    S = _score_table(model, split.n_users)
    rel_table = None
    if gt is not None:
        rel_table = gt.aligned_to(held).relevance_prob

    n_items = split.n_items
    rels, hits, ndcgs = [], [], []
    for k in pos:
        u, target = int(held.users[k]), int(held.items[k])
        seen = split.seen_items(u, through=through)
        excl = seen[seen != target]
        scores = S[u]
        if rel_table is not None:
            relevance = rel_table[u]
        else:
            relevance = np.zeros(n_items)
            mine = (held.users == u) & (held.labels == 1)
            relevance[held.items[mine]] = 1.0
        row = lambda _u, s=scores: s  # noqa: E731
        rels.append(rel_at_k(row, u, cfg.K, relevance, excl))
        if cfg.mode == "sampled":
            h, n = hit_ndcg_sampled(
                row, u, target, cfg.K, cfg.n_negatives, user_rng(cfg.seed, u), excl
            )
        else:
            others = negative_pool(n_items, target, excl)
            h, n = hit_ndcg_from_rank(_rank_among(scores, target, others), cfg.K)
        hits.append(h)
        ndcgs.append(n)
    return MetricsReport(
        rel_at_k=float(np.mean(rels)),
        hit_at_k=float(np.mean(hits)),
        ndcg_at_k=float(np.mean(ndcgs)),
        K=cfg.K,
        n_users=len(pos),
        mode=f"sampled_{cfg.n_negatives}" if cfg.mode == "sampled" else "full_rank",
        relevance_source="true_relevance" if gt is not None else "observed_label",
        meta=dict(meta or {}),
    )


def weight_analysis(
    theta_w: ModelParams,
    theta_f: ModelParams,
    split: SplitDataset,
    gt=None,
    K: int = 10,
    max_weight: float = 1.0,
    n_pairs: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict:
    """Per-pair table of learnt weights next to f's score and top-K membership.

    Pairs are the train positives plus as many uniformly drawn unobserved
    pairs (negatives), optionally subsampled to ``n_pairs``. Columns:
    user, item, w, f, label, in_top_k and (with ``gt``) exposure_prob.
    """
    from .data import sample_negatives

    rng = np.random.default_rng(0) if rng is None else rng
    t = split.train
    keep = t.labels == 1
    pu, pi = t.users[keep], t.items[keep]
    ni = sample_negatives(split, pu, rng)
    users = np.concatenate([pu, pu])
    items = np.concatenate([pi, ni])
    labels = np.concatenate([np.ones(len(pu), dtype=int), np.zeros(len(pu), dtype=int)])
    if n_pairs is not None and n_pairs < len(users):
        sel = np.sort(rng.choice(len(users), size=n_pairs, replace=False))
        users, items, labels = users[sel], items[sel], labels[sel]

    w, _ = weights_forward(theta_w, users, items, max_weight)
    S = score_matrix(theta_f)
    fv = S[users, items]
    f_prob = sigmoid(fv) if theta_f.output == "logit" else fv
    # exact top-K over the full catalog (ties by id)
    in_top = np.zeros(len(users), dtype=int)
    for u in np.unique(users):
        top = _order(S[u], np.arange(S.shape[1]))[:K]
        rows = users == u
        in_top[rows] = np.isin(items[rows], top).astype(int)
    table = {
        "user": users,
        "item": items,
        "w": w,
        "f": f_prob,
        "label": labels,
        "in_top_k": in_top,
    }
    if gt is not None:
        g = gt.aligned_to(t)
        table["exposure_prob"] = g.exposure_prob[users, items]
    return table


def write_table_tsv(table: dict, path):
    cols = list(table)
    n = len(table[cols[0]])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for k in range(n):
            cells = []
            for c in cols:
                v = table[c][k]
                cells.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
            fh.write("\t".join(cells) + "\n")
