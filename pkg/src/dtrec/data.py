"""Implicit-feedback interaction logs: loading, filtering, splitting, batching."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np


class DataError(ValueError):
    pass


class Interaction(NamedTuple):
    user: int
    item: int
    label: int
    order: int


def _natural_key(x: str):
    return (0, int(x), "") if x.lstrip("-").isdigit() else (1, 0, x)


@dataclass(frozen=True, eq=False)
class InteractionLog:
    """Column-oriented log with dense 0-based user/item ids.

    ``user_ids[k]`` / ``item_ids[k]`` hold the original identifier of dense id ``k``.
    Records are kept sorted by (user, order).
    """

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    orders: np.ndarray
    user_ids: tuple
    item_ids: tuple
    ratings: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.users)
        for name in ("items", "labels", "orders"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has wrong length")
        if self.ratings is not None and len(self.ratings) != n:
            raise DataError("column ratings has wrong length")
        for arr in (self.users, self.items, self.labels, self.orders):
            arr.flags.writeable = False
        if self.ratings is not None:
            self.ratings.flags.writeable = False

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def records(self) -> list[Interaction]:
        return [
            Interaction(int(u), int(i), int(y), int(o))
            for u, i, y, o in zip(self.users, self.items, self.labels, self.orders)
        ]

    @property
    def user_index(self) -> dict:
        return {orig: k for k, orig in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict:
        return {orig: k for k, orig in enumerate(self.item_ids)}

    def subset(self, mask: np.ndarray) -> "InteractionLog":
        """Rows selected by ``mask``, keeping the id space unchanged."""
        return InteractionLog(
            users=self.users[mask].copy(),
            items=self.items[mask].copy(),
            labels=self.labels[mask].copy(),
            orders=self.orders[mask].copy(),
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            ratings=None if self.ratings is None else self.ratings[mask].copy(),
        )

    def positives(self) -> "InteractionLog":
        return compact(self.subset(self.labels == 1))

    def items_by_user(self) -> list[np.ndarray]:
        out = [np.empty(0, dtype=np.int64)] * self.n_users
        if len(self) == 0:
            return out
        bounds = np.flatnonzero(np.diff(self.users)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [len(self)]])
        for s, e in zip(starts, ends):
            out[int(self.users[s])] = np.unique(self.items[s:e])
        return out


def make_log(
    users: Sequence,
    items: Sequence,
    labels: Sequence | None = None,
    orders: Sequence | None = None,
    ratings: Sequence | None = None,
) -> InteractionLog:
    """Build a log from original (arbitrary hashable) ids, assigning dense ids."""
    users = [str(u) for u in users]
    items = [str(i) for i in items]
    n = len(users)
    if n == 0:
        raise DataError("no interactions")
    labels = np.ones(n, dtype=np.int8) if labels is None else np.asarray(labels, dtype=np.int8)
    if orders is None:
        orders = np.arange(n, dtype=np.int64)
    user_ids = tuple(sorted(set(users), key=_natural_key))
    item_ids = tuple(sorted(set(items), key=_natural_key))
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    u = np.array([uidx[x] for x in users], dtype=np.int64)
    it = np.array([iidx[x] for x in items], dtype=np.int64)
    o = np.asarray(orders, dtype=np.int64)
    r = None if ratings is None else np.asarray(ratings, dtype=np.float64)
    perm = np.lexsort((o, u))
    if np.any((np.diff(u[perm]) == 0) & (np.diff(o[perm]) == 0)):
        raise DataError("order values within a user must be unique")
    return InteractionLog(
        users=u[perm],
        items=it[perm],
        labels=labels[perm],
        orders=o[perm],
        user_ids=user_ids,
        item_ids=item_ids,
        ratings=None if r is None else r[perm],
    )


def compact(log: InteractionLog) -> InteractionLog:
    """Drop ids that no longer occur and renumber densely (order preserved)."""
    if len(log) == 0:
        raise DataError("no interactions")
    ku = np.unique(log.users)
    ki = np.unique(log.items)
    umap = np.full(log.n_users, -1, dtype=np.int64)
    umap[ku] = np.arange(len(ku))
    imap = np.full(log.n_items, -1, dtype=np.int64)
    imap[ki] = np.arange(len(ki))
    return InteractionLog(
        users=umap[log.users],
        items=imap[log.items],
        labels=log.labels.copy(),
        orders=log.orders.copy(),
        user_ids=tuple(log.user_ids[k] for k in ku),
        item_ids=tuple(log.item_ids[k] for k in ki),
        ratings=None if log.ratings is None else log.ratings.copy(),
    )


def load_interactions(
    path: str | os.PathLike,
    schema: str = "rating",
    rating_threshold: float = 3.0,
) -> InteractionLog:
    """Read a tab-separated interaction file.

    ``schema`` controls the third column: ``"rating"`` (explicit rating, label is
    ``rating > rating_threshold``), ``"label"`` (0/1 label) or ``"implicit"``
    (three columns ``user item timestamp``; every line is a positive).
    Ties in timestamp are broken by line number.
    """
    if schema not in ("rating", "label", "implicit"):
        raise DataError(f"unknown schema {schema!r}")
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    want = 3 if schema == "implicit" else 4
    users, items, values, stamps, lines = [], [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != want:
                raise DataError(f"line {lineno}: expected {want} columns, got {len(cols)}")
            try:
                if schema == "implicit":
                    value, ts = 1.0, float(cols[2])
                else:
                    value, ts = float(cols[2]), float(cols[3])
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric field in {line!r}") from None
            if not (np.isfinite(value) and np.isfinite(ts)):
                raise DataError(f"line {lineno}: non-finite field")
            if schema == "label" and value not in (0.0, 1.0):
                raise DataError(f"line {lineno}: label must be 0 or 1")
            users.append(cols[0])
            items.append(cols[1])
            values.append(value)
            stamps.append(ts)
            lines.append(lineno)
    if not users:
        raise DataError("no interactions")

    seen = {}
    for u, i, ts, ln in zip(users, items, stamps, lines):
        key = (u, i, ts)
        if key in seen:
            raise DataError(f"line {ln}: duplicate interaction (also on line {seen[key]})")
        seen[key] = ln

    values = np.asarray(values)
    if schema == "rating":
        labels = (values > rating_threshold).astype(np.int8)
        ratings = values
    else:
        labels = values.astype(np.int8)
        ratings = None

    # order = rank of (timestamp, line) within each user
    stamps = np.asarray(stamps)
    lines = np.asarray(lines)
    user_arr = np.asarray(users, dtype=object)
    orders = np.empty(len(users), dtype=np.int64)
    perm = sorted(range(len(users)), key=lambda k: (users[k], stamps[k], lines[k]))
    prev, rank = None, 0
    for k in perm:
        if user_arr[k] != prev:
            prev, rank = user_arr[k], 0
        orders[k] = rank
        rank += 1
    return make_log(users, items, labels, orders, ratings)


def filter_min_activity(log: InteractionLog, min_count: int) -> InteractionLog:
    """Drop users and items with fewer than ``min_count`` interactions, to a fixpoint."""
    if min_count < 1:
        raise DataError("min_count must be >= 1")
    keep = np.ones(len(log), dtype=bool)
    while True:
        uc = np.bincount(log.users[keep], minlength=log.n_users)
        ic = np.bincount(log.items[keep], minlength=log.n_items)
        new = keep & (uc[log.users] >= min_count) & (ic[log.items] >= min_count)
        if new.sum() == keep.sum():
            break
        keep = new
    if not keep.any():
        raise DataError("filtering removed all data")
    return compact(log.subset(keep))


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: InteractionLog
    validation: InteractionLog
    test: InteractionLog
    train_items: list = field(repr=False)

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def seen_items(self, user: int, through: str = "validation") -> np.ndarray:
        """Items the user interacted with before the evaluated stage.

        ``through="train"`` masks train items only (validation scoring);
        ``through="validation"`` also masks the validation item (test scoring).
        """
        seen = self.train_items[user]
        if through == "validation":
            val = self.validation.items[self.validation.users == user]
            seen = np.union1d(seen, val)
        return seen


def leave_last_out_split(log: InteractionLog, drop_short_users: bool = False) -> SplitDataset:
    """Per user: last interaction to test, second-to-last to validation, rest to train."""
    counts = np.bincount(log.users, minlength=log.n_users)
    short = np.flatnonzero(counts < 3)
    if len(short):
        if not drop_short_users:
            u = int(short[0])
            raise DataError(
                f"user {log.user_ids[u]!r} has {counts[u]} interactions; at least 3 required"
            )
        log = compact(log.subset(~np.isin(log.users, short)))
        counts = np.bincount(log.users, minlength=log.n_users)

    # records sorted by (user, order): the last two rows of each user block
    ends = np.cumsum(counts)
    stage = np.zeros(len(log), dtype=np.int8)
    stage[ends - 1] = 2
    stage[ends - 2] = 1
    train = log.subset(stage == 0)
    return SplitDataset(
        train=train,
        validation=log.subset(stage == 1),
        test=log.subset(stage == 2),
        train_items=train.subset(train.labels == 1).items_by_user(),
    )


class PairBatch(NamedTuple):
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.users)


def _positive_keys(split: SplitDataset) -> np.ndarray:
    t = split.train
    pos = t.labels == 1
    return np.unique(t.users[pos] * split.n_items + t.items[pos])


def sample_negatives(
    split: SplitDataset, users: np.ndarray, rng: np.random.Generator, keys: np.ndarray | None = None
) -> np.ndarray:
    """One uniformly drawn non-positive item for each entry of ``users``."""
    if keys is None:
        keys = _positive_keys(split)
    n_items = split.n_items
    n_pos = np.array([len(x) for x in split.train_items])
    if len(users) and np.any(n_pos[users] >= n_items):
        raise DataError("catalog too small to sample negatives")
    items = rng.integers(0, n_items, size=len(users))
    bad = np.isin(users * n_items + items, keys)
    while bad.any():
        items[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad[bad] = np.isin(users[bad] * n_items + items[bad], keys)
    return items


def epoch_pairs(
    split: SplitDataset, negatives_per_positive: int, rng: np.random.Generator
) -> PairBatch:
    """All train positives plus freshly sampled negatives, shuffled."""
    if negatives_per_positive < 0:
        raise DataError("negatives_per_positive must be >= 0")
    t = split.train
    pos = t.labels == 1
    pu, pi = t.users[pos], t.items[pos]
    if len(pu) == 0:
        raise DataError("no positive training interactions")
    nu = np.repeat(pu, negatives_per_positive)
    ni = sample_negatives(split, nu, rng)
    users = np.concatenate([pu, nu])
    items = np.concatenate([pi, ni])
    labels = np.concatenate([np.ones(len(pu)), np.zeros(len(nu))])
    perm = rng.permutation(len(users))
    return PairBatch(users[perm], items[perm], labels[perm])


def iter_batches(pairs: PairBatch, batch_size: int) -> Iterator[PairBatch]:
    for s in range(0, len(pairs), batch_size):
        yield PairBatch(*(a[s : s + batch_size] for a in pairs))


def sample_training_batch(
    split: SplitDataset,
    batch_size: int,
    negatives_per_positive: int,
    rng: np.random.Generator,
) -> PairBatch:
    """Draw ``batch_size`` positives (with replacement) and pair each with negatives."""
    if negatives_per_positive < 0:
        raise DataError("negatives_per_positive must be >= 0")
    t = split.train
    pos = np.flatnonzero(t.labels == 1)
    if len(pos) == 0:
        raise DataError("no positive training interactions")
    pick = pos[rng.integers(0, len(pos), size=batch_size)]
    pu, pi = t.users[pick], t.items[pick]
    nu = np.repeat(pu, negatives_per_positive)
    ni = sample_negatives(split, nu, rng)
    return PairBatch(
        np.concatenate([pu, nu]),
        np.concatenate([pi, ni]),
        np.concatenate([np.ones(len(pu)), np.zeros(len(nu))]),
    )


def write_interactions(log: InteractionLog, path: str | os.PathLike, schema: str = "label"):
    """Write a log back to TSV using original ids; order is written as the timestamp."""
    with open(path, "w", encoding="utf-8") as fh:
        for k in range(len(log)):
            u = log.user_ids[log.users[k]]
            i = log.item_ids[log.items[k]]
            if schema == "rating" and log.ratings is not None:
                v = repr(float(log.ratings[k]))
            else:
                v = str(int(log.labels[k]))
            fh.write(f"{u}\t{i}\t{v}\t{int(log.orders[k])}\n")
