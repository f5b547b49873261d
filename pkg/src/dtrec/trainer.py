"""Transportation-regularized objective and its two-time-scale descent-ascent loop.

Players: ``f`` scores pairs (logit output), ``w`` reweights the training
pairs into ``[0, M]`` and the critic ``g`` measures how far the reweighted
batch sits from the pairs ``f`` would recommend.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import PairBatch, SplitDataset, epoch_pairs, iter_batches
from .metrics import EvalConfig, evaluate
from .models import (
    AdamState,
    Gradients,
    ModelParams,
    TrainingDivergence,
    apply_update,
    backward,
    embed_pairs,
    forward,
    init_adam,
    init_params,
    score_matrix,
    sigmoid,
    softplus,
    weights_backward,
    weights_forward,
)
from .reco import RecoConfig, kth_largest, sample_candidate_matrix, soft_reco_value
from .transport import (
    IpmBatchTerm,
    LipschitzPenaltyConfig,
    clip_weights,
    ipm_estimate,
    penalty_at,
)

LAMBDA_GRID = (0.005, 0.1, 0.3, 0.5)
STEP_RATIOS = ((1, 1, 10), (1, 5, 10), (1, 10, 10), (1, 10, 5))


@dataclass(frozen=True)
class GdaConfig:
    lam: float = 0.1
    eta: float = 0.01
    gamma: float = 10.0
    step_ratio: tuple = (1, 5, 10)  # f : w : g updates per batch
    batch_size: int = 1024
    max_epochs: int = 50
    patience: int = 5
    negatives_per_positive: int = 3
    max_weight: float = 1.0
    reco: RecoConfig = RecoConfig()
    penalty: LipschitzPenaltyConfig = LipschitzPenaltyConfig()
    normalization: str = "self_normalized"
    lr_f: float | None = None  # default eta / gamma
    lr_w: float | None = None  # default eta / gamma
    clip: float | None = 5.0
    l2: float = 0.0
    dim: int = 32
    hidden: tuple = (64, 32, 16)
    seed: int = 0
    log_timing: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lam must be >= 0")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not self.gamma >= 1:
            raise ValueError("gamma must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if len(self.step_ratio) != 3 or min(self.step_ratio) < 1:
            raise ValueError("step_ratio must be three integers >= 1")
        if self.normalization not in ("self_normalized", "raw_sum"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if not self.max_weight > 0:
            raise ValueError("max_weight must be positive")

    @property
    def lr_descent_f(self) -> float:
        return self.eta / self.gamma if self.lr_f is None else self.lr_f

    @property
    def lr_descent_w(self) -> float:
        return self.eta / self.gamma if self.lr_w is None else self.lr_w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_ratio"] = list(self.step_ratio)
        d["hidden"] = list(self.hidden)
        return d


@dataclass(eq=False)
class MinimaxState:
    theta_f: ModelParams
    theta_w: ModelParams
    theta_g: ModelParams
    adam_f: AdamState
    adam_w: AdamState
    adam_g: AdamState
    step: int = 0
    updates: dict = field(default_factory=lambda: {"f": 0, "w": 0, "g": 0})
    best_metric: float = -np.inf
    best_f: ModelParams | None = None
    best_epoch: int = -1

    def copy(self) -> "MinimaxState":
        return MinimaxState(
            self.theta_f.copy(),
            self.theta_w.copy(),
            self.theta_g.copy(),
            self.adam_f.copy(),
            self.adam_w.copy(),
            self.adam_g.copy(),
            self.step,
            dict(self.updates),
            self.best_metric,
            None if self.best_f is None else self.best_f.copy(),
            self.best_epoch,
        )


def init_state(
    n_users: int, n_items: int, cfg: GdaConfig, kinds: dict | None = None, rng=None
) -> MinimaxState:
    kinds = {"f": "mcf", "w": "mcf", "g": "mcf", **(kinds or {})}
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    mk = lambda kind, **kw: init_params(  # noqa: E731
        kind, n_users, n_items, rng, dim=cfg.dim, hidden=cfg.hidden, **kw
    )
    f = mk(kinds["f"], output="logit")
    w = mk(kinds["w"], output="logit")
    # critic values live at continuous points too, so it has no per-entity biases
    g = mk(kinds["g"], output="unbounded", entity_bias=False, emb_std=0.1)
    return MinimaxState(
        f, w, g, init_adam(f, clip=cfg.clip), init_adam(w, clip=cfg.clip), init_adam(g, clip=cfg.clip)
    )


def bce_with_logits(s, y):
    return softplus(s) - y * s


@dataclass
class DtLoss:
    loss: float
    risk: float
    transport: IpmBatchTerm
    penalty: float
    grads: dict  # player -> Gradients of the loss (descent players) or the ascent objective ("g")
    tau: np.ndarray


def user_exclusion_mask(split: SplitDataset) -> np.ndarray:
    """Boolean (users x items) table of train positives."""
    mask = np.zeros((split.n_users, split.n_items), dtype=bool)
    t = split.train
    pos = t.labels == 1
    mask[t.users[pos], t.items[pos]] = True
    return mask


def sample_reco_candidates(batch: PairBatch, excluded: np.ndarray, m: int, rng) -> np.ndarray:
    return sample_candidate_matrix(batch.items, excluded[batch.users], m, rng)


def reco_threshold(f: ModelParams, batch: PairBatch, cands: np.ndarray, K: int) -> np.ndarray:
    """K-th best f score among each pair's sampled candidates (held constant in gradients)."""
    uniq, inv = np.unique(batch.users, return_inverse=True)
    S = score_matrix(f, uniq)
    return kth_largest(S[inv[:, None], cands], K)


def _penalty_term(g: ModelParams, batch: PairBatch, a, b, n, rng):
    """Gradient penalty on interpolates of pairs drawn by weight ``a`` and by weight ``b``."""
    ca, cb = np.cumsum(a), np.cumsum(b)
    ia = np.minimum(np.searchsorted(ca, rng.random(n) * ca[-1], side="right"), len(a) - 1)
    ib = np.minimum(np.searchsorted(cb, rng.random(n) * cb[-1], side="right"), len(b) - 1)
    t = rng.random(n)[:, None]
    rows_u = np.concatenate([batch.users[ia], batch.users[ib]])
    rows_i = np.concatenate([batch.items[ia], batch.items[ib]])
    z = embed_pairs(g, rows_u, rows_i)
    value, grads, dZ = penalty_at(g, t * z[:n] + (1 - t) * z[n:])
    if g.kind == "mcf" or np.any(dZ):
        d = g.dim
        dz = np.concatenate([t * dZ, (1 - t) * dZ])
        grads = grads + Gradients(
            {}, {"user_emb": (rows_u, dz[:, :d]), "item_emb": (rows_i, dz[:, d:])}, merged=False
        )
    return value, grads


def dt_loss(
    state: MinimaxState,
    batch: PairBatch,
    cfg: GdaConfig,
    tau=None,
    cands=None,
    penalty_rng=None,
    players=("f", "w", "g"),
    forwards=None,
) -> DtLoss:
    """Weighted risk plus ``lam`` times the critic's transport estimate.

    ``loss = sum(w*l)/sum(w) + lam * (sum(w*g)/sum(w) - sum(r*g)/sum(r))``
    under self-normalization, with ``r`` the soft top-K indicator of ``f``.
    ``grads["f"]`` and ``grads["w"]`` are loss gradients; ``grads["g"]`` is
    the gradient of the critic's ascent objective ``transport - coef * penalty``.
    The threshold ``tau`` comes from ``cands`` when not supplied. Under
    ``raw_sum`` only the transport term drops its normalization.

    ``forwards`` is an optional dict caching each player's forward pass on
    this batch; missing entries are computed and stored. The caller must
    drop a player's entry once its parameters change.
    """
    f, wm, g = state.theta_f, state.theta_w, state.theta_g
    y = np.asarray(batch.labels, dtype=np.float64)
    fw = {} if forwards is None else forwards
    if "f" not in fw:
        fw["f"] = forward(f, batch.users, batch.items)
    if "w" not in fw:
        fw["w"] = weights_forward(wm, batch.users, batch.items, cfg.max_weight)
    if "g" not in fw:
        fw["g"] = forward(g, batch.users, batch.items)
    (s, fcache), (w, wcache), (gv, gcache) = fw["f"], fw["w"], fw["g"]
    if tau is None:
        if cands is None:
            raise ValueError("either tau or cands is required")
        tau = reco_threshold(f, batch, cands, cfg.reco.K)
    T = cfg.reco.temperature
    r = soft_reco_value(s, tau, T)
    ell = bce_with_logits(s, y)

    term = ipm_estimate(gv, batch, w, r, cfg.normalization)
    if cfg.normalization == "self_normalized":
        Sw, Sr = w.sum(), r.sum()
        src_ref, tgt_ref = term.source_side, term.target_side
    else:
        Sw = Sr = 1.0
        src_ref = tgt_ref = 0.0
    risk = float(np.dot(w, ell) / w.sum())
    lam = cfg.lam
    loss = risk + lam * term.value
    if not np.isfinite(loss):
        raise TrainingDivergence("non-finite loss")

    grads = {}
    pen_value = 0.0
    if "f" in players:
        ds = w * (sigmoid(s) - y) / w.sum() - lam * (gv - tgt_ref) / Sr * r * (1 - r) / T
        grads["f"] = backward(f, fcache, ds)
    if "w" in players:
        dw = (ell - risk) / w.sum() + lam * (gv - src_ref) / Sw
        grads["w"] = weights_backward(wm, wcache, dw)
    if "g" in players:
        gg = backward(g, gcache, w / Sw - r / Sr)
        if cfg.penalty.mode == "gradient_penalty":
            if penalty_rng is None:
                raise ValueError("penalty_rng is required for the gradient penalty")
            n = cfg.penalty.n_interpolates or len(batch)
            pen_value, pg = _penalty_term(g, batch, w, r, n, penalty_rng)
            gg = gg + pg.scaled(-cfg.penalty.coefficient)
        grads["g"] = gg
    return DtLoss(loss, risk, term, pen_value, grads, tau)


def add_l2(grads: Gradients, params: ModelParams, l2: float) -> Gradients:
    """Add ``l2 * param`` on the touched embedding rows and every dense block."""
    if l2 <= 0:
        return grads
    grads = grads.merge()
    arrays = params.arrays()
    dense = {k: v + l2 * arrays[k] for k, v in grads.dense.items()}
    sparse = {k: (r, v + l2 * arrays[k][r]) for k, (r, v) in grads.sparse.items()}
    return Gradients(dense, sparse)


def gda_step(
    state: MinimaxState,
    batch: PairBatch,
    cfg: GdaConfig,
    rng: np.random.Generator,
    penalty_rng: np.random.Generator,
    excluded: np.ndarray,
) -> DtLoss:
    """One batch of nested updates: critic ascent, then ``w`` descent, then ``f`` descent.

    Candidates for the soft top-K threshold are drawn once per batch; the
    threshold is recomputed whenever ``f`` has moved.
    """
    n_f, n_w, n_g = cfg.step_ratio
    cands = sample_reco_candidates(batch, excluded, cfg.reco.m, rng)
    tau = reco_threshold(state.theta_f, batch, cands, cfg.reco.K)
    fw = {}
    for _ in range(n_g):
        res = dt_loss(state, batch, cfg, tau=tau, penalty_rng=penalty_rng, players=("g",), forwards=fw)
        apply_update(state.theta_g, state.adam_g, res.grads["g"], cfg.eta, sign=+1.0)
        if cfg.penalty.mode == "weight_clip":
            clip_weights(state.theta_g, cfg.penalty.coefficient)
        state.updates["g"] += 1
        del fw["g"]
    for _ in range(n_w):
        res = dt_loss(state, batch, cfg, tau=tau, players=("w",), forwards=fw)
        apply_update(state.theta_w, state.adam_w, res.grads["w"], cfg.lr_descent_w)
        state.updates["w"] += 1
        del fw["w"]
    for k in range(n_f):
        if k:
            tau = reco_threshold(state.theta_f, batch, cands, cfg.reco.K)
        res = dt_loss(state, batch, cfg, tau=tau, players=("f",), forwards=fw)
        grads = add_l2(res.grads["f"], state.theta_f, cfg.l2)
        apply_update(state.theta_f, state.adam_f, grads, cfg.lr_descent_f)
        state.updates["f"] += 1
        del fw["f"]
    state.step += 1
    return res


@dataclass
class TrainedModel:
    theta_f: ModelParams  # best-validation snapshot
    state: MinimaxState
    log: list
    diverged: bool = False

    def log_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def _streams(seed: int):
    init, sample, penalty = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(s) for s in (init, sample, penalty))


def _val_record(f, split, K, seed):
    rep = evaluate(f, split, None, EvalConfig(K=K, seed=seed), stage="validation")
    return {
        f"val_rel@{K}": rep.rel_at_k,
        f"val_hit@{K}": rep.hit_at_k,
        f"val_ndcg@{K}": rep.ndcg_at_k,
    }, rep.rel_at_k


def train(
    split: SplitDataset, cfg: GdaConfig = GdaConfig(), model_kinds: dict | None = None
) -> TrainedModel:
    """Epochs of :func:`gda_step` with validation Rel@K early stopping.

    Stops once the validation metric has failed to improve for more than
    ``patience`` consecutive epochs. Returns the best-validation ``f``.
    """
    init_rng, rng, penalty_rng = _streams(cfg.seed)
    state = init_state(split.n_users, split.n_items, cfg, model_kinds, init_rng)
    excluded = user_exclusion_mask(split)
    K = cfg.reco.K
    state.best_f = state.theta_f.copy()
    log, bad, diverged = [], 0, False
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        backup = state.copy()
        losses, transports = [], []
        try:
            pairs = epoch_pairs(split, cfg.negatives_per_positive, rng)
            for batch in iter_batches(pairs, cfg.batch_size):
                res = gda_step(state, batch, cfg, rng, penalty_rng, excluded)
                losses.append(res.loss)
                transports.append(res.transport.value)
        except FloatingPointError as exc:  # TrainingDivergence included
            state = backup
            log.append({"epoch": epoch, "diverged": True, "error": str(exc)})
            diverged = True
            break
        rec = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "transport_term": float(np.mean(transports)),
        }
        metrics, val = _val_record(state.theta_f, split, K, cfg.seed)
        rec.update(metrics)
        if val > state.best_metric:
            state.best_metric, state.best_f, state.best_epoch = val, state.theta_f.copy(), epoch
            bad = 0
        else:
            bad += 1
        rec["best_val"] = state.best_metric
        if cfg.log_timing:
            rec["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
        log.append(rec)
        if bad > cfg.patience:
            break
    return TrainedModel(state.best_f, state, log, diverged)


# -- plain (weighted) ERM baselines --------------------------------------------


@dataclass(frozen=True)
class ErmConfig:
    lr: float = 0.01
    l2: float = 0.0
    batch_size: int = 1024
    max_epochs: int = 50
    patience: int = 5
    negatives_per_positive: int = 3
    dim: int = 32
    hidden: tuple = (64, 32, 16)
    clip: float | None = 5.0
    K: int = 10
    seed: int = 0
    log_timing: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def train_erm(
    split: SplitDataset,
    cfg: ErmConfig = ErmConfig(),
    kind: str = "mcf",
    item_weights: np.ndarray | None = None,
) -> TrainedModel:
    """Negative-sampling BCE training of a single scorer.

    ``item_weights`` multiplies each pair's loss by the weight of its item
    (inverse propensities for the IPW baseline); the batch loss is a mean.
    """
    init_rng, rng, _ = _streams(cfg.seed)
    f = init_params(kind, split.n_users, split.n_items, init_rng, dim=cfg.dim, hidden=cfg.hidden)
    adam = init_adam(f, clip=cfg.clip)
    best_f, best, bad, log, diverged = f.copy(), -np.inf, 0, [], False
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        backup = (f.copy(), adam.copy())
        losses = []
        try:
            pairs = epoch_pairs(split, cfg.negatives_per_positive, rng)
            for batch in iter_batches(pairs, cfg.batch_size):
                s, cache = forward(f, batch.users, batch.items)
                c = np.ones(len(batch)) if item_weights is None else item_weights[batch.items]
                ell = bce_with_logits(s, batch.labels)
                loss = float(np.mean(c * ell))
                if not np.isfinite(loss):
                    raise TrainingDivergence("non-finite loss")
                grads = backward(f, cache, c * (sigmoid(s) - batch.labels) / len(batch))
                apply_update(f, adam, add_l2(grads, f, cfg.l2), cfg.lr)
                losses.append(loss)
        except FloatingPointError as exc:
            f, adam = backup
            log.append({"epoch": epoch, "diverged": True, "error": str(exc)})
            diverged = True
            break
        metrics, val = _val_record(f, split, cfg.K, cfg.seed)
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), **metrics}
        if val > best:
            best, best_f, bad = val, f.copy(), 0
        else:
            bad += 1
        rec["best_val"] = best
        if cfg.log_timing:
            rec["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
        log.append(rec)
        if bad > cfg.patience:
            break
    return TrainedModel(best_f, None, log, diverged)


# -- scalar two-player game ------------------------------------------------------


def scalar_game_gda(
    x0: float,
    y0: float,
    eta: float,
    gamma: float,
    steps: int,
    a: float = 1.0,
    b: float = 1.0,
    mu: float = 0.5,
    n_y: int = 1,
) -> np.ndarray:
    """Descent-ascent on ``min_x max_y  -a/2 x^2 + b x y - mu/2 y^2``.

    With ``a = mu = 0`` this is the pure bilinear game ``x*y``. The
    equilibrium is the origin whenever ``b^2 > a*mu``. Per step ``y``
    ascends ``n_y`` times at ``eta``, then ``x`` descends once at
    ``eta / gamma`` against the fresh ``y``. Returns the ``(x, y)``
    trajectory, ``steps + 1`` rows.
    """
    x, y = float(x0), float(y0)
    traj = np.empty((steps + 1, 2))
    traj[0] = x, y
    for t in range(steps):
        for _ in range(n_y):
            y = y + eta * (b * x - mu * y)
        x = x - (eta / gamma) * (b * y - a * x)
        traj[t + 1] = x, y
    return traj


__all__ = [
    "LAMBDA_GRID",
    "STEP_RATIOS",
    "GdaConfig",
    "MinimaxState",
    "DtLoss",
    "ErmConfig",
    "TrainedModel",
    "scalar_game_gda",
    "dt_loss",
    "gda_step",
    "init_state",
    "train",
    "train_erm",
]
