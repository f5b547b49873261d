"""Enumerable contextual bandits: counterfactual risk, the DT objective at
population scale, and importance-weighting overlap diagnostics.

Cells are (context, action) pairs flattened row-major. The transport cost
between two distinct cells is sqrt(2): the L2 distance of their one-hot codes.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .transport import exact_ot

ONE_HOT_COST = np.sqrt(2.0)
MAX_SIDE = 10


@dataclass(frozen=True, eq=False)
class BanditInstance:
    context_probs: np.ndarray  # (C,)
    logging_policy: np.ndarray  # (C, A) rows sum to 1
    true_loss: np.ndarray  # (C, A) in [0, 1]
    name: str = ""

    def __post_init__(self):
        p, pi, L = self.context_probs, self.logging_policy, self.true_loss
        C, A = pi.shape
        if not (1 <= C <= MAX_SIDE and 1 <= A <= MAX_SIDE):
            raise ValueError(f"instance is {C}x{A}; at most {MAX_SIDE}x{MAX_SIDE} supported")
        if p.shape != (C,) or L.shape != (C, A):
            raise ValueError("shape mismatch between context probs, policy and loss")
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("context probabilities are not normalized")
        _check_policy(pi, "logging policy")
        if np.any((L < 0) | (L > 1)):
            raise ValueError("losses must lie in [0, 1]")

    @property
    def n_contexts(self) -> int:
        return self.logging_policy.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logging_policy.shape[1]

    @property
    def full_overlap(self) -> bool:
        return bool(np.all(self.logging_policy > 0))

    @property
    def logging_joint(self) -> np.ndarray:
        """P(c, a) = p(c) * pi(a | c)."""
        return self.context_probs[:, None] * self.logging_policy


def make_instance(p, pi, loss, name="") -> BanditInstance:
    return BanditInstance(
        np.asarray(p, dtype=np.float64),
        np.asarray(pi, dtype=np.float64),
        np.asarray(loss, dtype=np.float64),
        name,
    )


def _check_policy(f, what="policy"):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0) or np.any(np.abs(f.sum(axis=1) - 1) > 1e-9):
        raise ValueError(f"{what} rows must be non-negative and sum to 1")
    return f


def counterfactual_risk(f, inst: BanditInstance) -> float:
    """Expected loss of deploying policy ``f``: sum p(c) f(a|c) loss(c, a)."""
    f = _check_policy(f)
    return float(np.sum(inst.context_probs[:, None] * f * inst.true_loss))


def simplex_grid(n_actions: int, resolution: int) -> np.ndarray:
    """All points of the probability simplex with coordinates in ``k/(resolution-1)``.

    Rows come in ascending lexicographic order.
    """
    if resolution < 2:
        raise ValueError("grid resolution must be >= 2")
    n = resolution - 1
    pts = [c for c in itertools.product(range(n + 1), repeat=n_actions) if sum(c) == n]
    return np.array(pts, dtype=np.float64) / n


def _first_min(vals: np.ndarray, tol: float = 1e-12) -> int:
    # rounding in grid @ loss must not break exact ties
    return int(np.flatnonzero(vals <= vals.min() + tol)[0])


def crm_optimum(inst: BanditInstance, resolution: int = 21):
    """Grid minimizer of the counterfactual risk; ties go to the lexicographically first policy.

    The risk is a sum of per-context terms, so each context's simplex grid
    is searched on its own; the product of per-context first minimizers is
    the lexicographically first joint minimizer.
    """
    grid = simplex_grid(inst.n_actions, resolution)
    rows = []
    for c in range(inst.n_contexts):
        vals = grid @ inst.true_loss[c]
        rows.append(grid[_first_min(vals)])
    f = np.array(rows)
    return f, counterfactual_risk(f, inst)


def deployment_measure(f, inst: BanditInstance) -> np.ndarray:
    """P_f over cells: the logging measure reweighted by f / pi, i.e. p(c) f(a|c)."""
    f = _check_policy(f)
    return inst.context_probs[:, None] * f


def reweighted_measure(w, inst: BanditInstance) -> np.ndarray:
    """P_w proportional to w * P over cells."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    m = w * inst.logging_joint
    if m.sum() <= 0:
        raise ValueError("degenerate weights: the reweighted measure has zero mass")
    return m / m.sum()


def cell_cost(n_cells: int) -> np.ndarray:
    return ONE_HOT_COST * (1.0 - np.eye(n_cells))


def dt_bandit_objective(f, w, inst: BanditInstance, lam: float) -> float:
    """``E_{P_w} loss + lam * W1(P_w, P_f)`` with W1 solved exactly."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    Pw = reweighted_measure(w, inst).ravel()
    Pf = deployment_measure(f, inst).ravel()
    risk = float(np.dot(Pw, inst.true_loss.ravel()))
    if lam == 0:
        return risk
    # atoms with zero mass on both sides carry nothing
    keep = (Pw > 0) | (Pf > 0)
    Pw_k, Pf_k = Pw[keep], Pf[keep]
    transport = exact_ot(Pw_k / Pw_k.sum(), Pf_k / Pf_k.sum(), cell_cost(int(keep.sum())))
    return risk + lam * transport


def inner_min(f, inst: BanditInstance, lam: float):
    """Exact ``min over w`` of the DT objective for fixed ``f`` (full overlap).

    Every distribution on the logging support is some P_w, so the minimum
    moves each unit of P_f mass at ``y`` to the cell ``x`` minimizing
    ``loss(x) + lam * cost(x, y)``. Returns ``(value, w)`` with ``w``
    attaining it (normalized so that max w = 1).
    """
    if not inst.full_overlap:
        raise ValueError("inner_min needs a full-overlap instance")
    Pf = deployment_measure(f, inst).ravel()
    L = inst.true_loss.ravel()
    n = len(L)
    H = L[:, None] + lam * cell_cost(n)  # H[x, y]
    target = np.argmin(H, axis=0)  # first minimizer per y
    value = float(np.dot(Pf, H[target, np.arange(n)]))
    Pw = np.bincount(target, weights=Pf, minlength=n)
    w = Pw / inst.logging_joint.ravel()
    w = w / w.max()
    return value, w.reshape(inst.true_loss.shape)


def consistency_check(inst: BanditInstance, lam_grid, resolution: int = 21) -> dict:
    """Gap between the CRM optimum and the minimum of the DT objective, per lambda.

    ``f`` ranges over the per-context simplex grid; the inner minimum over
    ``w`` is exact (:func:`inner_min`). The DT minimizer's objective is
    re-evaluated through :func:`dt_bandit_objective` (exact OT) as a check.
    """
    if not inst.full_overlap:
        raise ValueError("consistency check needs a full-overlap instance")
    f_star, risk_star = crm_optimum(inst, resolution)
    grid = simplex_grid(inst.n_actions, resolution)
    out = {"lambda": [], "gap": [], "dt_min": [], "dt_min_ot": [], "dt_argmin": []}
    L = inst.true_loss.ravel()
    n = len(L)
    for lam in lam_grid:
        H = L[:, None] + lam * cell_cost(n)
        h = H.min(axis=0).reshape(inst.true_loss.shape)  # cost of serving cell y
        # separable in contexts again: pick each context's grid row minimizing p(c) * f . h[c]
        rows = [grid[_first_min(grid @ h[c])] for c in range(inst.n_contexts)]
        f_dt = np.array(rows)
        value, w = inner_min(f_dt, inst, lam)
        out["lambda"].append(float(lam))
        out["dt_min"].append(value)
        out["dt_min_ot"].append(dt_bandit_objective(f_dt, w, inst, lam))
        out["gap"].append(abs(risk_star - value))
        out["dt_argmin"].append(f_dt.tolist())
    out["f_star"] = f_star.tolist()
    out["risk_star"] = risk_star
    return out


def iw_overlap_diagnostic(
    inst: BanditInstance,
    target,
    n_samples: int,
    rng: np.random.Generator,
    n_reps: int = 200,
) -> dict:
    """Replicated IW estimates of the target risk from logged samples.

    ``target`` is a (C, A) distribution over cells. Each replication draws
    ``n_samples`` cells from the logging measure, observes Bernoulli(loss)
    outcomes and averages ``target/P * outcome``; cells the logger never
    visits contribute nothing. Reports the mean bias against the exact
    target risk with its standard error, the variance across replications,
    the exact missing-region contribution, and ``d1 = sum P^2 / Q`` over
    the overlap (P logging, Q target).
    """
    Q = np.asarray(target, dtype=np.float64)
    if Q.shape != inst.true_loss.shape or np.any(Q < 0) or abs(Q.sum() - 1) > 1e-9:
        raise ValueError("target must be a normalized distribution over cells")
    P = inst.logging_joint.ravel()
    q = Q.ravel()
    L = inst.true_loss.ravel()
    overlap = P > 0
    ratio = np.where(overlap, q / np.where(overlap, P, 1.0), 0.0)
    exact = float(np.dot(q, L))
    ests = np.empty(n_reps)
    for r in range(n_reps):
        cells = rng.choice(len(P), size=n_samples, p=P)
        y = rng.random(n_samples) < L[cells]
        ests[r] = np.mean(ratio[cells] * y)
    both = overlap & (q > 0)
    d1 = float(np.sum(P[both] ** 2 / q[both]))
    bias = float(ests.mean() - exact)
    return {
        "bias": bias,
        "se": float(ests.std(ddof=1) / np.sqrt(n_reps)),
        "variance": float(ests.var(ddof=1)),
        "d1": d1,
        "exact_risk": exact,
        "missing_contribution": float(np.dot(q[~overlap], L[~overlap])),
        "missing_mass": float(q[~overlap].sum()),
    }


# -- shipped instances -------------------------------------------------------------

def instance_2x2() -> BanditInstance:
    return make_instance(
        [0.6, 0.4],
        [[0.7, 0.3], [0.4, 0.6]],
        [[0.8, 0.3], [0.1, 0.6]],
        "2x2",
    )


def instance_3x3() -> BanditInstance:
    return make_instance(
        [0.5, 0.3, 0.2],
        [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.3, 0.4]],
        [[0.9, 0.5, 0.4], [0.2, 0.7, 0.6], [0.6, 0.3, 0.8]],
        "3x3",
    )


def shipped_instances() -> list:
    return [instance_2x2(), instance_3x3()]


def missing_mass_instance():
    """Logger that never plays action 2, and a target putting 0.4 of its mass there."""
    inst = make_instance(
        [0.5, 0.5],
        [[0.6, 0.4, 0.0], [0.3, 0.7, 0.0]],
        [[0.3, 0.6, 0.8], [0.5, 0.2, 0.4]],
        "missing",
    )
    target = np.array([[0.2, 0.1, 0.25], [0.1, 0.2, 0.15]])
    return inst, target


def variance_pair():
    """Two full-overlap (logger, target) set-ups on one loss table whose d1 differ ~4x.

    Each target is the logger's mirror image (masses swapped between the
    two cells), so ``sum P^2/Q`` and ``sum Q^2/P`` coincide within a set-up.
    """
    loss = [[0.5, 0.5]]
    near = make_instance([1.0], [[0.6, 0.4]], loss, "near")
    far = make_instance([1.0], [[0.85, 0.15]], loss, "far")
    return (near, np.array([[0.4, 0.6]])), (far, np.array([[0.15, 0.85]]))
