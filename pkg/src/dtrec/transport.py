"""1-Wasserstein transport term: critic-side IPM, gradient penalty, exact OT oracle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from .models import (
    Gradients,
    apply_update,
    init_adam,
    init_mlp_critic,
    input_gradient,
    input_gradient_backward,
    point_backward,
)

MAX_ATOMS = 16


class DegenerateBatch(ValueError):
    pass


@dataclass(frozen=True)
class IpmBatchTerm:
    source_side: float
    target_side: float
    value: float
    normalization: str


def ipm_estimate(
    g, batch, weights, reco_vals, normalization: str = "self_normalized"
) -> IpmBatchTerm:
    """``sum(w * g) - sum(reco * g)``, optionally with each side divided by its mass.

    ``g`` is either a callable evaluated on ``batch`` or an array of critic
    values already aligned with ``weights``.
    """
    values = np.asarray(g(batch) if callable(g) else g, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    r = np.asarray(reco_vals, dtype=np.float64)
    if len(values) == 0:
        raise DegenerateBatch("empty batch")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if np.any((r < 0) | (r > 1)):
        raise ValueError("reco values must lie in [0, 1]")
    src = float(np.dot(w, values))
    tgt = float(np.dot(r, values))
    if normalization == "self_normalized":
        sw, sr = w.sum(), r.sum()
        if sw <= 0 or sr <= 0:
            raise DegenerateBatch("degenerate batch: a side has zero total mass")
        src, tgt = src / sw, tgt / sr
    elif normalization != "raw_sum":
        raise ValueError(f"unknown normalization {normalization!r}")
    value = src - tgt
    if not np.isfinite(value):
        raise FloatingPointError("non-finite transport term")
    return IpmBatchTerm(src, tgt, value, normalization)


@dataclass(frozen=True)
class LipschitzPenaltyConfig:
    mode: str = "gradient_penalty"
    coefficient: float = 10.0
    n_interpolates: int | None = None  # None -> batch size

    def __post_init__(self):
        if self.mode not in ("gradient_penalty", "weight_clip"):
            raise ValueError(f"unknown penalty mode {self.mode!r}")
        if not self.coefficient > 0:
            raise ValueError("coefficient must be positive")


def interpolate(sample_a, sample_b, rng: np.random.Generator, n: int | None = None):
    """Random points on segments between paired rows of ``sample_a`` and ``sample_b``.

    With ``n`` given, pairs are drawn with replacement; returns ``(points, t, ia, ib)``.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if n is None:
        if len(a) != len(b):
            raise ValueError("paired samples must have equal length")
        ia = ib = np.arange(len(a))
    else:
        ia = rng.integers(0, len(a), size=n)
        ib = rng.integers(0, len(b), size=n)
    t = rng.random(len(ia))
    return t[:, None] * a[ia] + (1 - t[:, None]) * b[ib], t, ia, ib


def penalty_at(g, Z: np.ndarray):
    """Mean of ``(||grad_z g|| - 1)^2`` over rows of Z, with its gradients.

    Returns ``(value, dense Gradients, dZ)``.
    """
    G = input_gradient(g, Z)
    norms = np.sqrt(np.sum(G * G, axis=1))
    value = float(np.mean((norms - 1.0) ** 2))
    safe = np.where(norms > 0, norms, 1.0)
    A = (2.0 * (norms - 1.0) / len(Z) / safe)[:, None] * G
    A[norms == 0] = 0.0
    dense, dZ = input_gradient_backward(g, Z, A)
    return value, Gradients(dense), dZ


def lipschitz_penalty(g, sample_a, sample_b, cfg: LipschitzPenaltyConfig, rng) -> float:
    """Gradient penalty on random interpolates between the two samples (unweighted)."""
    if cfg.mode != "gradient_penalty":
        raise ValueError("lipschitz_penalty requires gradient_penalty mode")
    Z, *_ = interpolate(sample_a, sample_b, rng, cfg.n_interpolates)
    return penalty_at(g, Z)[0]


def clip_weights(g, bound: float):
    """Weight-clipping alternative: clamp every critic parameter to [-bound, bound]."""
    for arr in g.arrays().values():
        np.clip(arr, -bound, bound, out=arr)


def _check_distribution(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError(f"{name} must be a non-empty 1-D mass vector")
    if len(p) > MAX_ATOMS:
        raise ValueError(f"{name} has {len(p)} atoms; at most {MAX_ATOMS} supported")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} is not normalized")
    return p


def pairwise_cost(xs, ys) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64).reshape(len(xs), -1)
    ys = np.asarray(ys, dtype=np.float64).reshape(len(ys), -1)
    return cdist(xs, ys)


def exact_ot(p, q, cost) -> float:
    """Minimum of ``sum(pi * cost)`` over couplings of p and q (transport LP)."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    C = np.asarray(cost, dtype=np.float64)
    n, m = len(p), len(q)
    if C.shape != (n, m):
        raise ValueError(f"cost has shape {C.shape}, expected {(n, m)}")
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A[n + j, j::m] = 1.0
    res = linprog(
        C.ravel(), A_eq=A, b_eq=np.concatenate([p, q]), bounds=(0, None), method="highs"
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0))


def atom_lipschitz(values_x, xs, values_y, ys) -> float:
    """Largest slope of the critic between any two atoms of either distribution."""
    V = np.concatenate([values_x, values_y])
    P = np.concatenate([np.atleast_2d(xs), np.atleast_2d(ys)])
    D = pairwise_cost(P, P)
    dV = np.abs(V[:, None] - V[None, :])
    off = D > 0
    return float((dV[off] / D[off]).max()) if off.any() else 0.0


def fit_critic(
    xs,
    p,
    ys,
    q,
    rng: np.random.Generator,
    steps: int = 2000,
    lr: float = 1e-2,
    cfg: LipschitzPenaltyConfig = LipschitzPenaltyConfig(n_interpolates=128),
    hidden=(64, 64),
):
    """Train an MLP critic by gradient ascent on ``E_p g - E_q g - coef * penalty``.

    The step size follows a cosine decay from ``lr`` to zero over ``steps``.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    critic = init_mlp_critic(xs.shape[1], rng, hidden)
    adam = init_adam(critic, clip=None)
    n_int = cfg.n_interpolates or 128
    atoms = np.concatenate([xs, ys])
    mass = np.concatenate([p, -q])
    for step in range(steps):
        grads, _ = point_backward(critic, atoms, mass)
        if cfg.mode == "gradient_penalty":
            ia = rng.choice(len(p), size=n_int, p=p)
            ib = rng.choice(len(q), size=n_int, p=q)
            t = rng.random(n_int)[:, None]
            _, g_pen, _ = penalty_at(critic, t * xs[ia] + (1 - t) * ys[ib])
            grads = grads + g_pen.scaled(-cfg.coefficient)
        step_lr = 0.5 * lr * (1.0 + np.cos(np.pi * step / steps))
        apply_update(critic, adam, grads, step_lr, sign=+1.0)
        if cfg.mode == "weight_clip":
            clip_weights(critic, cfg.coefficient)
    return critic


def certified_ipm(critic, xs, p, ys, q) -> float:
    """A lower bound on the transport cost read off a trained critic.

    The critic's atom values are turned into functions that are 1-Lipschitz
    everywhere: the lower and upper McShane envelopes, their midpoint, and the
    values rescaled by the largest atom-to-atom slope. Each one's IPM is a
    valid lower bound on W1 by duality; the largest is returned.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    vx, vy = critic(xs), critic(ys)
    V = np.concatenate([vx, vy])
    D = pairwise_cost(np.concatenate([xs, ys]), np.concatenate([xs, ys]))
    lo = (V[None, :] + D).min(axis=1)
    hi = (V[None, :] - D).max(axis=1)
    n = len(xs)

    def ipm(v):
        return float(np.dot(p, v[:n]) - np.dot(q, v[n:]))

    scaled = ipm(V) / max(1.0, atom_lipschitz(vx, xs, vy, ys))
    return max(ipm(lo), ipm(hi), ipm(0.5 * (lo + hi)), scaled)
