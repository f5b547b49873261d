"""MCF / NCF scorers with hand-written gradients and a lazy (sparse) Adam.

Three roles share the same parameter container: the recommender ``f`` (logit
output), the weighting model ``w`` (``M * sigmoid`` of the raw score) and the
transport critic ``g`` (unbounded output, no per-entity biases).
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

KINDS = ("mcf", "ncf")
OUTPUTS = ("logit", "unit_interval", "unbounded")
SPARSE_NAMES = ("user_emb", "item_emb", "user_bias", "item_bias")


class TrainingDivergence(FloatingPointError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


@dataclass(eq=False)
class ModelParams:
    kind: str
    output: str
    user_emb: np.ndarray
    item_emb: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: np.ndarray
    layers: list = field(default_factory=list)
    entity_bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output range {self.output!r}")
        if self.kind == "ncf":
            width = 2 * self.dim
            for W, b in self.layers:
                if W.shape[1] != width or b.shape != (W.shape[0],):
                    raise ValueError("MLP layer shapes do not chain")
                width = W.shape[0]
            if width != 1:
                raise ValueError("MLP head must have a single output")

    @property
    def n_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    def sparse_arrays(self) -> dict:
        out = {"user_emb": self.user_emb, "item_emb": self.item_emb}
        if self.entity_bias:
            out["user_bias"] = self.user_bias
            out["item_bias"] = self.item_bias
        return out

    def dense_arrays(self) -> dict:
        out = {"global_bias": self.global_bias}
        for k, (W, b) in enumerate(self.layers):
            out[f"layer{k}.W"] = W
            out[f"layer{k}.b"] = b
        return out

    def arrays(self) -> dict:
        return {**self.sparse_arrays(), **self.dense_arrays()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.kind,
            self.output,
            self.user_emb.copy(),
            self.item_emb.copy(),
            self.user_bias.copy(),
            self.item_bias.copy(),
            self.global_bias.copy(),
            [[W.copy(), b.copy()] for W, b in self.layers],
            self.entity_bias,
        )


def init_params(
    kind: str,
    n_users: int,
    n_items: int,
    rng: np.random.Generator,
    dim: int = 32,
    hidden: tuple = (64, 32, 16),
    output: str = "logit",
    entity_bias: bool = True,
    emb_std: float = 0.01,
) -> ModelParams:
    layers = []
    if kind == "ncf":
        fan_in = 2 * dim
        for width in (*hidden, 1):
            limit = np.sqrt(6.0 / (fan_in + width))
            layers.append([rng.uniform(-limit, limit, size=(width, fan_in)), np.zeros(width)])
            fan_in = width
    return ModelParams(
        kind=kind,
        output=output,
        user_emb=rng.normal(0.0, emb_std, size=(n_users, dim)),
        item_emb=rng.normal(0.0, emb_std, size=(n_items, dim)),
        user_bias=np.zeros(n_users),
        item_bias=np.zeros(n_items),
        global_bias=np.zeros(1),
        layers=layers,
        entity_bias=entity_bias,
    )


# -- forward / backward ------------------------------------------------------


def _check_ids(params: ModelParams, users, items):
    if len(users) and (users.min() < 0 or users.max() >= params.n_users):
        raise IndexError("user id out of range")
    if len(items) and (items.min() < 0 or items.max() >= params.n_items):
        raise IndexError("item id out of range")


def _mlp_forward(layers, h):
    acts = [h]
    for W, b in layers[:-1]:
        h = np.maximum(h @ W.T + b, 0.0)
        acts.append(h)
    W, b = layers[-1]
    return (h @ W.T + b)[:, 0], acts


def _raw_forward(params: ModelParams, users, items):
    pu = params.user_emb[users]
    qi = params.item_emb[items]
    if params.kind == "mcf":
        raw, acts = np.einsum("nd,nd->n", pu, qi), None
    else:
        raw, acts = _mlp_forward(params.layers, np.concatenate([pu, qi], axis=1))
    raw = raw + params.global_bias[0]
    if params.entity_bias:
        raw = raw + params.user_bias[users] + params.item_bias[items]
    return raw, (users, items, pu, qi, acts)


def _transform(params: ModelParams, raw):
    return sigmoid(raw) if params.output == "unit_interval" else raw


def forward(params: ModelParams, users, items):
    """Scores for aligned id arrays; returns ``(scores, cache)`` for :func:`backward`."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    _check_ids(params, users, items)
    raw, cache = _raw_forward(params, users, items)
    out = _transform(params, raw)
    return out, (cache, out)


def score_batch(params: ModelParams, users, items) -> np.ndarray:
    return forward(params, users, items)[0]


def score(params: ModelParams, user: int, item: int) -> float:
    return float(score_batch(params, [user], [item])[0])


def score_matrix(params: ModelParams, users=None) -> np.ndarray:
    """Full-catalog scores, one row per user."""
    users = np.arange(params.n_users) if users is None else np.asarray(users, dtype=np.int64)
    if params.kind == "mcf":
        raw = params.user_emb[users] @ params.item_emb.T + params.global_bias[0]
        if params.entity_bias:
            raw = raw + params.user_bias[users][:, None] + params.item_bias[None, :]
        return _transform(params, raw)
    n_items = params.n_items
    uu = np.repeat(users, n_items)
    ii = np.tile(np.arange(n_items), len(users))
    return score_batch(params, uu, ii).reshape(len(users), n_items)


def _rowsum(ids, vals, groups=None):
    """Sum ``vals`` over equal ``ids``; returns ``(sorted unique ids, sums)``.

    ``groups`` optionally passes a precomputed ``np.unique(ids, return_inverse=True)``.
    """
    ids = np.asarray(ids)
    n = len(ids)
    if n == 0:
        return ids.astype(np.int64), np.zeros((0,) + vals.shape[1:])
    uniq, inv = np.unique(ids, return_inverse=True) if groups is None else groups
    if vals.ndim == 1:
        return uniq, np.bincount(inv, weights=vals, minlength=len(uniq))
    # column j of this indicator matrix holds a single 1 at row inv[j]
    m = sp.csc_array((np.ones(n), inv, np.arange(n + 1)), shape=(len(uniq), n))
    out = m @ vals.reshape(n, -1)
    return uniq, np.asarray(out).reshape((len(uniq),) + vals.shape[1:])


@dataclass
class Gradients:
    """Dense blocks keyed by name; embedding blocks as ``(rows, values)``."""

    dense: dict = field(default_factory=dict)
    sparse: dict = field(default_factory=dict)
    # False while sparse rows may repeat; merge() sums them once
    merged: bool = True

    def scaled(self, c: float) -> "Gradients":
        return Gradients(
            {k: c * v for k, v in self.dense.items()},
            {k: (r, c * v) for k, (r, v) in self.sparse.items()},
            self.merged,
        )

    def __add__(self, other: "Gradients") -> "Gradients":
        dense = dict(self.dense)
        for k, v in other.dense.items():
            dense[k] = dense[k] + v if k in dense else v
        sparse = dict(self.sparse)
        merged = self.merged and other.merged
        for k, (r, v) in other.sparse.items():
            if k in sparse:
                r0, v0 = sparse[k]
                sparse[k] = (np.concatenate([r0, r]), np.concatenate([v0, v]))
                merged = False
            else:
                sparse[k] = (r, v)
        return Gradients(dense, sparse, merged)

    def merge(self) -> "Gradients":
        """Same gradient with unique, sorted embedding rows."""
        if self.merged:
            return self
        groups, sparse = {}, {}
        for k, (r, v) in self.sparse.items():
            # blocks indexed by the same id array share one grouping
            if id(r) not in groups:
                groups[id(r)] = np.unique(r, return_inverse=True) if len(r) else None
            sparse[k] = _rowsum(r, v, groups[id(r)])
        return Gradients(dict(self.dense), sparse)

    def to_dense(self, params: ModelParams) -> dict:
        """Full-shape arrays for every parameter block (for testing)."""
        out = {}
        for k, arr in params.arrays().items():
            g = np.zeros_like(arr)
            if k in self.dense:
                g += self.dense[k]
            elif k in self.sparse:
                r, v = self.sparse[k]
                np.add.at(g, r, v)
            out[k] = g
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.dense.values()) and all(
            np.all(np.isfinite(v)) for _, v in self.sparse.values()
        )


def backward(params: ModelParams, cache, upstream) -> Gradients:
    """Gradient of ``sum(upstream * scores)`` w.r.t. every parameter the batch touched."""
    raw_cache, out = cache
    d = np.asarray(upstream, dtype=np.float64)
    if params.output == "unit_interval":
        d = d * out * (1.0 - out)
    return _backward_raw(params, raw_cache, d)


def _backward_raw(params: ModelParams, raw_cache, d) -> Gradients:
    users, items, pu, qi, acts = raw_cache
    dense = {"global_bias": np.array([d.sum()])}
    sparse = {}
    if params.kind == "mcf":
        du = d[:, None] * qi
        di = d[:, None] * pu
    else:
        L = len(params.layers)
        W, _ = params.layers[-1]
        dense[f"layer{L - 1}.W"] = d[None, :] @ acts[-1]
        dense[f"layer{L - 1}.b"] = np.array([d.sum()])
        dh = d[:, None] * W[0][None, :]
        for k in range(L - 2, -1, -1):
            W, _ = params.layers[k]
            dpre = dh * (acts[k + 1] > 0)
            dense[f"layer{k}.W"] = dpre.T @ acts[k]
            dense[f"layer{k}.b"] = dpre.sum(axis=0)
            dh = dpre @ W
        du, di = dh[:, : params.dim], dh[:, params.dim :]
    sparse["user_emb"] = (users, du)
    sparse["item_emb"] = (items, di)
    if params.entity_bias:
        sparse["user_bias"] = (users, d)
        sparse["item_bias"] = (items, d)
    return Gradients(dense, sparse, merged=False)


def weight_of(params: ModelParams, user: int, item: int, max_weight: float = 1.0) -> float:
    if max_weight <= 0:
        raise ValueError("max_weight must be positive")
    raw, _ = _raw_forward(params, *_ids(params, [user], [item]))
    return float(max_weight * sigmoid(raw[0]))


def _ids(params, users, items):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    _check_ids(params, users, items)
    return users, items


def weights_forward(params: ModelParams, users, items, max_weight: float = 1.0):
    """``M * sigmoid(raw)`` per pair, with a cache whose upstream is d/dw."""
    users, items = _ids(params, users, items)
    raw, cache = _raw_forward(params, users, items)
    w = max_weight * sigmoid(raw)
    return w, (cache, raw, w, max_weight)


def weights_backward(params: ModelParams, wcache, upstream) -> Gradients:
    cache, raw, w, M = wcache
    return _backward_raw(params, cache, np.asarray(upstream) * w * (1.0 - w / M))


# -- continuous-input view used by the Lipschitz penalty ----------------------


def embed_pairs(params: ModelParams, users, items) -> np.ndarray:
    """Concatenated ``[user_emb, item_emb]`` rows: the critic's input space."""
    users, items = _ids(params, users, items)
    return np.concatenate([params.user_emb[users], params.item_emb[items]], axis=1)


def point_forward(params: ModelParams, Z: np.ndarray) -> np.ndarray:
    """Critic value at continuous points ``Z`` (entity biases are not defined there)."""
    if params.kind == "mcf":
        d = params.dim
        raw = np.einsum("nd,nd->n", Z[:, :d], Z[:, d:])
    else:
        raw, _ = _mlp_forward(params.layers, Z)
    return raw + params.global_bias[0]


def input_gradient(params: ModelParams, Z: np.ndarray) -> np.ndarray:
    """Gradient of :func:`point_forward` w.r.t. each row of ``Z``."""
    if params.kind == "mcf":
        d = params.dim
        return np.concatenate([Z[:, d:], Z[:, :d]], axis=1)
    _, acts = _mlp_forward(params.layers, Z)
    v = np.broadcast_to(params.layers[-1][0][0], (len(Z), params.layers[-1][0].shape[1]))
    for k in range(len(params.layers) - 2, -1, -1):
        v = (v * (acts[k + 1] > 0)) @ params.layers[k][0]
    return v


def input_gradient_backward(params: ModelParams, Z: np.ndarray, A: np.ndarray):
    """Pull ``A = dP/dG`` (G = input gradients at Z) back to dense params and to Z.

    ReLU masks are piecewise constant, so for NCF the result carries no
    dependence on Z and no bias gradients.
    """
    if params.kind == "mcf":
        d = params.dim
        return {}, np.concatenate([A[:, d:], A[:, :d]], axis=1)
    _, acts = _mlp_forward(params.layers, Z)
    L = len(params.layers) - 1
    # recompute the v/s chain from the head down
    vs = [None] * (L + 1)
    ss = [None] * (L + 1)
    vs[L] = np.broadcast_to(params.layers[L][0][0], (len(Z), params.layers[L][0].shape[1]))
    for k in range(L, 0, -1):
        ss[k] = vs[k] * (acts[k] > 0)
        vs[k - 1] = ss[k] @ params.layers[k - 1][0]
    grads = {}
    a = A
    for k in range(1, L + 1):
        W = params.layers[k - 1][0]
        grads[f"layer{k - 1}.W"] = ss[k].T @ a
        a = (a @ W.T) * (acts[k] > 0)
    grads[f"layer{L}.W"] = a.sum(axis=0)[None, :]
    return grads, np.zeros_like(Z)


# -- optimizer -----------------------------------------------------------------


@dataclass(eq=False)
class AdamState:
    m: dict
    v: dict
    row_steps: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0

    def copy(self) -> "AdamState":
        return AdamState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            {k: a.copy() for k, a in self.row_steps.items()},
            self.step,
            self.beta1,
            self.beta2,
            self.eps,
            self.clip,
        )


def init_adam(params, beta1=0.9, beta2=0.999, eps=1e-8, clip=5.0) -> AdamState:
    arrays = params.arrays()
    sparse = params.sparse_arrays()
    return AdamState(
        m={k: np.zeros_like(a) for k, a in arrays.items()},
        v={k: np.zeros_like(a) for k, a in arrays.items()},
        row_steps={k: np.zeros(a.shape[0], dtype=np.int64) for k, a in sparse.items()},
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        clip=clip,
    )


def clip_gradients(grads: Gradients, clip: float | None) -> Gradients:
    """Rescale each block whose L2 norm exceeds ``clip``."""
    grads = grads.merge()
    if clip is None or clip <= 0:
        return grads

    def _c(v):
        n = np.sqrt(np.sum(v * v))
        return v * (clip / n) if n > clip else v

    return Gradients(
        {k: _c(v) for k, v in grads.dense.items()},
        {k: (r, _c(v)) for k, (r, v) in grads.sparse.items()},
    )


def apply_update(params, adam: AdamState, grads: Gradients, lr: float, sign: float = -1.0):
    """One Adam step in place; ``sign=+1`` ascends.

    Dense blocks advance every call (missing blocks count as zero gradient);
    embedding rows absent from ``grads`` keep their values and moments.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    grads = clip_gradients(grads.merge(), adam.clip)
    if not grads.is_finite():
        raise TrainingDivergence("non-finite gradient")
    b1, b2, eps = adam.beta1, adam.beta2, adam.eps
    adam.step += 1
    t = adam.step
    for k, p in params.dense_arrays().items():
        g = grads.dense.get(k)
        m, v = adam.m[k], adam.v[k]
        m *= b1
        v *= b2
        if g is not None:
            m += (1 - b1) * g
            v += (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p += sign * lr * mh / (np.sqrt(vh) + eps)
    for k, p in params.sparse_arrays().items():
        if k not in grads.sparse:
            continue
        rows, g = grads.sparse[k]
        steps = adam.row_steps[k]
        steps[rows] += 1
        tr = steps[rows].astype(np.float64)
        m = b1 * adam.m[k][rows] + (1 - b1) * g
        v = b2 * adam.v[k][rows] + (1 - b2) * g * g
        adam.m[k][rows] = m
        adam.v[k][rows] = v
        shape = (-1,) + (1,) * (g.ndim - 1)
        mh = m / (1 - b1 ** tr).reshape(shape)
        vh = v / (1 - b2 ** tr).reshape(shape)
        p[rows] += sign * lr * mh / (np.sqrt(vh) + eps)
    return params, adam


# -- checkpoints -----------------------------------------------------------------


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _model_meta(p: ModelParams) -> dict:
    return {
        "kind": p.kind,
        "output": p.output,
        "entity_bias": p.entity_bias,
        "n_layers": len(p.layers),
    }


def _all_arrays(p: ModelParams) -> dict:
    out = {
        "user_emb": p.user_emb,
        "item_emb": p.item_emb,
        "user_bias": p.user_bias,
        "item_bias": p.item_bias,
        "global_bias": p.global_bias,
    }
    for k, (W, b) in enumerate(p.layers):
        out[f"layer{k}.W"] = W
        out[f"layer{k}.b"] = b
    return out


def _rebuild(meta: dict, arrays: dict) -> ModelParams:
    layers = [
        [arrays[f"layer{k}.W"], arrays[f"layer{k}.b"]] for k in range(meta["n_layers"])
    ]
    return ModelParams(
        kind=meta["kind"],
        output=meta["output"],
        user_emb=arrays["user_emb"],
        item_emb=arrays["item_emb"],
        user_bias=arrays["user_bias"],
        item_bias=arrays["item_bias"],
        global_bias=arrays["global_bias"],
        layers=layers,
        entity_bias=meta["entity_bias"],
    )


def save_checkpoint(path, models: dict, config: dict | None = None, fmt: str = "bin"):
    """Write named models plus the config hash; ``fmt`` is ``"bin"`` (npz) or ``"json"``."""
    config = config or {}
    meta = {
        "config_hash": config_hash(config),
        "models": {name: _model_meta(p) for name, p in models.items()},
    }
    if fmt == "bin":
        payload = {"__meta__": np.array(json.dumps(meta))}
        for name, p in models.items():
            for k, a in _all_arrays(p).items():
                payload[f"{name}/{k}"] = a
        buf = io.BytesIO()
        np.savez(buf, **payload)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    elif fmt == "json":
        doc = {"meta": meta, "arrays": {}}
        for name, p in models.items():
            doc["arrays"][name] = {
                k: {"shape": list(a.shape), "data": a.ravel().tolist()}
                for k, a in _all_arrays(p).items()
            }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
    else:
        raise ValueError(f"unknown checkpoint format {fmt!r}")


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        head = fh.read(1)
    if head == b"{":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        meta = doc["meta"]
        models = {}
        for name, m in meta["models"].items():
            arrays = {
                k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                for k, v in doc["arrays"][name].items()
            }
            models[name] = _rebuild(m, arrays)
        return models, meta
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        models = {}
        for name, m in meta["models"].items():
            arrays = {
                key.split("/", 1)[1]: z[key].copy() for key in z.files if key.startswith(name + "/")
            }
            models[name] = _rebuild(m, arrays)
    return models, meta


def point_backward(params, Z: np.ndarray, upstream) -> tuple[Gradients, np.ndarray]:
    """Gradient of ``sum(upstream * point_forward(Z))`` w.r.t. dense params and Z."""
    d = np.asarray(upstream, dtype=np.float64)
    dense = {"global_bias": np.array([d.sum()])}
    if params.kind == "mcf":
        k = params.dim
        return Gradients(dense), np.concatenate([d[:, None] * Z[:, k:], d[:, None] * Z[:, :k]], 1)
    _, acts = _mlp_forward(params.layers, Z)
    L = len(params.layers)
    W, _ = params.layers[-1]
    dense[f"layer{L - 1}.W"] = d[None, :] @ acts[-1]
    dense[f"layer{L - 1}.b"] = np.array([d.sum()])
    dh = d[:, None] * W[0][None, :]
    for k in range(L - 2, -1, -1):
        dpre = dh * (acts[k + 1] > 0)
        dense[f"layer{k}.W"] = dpre.T @ acts[k]
        dense[f"layer{k}.b"] = dpre.sum(axis=0)
        dh = dpre @ params.layers[k][0]
    return Gradients(dense), dh


@dataclass(eq=False)
class MlpCritic:
    """A critic over raw points in R^d (no embedding tables)."""

    layers: list
    global_bias: np.ndarray = field(default_factory=lambda: np.zeros(1))
    kind: str = "ncf"

    def __call__(self, Z) -> np.ndarray:
        return point_forward(self, np.atleast_2d(np.asarray(Z, dtype=np.float64)))

    def sparse_arrays(self) -> dict:
        return {}

    def dense_arrays(self) -> dict:
        out = {"global_bias": self.global_bias}
        for k, (W, b) in enumerate(self.layers):
            out[f"layer{k}.W"] = W
            out[f"layer{k}.b"] = b
        return out

    def arrays(self) -> dict:
        return self.dense_arrays()


def init_mlp_critic(in_dim: int, rng: np.random.Generator, hidden=(64, 64)) -> MlpCritic:
    layers, fan_in = [], in_dim
    for width in (*hidden, 1):
        limit = np.sqrt(6.0 / (fan_in + width))
        layers.append([rng.uniform(-limit, limit, size=(width, fan_in)), np.zeros(width)])
        fan_in = width
    return MlpCritic(layers)
