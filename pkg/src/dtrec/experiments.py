"""Config-driven runs: data preparation, baselines, DT training, sweeps."""
from __future__ import annotations

import dataclasses
import itertools
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import (
    InteractionLog,
    SplitDataset,
    filter_min_activity,
    leave_last_out_split,
    load_interactions,
)
from .metrics import EvalConfig, MetricsReport, evaluate, format_table, weight_analysis, write_table_tsv
from .models import config_hash, save_checkpoint
from .reco import RecoConfig
from .simulator import McfFitConfig, SimConfig, simulate
from .trainer import LAMBDA_GRID, ErmConfig, GdaConfig, TrainedModel, train, train_erm
from .transport import LipschitzPenaltyConfig

METHODS = ("Pop", "MCF", "NCF", "IPW-MF", "DT")
TOY_DATA = "toy"


def toy_ratings_path() -> str:
    return str(resources.files("dtrec") / "resources" / "toy_ratings.tsv")


@dataclass(frozen=True)
class DataSpec:
    source: str = TOY_DATA  # "toy" or a TSV path
    schema: str = "rating"
    rating_threshold: float = 3.0
    min_count: int = 0
    simulate: bool = True


@dataclass(frozen=True)
class PropensityConfig:
    exponent: float = 0.5
    clip: float = 0.1

    def __post_init__(self):
        if not 0 < self.exponent <= 1:
            raise ValueError("propensity exponent must lie in (0, 1]")
        if not 0 < self.clip <= 1:
            raise ValueError("propensity clip must lie in (0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = DataSpec()
    sim: SimConfig = SimConfig()
    method: str = "DT"
    kinds: dict = field(default_factory=lambda: {"f": "mcf", "w": "mcf", "g": "mcf"})
    gda: GdaConfig = GdaConfig()
    erm: ErmConfig = ErmConfig()
    propensity: PropensityConfig = PropensityConfig()
    eval: EvalConfig = EvalConfig()
    n_runs: int = 1
    seed_base: int = 0
    outdir: str = "runs"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        bad = {k: v for k, v in self.kinds.items() if k not in "fwg" or v not in ("mcf", "ncf")}
        if bad:
            raise ValueError(f"bad model kinds {bad}")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# -- building configs from nested dicts (TOML) --------------------------------------

_NESTED = {
    ExperimentConfig: {
        "data": DataSpec,
        "sim": SimConfig,
        "gda": GdaConfig,
        "erm": ErmConfig,
        "propensity": PropensityConfig,
        "eval": EvalConfig,
    },
    SimConfig: {"relevance_fit": McfFitConfig, "exposure_fit": McfFitConfig},
    GdaConfig: {"reco": RecoConfig, "penalty": LipschitzPenaltyConfig},
}
_TUPLES = {"step_ratio", "hidden", "mlp_hidden"}


def build(cls, d: dict | None):
    d = dict(d or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for k, sub in _NESTED.get(cls, {}).items():
        if k in d:
            d[k] = build(sub, d[k])
    for k in _TUPLES & set(d):
        d[k] = tuple(d[k])
    return cls(**d)


def config_from_dict(d: dict) -> ExperimentConfig:
    return build(ExperimentConfig, d)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        d = tomllib.load(fh)
    d.pop("sweep", None)
    return config_from_dict(d)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def load_sweep(path) -> dict:
    """The ``[sweep]`` table as ``{dotted key: values}``."""
    with open(path, "rb") as fh:
        return _flatten(tomllib.load(fh).get("sweep", {}))


def set_path(d: dict, dotted: str, value):
    """Assign ``value`` at a dotted key (``"gda.lam"``), creating tables as needed."""
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ValueError(f"{dotted}: {k} is not a table")
    cur[keys[-1]] = value


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    d = cfg.to_dict()
    for k, v in overrides.items():
        set_path(d, k, v)
    return config_from_dict(d)


def parse_value(text: str):
    """CLI value: JSON when it parses (numbers, lists, booleans), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# -- data -----------------------------------------------------------------------------


def load_source(spec: DataSpec) -> InteractionLog:
    path = toy_ratings_path() if spec.source == TOY_DATA else spec.source
    log = load_interactions(path, spec.schema, spec.rating_threshold)
    if spec.min_count > 1:
        log = filter_min_activity(log, spec.min_count)
    return log


def prepare_data(cfg: ExperimentConfig):
    """``(split, ground truth or None)``; the ground truth goes to evaluation only."""
    log = load_source(cfg.data)
    gt = None
    if cfg.data.simulate:
        log, gt = simulate(log, cfg.sim)
    split = leave_last_out_split(log.positives() if gt is None else log, drop_short_users=True)
    return split, gt


# -- baselines --------------------------------------------------------------------------


def item_counts(split: SplitDataset) -> np.ndarray:
    t = split.train
    return np.bincount(t.items[t.labels == 1], minlength=split.n_items).astype(np.float64)


def pop_scores(split: SplitDataset) -> np.ndarray:
    """Every user gets the train interaction count of each item as its score."""
    return np.broadcast_to(item_counts(split), (split.n_users, split.n_items))


def run_pop_baseline(split: SplitDataset, eval_cfg: EvalConfig = EvalConfig(), gt=None):
    return evaluate(pop_scores(split), split, gt, eval_cfg)


def ipw_item_weights(split: SplitDataset, cfg: PropensityConfig) -> np.ndarray:
    """``1 / max(clip, (count / max count) ** exponent)`` per item."""
    c = item_counts(split)
    prop = (c / max(c.max(), 1.0)) ** cfg.exponent
    return 1.0 / np.maximum(prop, cfg.clip)


def run_ipw_mf(split, propensity: PropensityConfig, erm: ErmConfig, eval_cfg, gt=None):
    trained = train_erm(split, erm, "mcf", ipw_item_weights(split, propensity))
    return evaluate(trained.theta_f, split, gt, eval_cfg), trained


# -- runs ------------------------------------------------------------------------------


def _fit(cfg: ExperimentConfig, split, seed: int) -> TrainedModel | None:
    m = cfg.method
    if m == "Pop":
        return None
    if m in ("MCF", "NCF"):
        return train_erm(split, dataclasses.replace(cfg.erm, seed=seed), m.lower())
    if m == "IPW-MF":
        w = ipw_item_weights(split, cfg.propensity)
        return train_erm(split, dataclasses.replace(cfg.erm, seed=seed), "mcf", w)
    return train(split, dataclasses.replace(cfg.gda, seed=seed), cfg.kinds)


def method_label(cfg: ExperimentConfig) -> str:
    if cfg.method != "DT":
        return cfg.method
    k = cfg.kinds
    if k["f"] == k["w"] == k["g"]:
        return f"DT-{k['f'].upper()}"
    return "DT-(" + "/".join(k[x][0].upper() for x in "fwg") + ")"


def run_one(cfg: ExperimentConfig, split, gt, seed: int, outdir: str | None = None) -> MetricsReport:
    """Train (unless Pop), evaluate on test, and persist artifacts under ``outdir``."""
    trained = _fit(cfg, split, seed)
    model = pop_scores(split) if trained is None else trained.theta_f
    resolved = cfg.to_dict()
    meta = {
        "method": method_label(cfg),
        "seed": seed,
        "config_hash": config_hash(resolved),
        "config": resolved,
    }
    if cfg.method == "DT" and cfg.gda.lam == 0:
        meta["note"] = "ablation: no transport"
    if trained is not None:
        meta["epochs"] = len(trained.log)
        meta["diverged"] = trained.diverged
        meta["best_val"] = best_validation(trained)
    report = evaluate(model, split, gt, cfg.eval, meta=meta)
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
        if trained is not None:
            with open(os.path.join(outdir, "train.log.jsonl"), "w", encoding="utf-8") as fh:
                fh.write(trained.log_lines())
            models = {"f": trained.theta_f}
            if trained.state is not None:
                models.update(w=trained.state.theta_w, g=trained.state.theta_g, f_final=trained.state.theta_f)
            save_checkpoint(os.path.join(outdir, "checkpoint.bin"), models, resolved)
            if trained.state is not None:
                table = weight_analysis(
                    trained.state.theta_w,
                    trained.theta_f,
                    split,
                    gt,
                    K=cfg.gda.reco.K,
                    max_weight=cfg.gda.max_weight,
                    rng=np.random.default_rng(seed),
                )
                write_table_tsv(table, os.path.join(outdir, "weights.tsv"))
    return report


def best_validation(trained: TrainedModel) -> float:
    """Best validation Rel@K seen during training (the early-stopping criterion)."""
    vals = [r[k] for r in trained.log for k in r if k.startswith("val_rel@")]
    return float(max(vals)) if vals else float("nan")


def summarize(reports: list) -> dict:
    out = {"n_runs": len(reports)}
    for key in ("rel_at_k", "hit_at_k", "ndcg_at_k"):
        v = np.array([getattr(r, key) for r in reports])
        out[key] = {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0}
    return out


def run_experiment(cfg: ExperimentConfig, data=None, write: bool = True) -> dict:
    """All seeds of one configuration; returns per-run reports and their mean (std)."""
    split, gt = prepare_data(cfg) if data is None else data
    reports = []
    for seed in range(cfg.seed_base, cfg.seed_base + cfg.n_runs):
        out = os.path.join(cfg.outdir, method_label(cfg), str(seed)) if write else None
        reports.append(run_one(cfg, split, gt, seed, out))
    return {"label": method_label(cfg), "reports": reports, "summary": summarize(reports)}


def run_dt(cfg: ExperimentConfig, data=None, write: bool = True) -> dict:
    if cfg.method != "DT":
        raise ValueError("run_dt needs method = 'DT'")
    return run_experiment(cfg, data, write)


def run_sweep(cfg: ExperimentConfig, sweep: dict, data=None, write: bool = True) -> list:
    """Cross product of ``{dotted key: values}``; one row per cell, failures included."""
    sweep = {k: list(v) for k, v in (sweep or {}).items()}
    if not sweep or any(len(v) == 0 for v in sweep.values()):
        raise ValueError("nothing to sweep")
    data = prepare_data(cfg) if data is None else data
    keys = list(sweep)
    rows = []
    for combo in itertools.product(*(sweep[k] for k in keys)):
        setting = dict(zip(keys, combo))
        tag = ",".join(f"{k}={v}" for k, v in setting.items())
        try:
            cell = with_overrides(cfg, {**setting, "outdir": os.path.join(cfg.outdir, _slug(tag))})
            res = run_experiment(cell, data, write)
            rows.append({"setting": setting, "status": "ok", **res["summary"]})
        except Exception as exc:  # a failed cell is recorded and the sweep goes on
            rows.append({"setting": setting, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    return rows


def _slug(tag: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=," else "_" for c in tag)


def sweep_table(rows: list, K: int = 10) -> str:
    table = {}
    for r in rows:
        label = ",".join(f"{k}={v}" for k, v in r["setting"].items())
        if r["status"] != "ok":
            table[label] = {f"Rel@{K}": "failed"}
            continue
        table[label] = {
            f"Rel@{K}": r["rel_at_k"]["mean"],
            f"Hit@{K}": 100 * r["hit_at_k"]["mean"],
            f"NDCG@{K}": 100 * r["ndcg_at_k"]["mean"],
        }
    return format_table(table)


def lambda_study(cfg: ExperimentConfig, lam_grid=LAMBDA_GRID, tune_runs: int = 3, data=None) -> dict:
    """DT with validation-tuned lambda against plain MCF and the lambda = 0 ablation.

    Every lambda in ``lam_grid`` is trained on the first ``tune_runs`` seeds;
    the one with the best mean validation Rel@K (ties to the smaller lambda)
    is then run on all ``cfg.n_runs`` seeds, as are the ablation and MCF.
    Returns per-seed test Rel@K lists and their means. Nothing is written.
    """
    if not 1 <= tune_runs <= cfg.n_runs:
        raise ValueError("tune_runs must lie in [1, n_runs]")
    split, gt = prepare_data(cfg) if data is None else data
    seeds = list(range(cfg.seed_base, cfg.seed_base + cfg.n_runs))
    dt = dataclasses.replace(cfg, method="DT")

    def runs(c, lam, which):
        c = c if lam is None else dataclasses.replace(c, gda=dataclasses.replace(c.gda, lam=lam))
        return [run_one(c, split, gt, s) for s in which]

    tuning = {}
    for lam in lam_grid:
        reps = runs(dt, lam, seeds[:tune_runs])
        tuning[lam] = {"val": [r.meta["best_val"] for r in reps], "reports": reps}
    tuned = max(lam_grid, key=lambda lam: (np.mean(tuning[lam]["val"]), -lam))
    best = tuning[tuned]["reports"] + runs(dt, tuned, seeds[tune_runs:])
    ablation = runs(dt, 0.0, seeds)
    mcf = runs(dataclasses.replace(cfg, method="MCF"), None, seeds)
    test = {
        "DT": [r.rel_at_k for r in best],
        "DT lambda=0": [r.rel_at_k for r in ablation],
        "MCF": [r.rel_at_k for r in mcf],
    }
    return {
        "tuned_lambda": float(tuned),
        "tuning_val": {float(k): float(np.mean(v["val"])) for k, v in tuning.items()},
        "tuning_test": {float(k): float(np.mean([r.rel_at_k for r in v["reports"]])) for k, v in tuning.items()},
        "seeds": seeds,
        "test_rel": test,
        "mean_rel": {k: float(np.mean(v)) for k, v in test.items()},
    }
