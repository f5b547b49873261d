"""Command-line entry point: ``dtrec <subcommand> [--config FILE] [--set key=value ...]``.

Every config key can be overridden with ``--set section.key=value``; the
named flags below are shortcuts for the common ones. Failures exit nonzero
with a one-line JSON error on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import bandit
from .data import write_interactions
from .experiments import (
    ExperimentConfig,
    load_config,
    load_source,
    load_sweep,
    parse_value,
    prepare_data,
    run_experiment,
    run_sweep,
    sweep_table,
    with_overrides,
)
from .metrics import evaluate, format_table, weight_analysis, write_table_tsv
from .models import load_checkpoint
from .simulator import click_ratio, save_ground_truth, simulate

# shortcut flag -> dotted config keys it sets
SHORTCUTS = {
    "topk": ("eval.K", "gda.reco.K", "erm.K"),
    "neg_eval_samples": ("eval.n_negatives",),
    "reco_temperature": ("gda.reco.temperature",),
    "bernoulli": ("sim.bernoulli",),
    "method": ("method",),
    "lam": ("gda.lam",),
    "n_runs": ("n_runs",),
    "seed": ("seed_base",),
    "outdir": ("outdir",),
    "data": ("data.source",),
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for name, keys in SHORTCUTS.items():
        v = getattr(args, name, None)
        if v is not None and v is not False:
            for k in keys:
                overrides[k] = v
    for item in args.set or ():
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(v)
    return with_overrides(cfg, overrides) if overrides else cfg


# -- subcommands -----------------------------------------------------------------------


def cmd_ingest(args, cfg):
    path = args.input or cfg.data.source
    log = load_source(dataclasses.replace(cfg.data, source=path))
    summary = {
        "n_users": log.n_users,
        "n_items": log.n_items,
        "n_interactions": len(log),
        "n_positive": int(np.sum(log.labels == 1)),
        "click_ratio": click_ratio(log),
    }
    if args.output:
        write_interactions(log, args.output, "label")
    return summary


def cmd_simulate(args, cfg):
    ratings = load_source(cfg.data)
    clicks, gt = simulate(ratings, cfg.sim)
    out = args.output_dir
    os.makedirs(out, exist_ok=True)
    write_interactions(clicks, os.path.join(out, "clicks.tsv"), "label")
    save_ground_truth(gt, os.path.join(out, "ground_truth.tsv"))
    records = [
        {"stage": "source", "n_users": ratings.n_users, "n_items": ratings.n_items,
         "n_ratings": len(ratings), "click_ratio": gt.meta["source_click_ratio"]},
        {"stage": "ground_truth", "relevance_mean": float(gt.relevance_prob.mean()),
         "exposure_mean": float(gt.exposure_prob.mean()), "click_prob_max": float(gt.click_prob.max())},
        {"stage": "clicks", "n_clicks": len(clicks), "cutoff": gt.cutoff,
         "click_ratio": len(clicks) / (len(gt.user_ids) * len(gt.item_ids))},
    ]
    _write(os.path.join(out, "simulate.log.jsonl"), "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    report = {"config": cfg.to_dict(), **records[-1], "source_click_ratio": gt.meta["source_click_ratio"]}
    _write(os.path.join(out, "report.json"), _dump(report) + "\n")
    return report


def cmd_train(args, cfg):
    res = run_experiment(cfg)
    s = res["summary"]
    K = cfg.eval.K
    row = {
        f"Rel@{K}": s["rel_at_k"]["mean"],
        f"Hit@{K}": 100 * s["hit_at_k"]["mean"],
        f"NDCG@{K}": 100 * s["ndcg_at_k"]["mean"],
    }
    print(format_table({res["label"]: row}), file=sys.stderr)
    return {"label": res["label"], "summary": s, "outdir": os.path.join(cfg.outdir, res["label"])}


def _checkpoint_model(path, name):
    models, meta = load_checkpoint(path)
    if name not in models:
        raise CliError(f"checkpoint has no model {name!r}; found {sorted(models)}")
    return models, meta


def cmd_evaluate(args, cfg):
    models, _ = _checkpoint_model(args.checkpoint, args.model)
    split, gt = prepare_data(cfg)
    report = evaluate(models[args.model], split, gt, cfg.eval, stage=args.stage)
    if args.table:
        print(format_table({args.model: report.table_row()}), file=sys.stderr)
    return report.to_dict()


def cmd_weights(args, cfg):
    models, _ = _checkpoint_model(args.checkpoint, "w")
    split, gt = prepare_data(cfg)
    table = weight_analysis(
        models["w"],
        models["f"],
        split,
        gt,
        K=cfg.gda.reco.K,
        max_weight=cfg.gda.max_weight,
        rng=np.random.default_rng(cfg.seed_base),
    )
    write_table_tsv(table, args.output)
    return {"rows": len(table["w"]), "output": args.output}


def cmd_sweep(args, cfg):
    sweep = load_sweep(args.config) if args.config else {}
    for item in args.sweep or ():
        if "=" not in item:
            raise CliError(f"--sweep expects key=v1,v2,..., got {item!r}")
        k, vals = item.split("=", 1)
        sweep[k.strip()] = [parse_value(v) for v in vals.split(",") if v.strip()]
    rows = run_sweep(cfg, sweep)
    _write(os.path.join(cfg.outdir, "sweep.json"), _dump(rows) + "\n")
    print(sweep_table(rows, cfg.eval.K), file=sys.stderr)
    return rows


def cmd_bandit_check(args, cfg):
    lams = [float(x) for x in args.lambdas.split(",")]
    out = {"consistency": {}, "diagnostics": {}}
    for inst in bandit.shipped_instances():
        out["consistency"][inst.name] = bandit.consistency_check(inst, lams, args.resolution)
    rng = np.random.default_rng(args.bandit_seed)
    inst, target = bandit.missing_mass_instance()
    out["diagnostics"]["missing_mass"] = bandit.iw_overlap_diagnostic(inst, target, args.samples, rng)
    full = bandit.instance_2x2()
    out["diagnostics"]["full_overlap"] = bandit.iw_overlap_diagnostic(
        full, full.logging_joint[:, ::-1] / full.logging_joint.sum(), args.samples, rng
    )
    (near, tn), (far, tf) = bandit.variance_pair()
    out["diagnostics"]["near"] = bandit.iw_overlap_diagnostic(near, tn, args.samples, rng)
    out["diagnostics"]["far"] = bandit.iw_overlap_diagnostic(far, tf, args.samples, rng)
    return out


COMMANDS = {
    "ingest": cmd_ingest,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "bandit-check": cmd_bandit_check,
    "weights": cmd_weights,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--data", help="ratings TSV path, or 'toy' for the bundled matrix")
    common.add_argument("--topk", type=int)
    common.add_argument("--neg-eval-samples", type=int)
    common.add_argument("--reco-temperature", type=float)
    common.add_argument("--seed", type=int, help="first run seed")
    common.add_argument("--outdir")

    p = _Parser(prog="dtrec", description="Transport-regularized recommendation experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="load and summarize an interaction file")
    s.add_argument("--input")
    s.add_argument("--output", help="write the normalized log as TSV")

    s = sub.add_parser("simulate", parents=[common], help="semi-synthetic clicks from ratings")
    s.add_argument("--output-dir", required=True)
    s.add_argument("--bernoulli", action="store_true", default=None)

    s = sub.add_parser("train", parents=[common], help="train and evaluate n_runs seeds")
    s.add_argument("--method")
    s.add_argument("--lam", type=float)
    s.add_argument("--n-runs", type=int)

    s = sub.add_parser("evaluate", parents=[common], help="evaluate a saved checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--model", default="f")
    s.add_argument("--stage", default="test", choices=("test", "validation"))
    s.add_argument("--table", action="store_true")

    s = sub.add_parser("sweep", parents=[common], help="grid over config keys")
    s.add_argument("--sweep", action="append", metavar="KEY=V1,V2", help="add a swept key (repeatable)")
    s.add_argument("--method")
    s.add_argument("--n-runs", type=int)

    s = sub.add_parser("bandit-check", parents=[common], help="population-scale bandit checks")
    s.add_argument("--lambdas", default="0,0.1,0.3,0.5,1,2")
    s.add_argument("--resolution", type=int, default=21)
    s.add_argument("--samples", type=int, default=2000)
    s.add_argument("--bandit-seed", type=int, default=0)

    s = sub.add_parser("weights", parents=[common], help="weight-analysis table from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--output", required=True)
    return p


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        cfg = resolve_config(args)
        result = COMMANDS[command](args, cfg)
        print(_dump(result))
        return 0
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # every failure becomes one JSON line on stderr
        err = {"error": type(exc).__name__, "message": str(exc), "command": command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1


if __name__ == "__main__":
    sys.exit(main())
