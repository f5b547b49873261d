"""Pop / MCF / NCF / IPW-MF / DT-MCF / DT-NCF / DT-(M/N/N) on the bundled data, x100 table."""
import argparse
import dataclasses
import json
import os

from dtrec.experiments import load_config, method_label, prepare_data, run_experiment
from dtrec.metrics import format_table

VARIANTS = [
    ("Pop", None),
    ("MCF", None),
    ("NCF", None),
    ("IPW-MF", None),
    ("DT", {"f": "mcf", "w": "mcf", "g": "mcf"}),
    ("DT", {"f": "ncf", "w": "ncf", "g": "ncf"}),
    ("DT", {"f": "mcf", "w": "ncf", "g": "ncf"}),
]


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(here, "..", "configs", "method_comparison.toml"))
    ap.add_argument("--n-runs", type=int)
    ap.add_argument("--outdir")
    ap.add_argument("--methods", help="comma-separated subset of labels, e.g. MCF,DT-MCF")
    args = ap.parse_args()
    base = load_config(args.config)
    if args.n_runs:
        base = dataclasses.replace(base, n_runs=args.n_runs)
    if args.outdir:
        base = dataclasses.replace(base, outdir=args.outdir)
    wanted = set(args.methods.split(",")) if args.methods else None
    data = prepare_data(base)
    rows, summaries = {}, {}
    K = base.eval.K
    for method, kinds in VARIANTS:
        cfg = dataclasses.replace(base, method=method, kinds=kinds or base.kinds)
        label = method_label(cfg)
        if wanted and label not in wanted:
            continue
        res = run_experiment(cfg, data)
        s = res["summary"]
        summaries[label] = s
        rows[label] = {
            f"Rel@{K}": s["rel_at_k"]["mean"],
            f"Hit@{K}": 100 * s["hit_at_k"]["mean"],
            f"NDCG@{K}": 100 * s["ndcg_at_k"]["mean"],
        }
        print(f"{label}: done", flush=True)
    print(format_table(rows))
    with open(os.path.join(base.outdir, "method_comparison.json"), "w", encoding="utf-8") as fh:
        json.dump(summaries, fh, sort_keys=True, indent=1)


if __name__ == "__main__":
    main()
