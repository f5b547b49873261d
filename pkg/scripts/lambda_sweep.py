"""DT-MCF with validation-tuned lambda vs MCF and the lambda = 0 ablation."""
import argparse
import dataclasses
import json
import os

from dtrec.experiments import lambda_study, load_config


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=os.path.join(here, "..", "configs", "desk_scale.toml"))
    ap.add_argument("--n-runs", type=int)
    ap.add_argument("--tune-runs", type=int, default=3)
    args = ap.parse_args()
    cfg = load_config(args.config)
    if args.n_runs:
        cfg = dataclasses.replace(cfg, n_runs=args.n_runs)
    res = lambda_study(cfg, tune_runs=args.tune_runs)
    print(json.dumps(res, indent=1))
    m = res["mean_rel"]
    print(f"tuned lambda {res['tuned_lambda']}: DT {m['DT']:.4f}  MCF {m['MCF']:.4f}  lambda=0 {m['DT lambda=0']:.4f}")


if __name__ == "__main__":
    main()
