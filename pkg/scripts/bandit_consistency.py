"""Consistency gap per lambda on the shipped bandit instances, plus IW overlap diagnostics."""
import argparse
import json

import numpy as np

from dtrec import bandit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lambdas", default="0,0.05,0.1,0.2,0.3,0.5,1,2")
    ap.add_argument("--resolution", type=int, default=21)
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    lams = [float(x) for x in args.lambdas.split(",")]
    for inst in bandit.shipped_instances():
        res = bandit.consistency_check(inst, lams, args.resolution)
        print(f"instance {inst.name}: CRM risk {res['risk_star']:.4f}")
        for lam, gap, v in zip(res["lambda"], res["gap"], res["dt_min"]):
            print(f"  lambda={lam:<5g} DT min={v:.4f} gap={gap:.4f}")
    rng = np.random.default_rng(args.seed)
    inst, target = bandit.missing_mass_instance()
    d = bandit.iw_overlap_diagnostic(inst, target, args.samples, rng)
    print("missing mass:", json.dumps({k: round(v, 5) for k, v in d.items()}))
    for inst, tgt in bandit.variance_pair():
        d = bandit.iw_overlap_diagnostic(inst, tgt, args.samples, rng)
        print(f"{inst.name}: d1={d['d1']:.3f} variance={d['variance']:.3e} bias={d['bias']:+.4f} (se {d['se']:.4f})")


if __name__ == "__main__":
    main()
