"""Two-time-scale GDA on a scalar saddle game: distance to the equilibrium over time."""
import argparse

import numpy as np

from dtrec.trainer import scalar_game_gda


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eta", type=float, default=0.01)
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--gammas", default="1,10")
    args = ap.parse_args()
    for gamma in (float(g) for g in args.gammas.split(",")):
        traj = scalar_game_gda(1.0, 1.0, args.eta, gamma, args.steps)
        dist = np.hypot(traj[:, 0], traj[:, 1])
        hit = np.flatnonzero(dist < 1e-2)
        first = int(hit[0]) if len(hit) else None
        print(f"gamma={gamma:g}: final distance {dist[-1]:.3e}, first below 1e-2 at step {first}")


if __name__ == "__main__":
    main()
