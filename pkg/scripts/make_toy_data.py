"""Regenerate the bundled toy rating matrix (deterministic)."""
import argparse

from dtrec.experiments import toy_ratings_path
from dtrec.simulator import write_toy_ratings


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--output", default=toy_ratings_path())
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    write_toy_ratings(args.output, seed=args.seed)
    print(args.output)


if __name__ == "__main__":
    main()
