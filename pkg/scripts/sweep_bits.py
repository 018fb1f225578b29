"""Accuracy versus bit width on the synthetic event task (desk-scale).

Trains the tiny preset at 32, 8, 4, 2 and 1 bits on the same split and
prints accuracy, accuracy drop and compression per width.

    python3 scripts/sweep_bits.py --epochs 50 --out runs/sweep
"""

import argparse
import sys

from snnq.cli import dispatch


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--samples-per-class", type=int, default=250)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args(argv)
    return dispatch([
        "sweep-bits", "--epochs", str(args.epochs), "--seed", str(args.seed),
        "--samples-per-class", str(args.samples_per_class), "--out", args.out,
    ])


if __name__ == "__main__":
    sys.exit(main())
