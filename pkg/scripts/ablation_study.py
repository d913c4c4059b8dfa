#!/usr/bin/env python3
"""Run the tumor-conditioning ablation matrix (none/inverse/forward/both)
on a fresh phantom set and print the table. Thin wrapper over the CLI."""

import argparse
import sys

from tumorreg.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="ablation_out")
    ap.add_argument("--pairs", type=int, default=4)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--opt-iters", type=int, default=100)
    args = ap.parse_args()
    return cli_main([
        "ablate", "--out", args.out, "--pairs", str(args.pairs),
        "--seed", str(args.seed), "--extents", "24", "24", "18",
        "--tumor-radius", "4.0", "--svf-amplitude", "0.0",
        "--steps", "2", "--opt-iters", str(args.opt_iters),
        "--opt-lr", "0.12", "--lambda-smooth", "0.5",
    ])


if __name__ == "__main__":
    sys.exit(main())
