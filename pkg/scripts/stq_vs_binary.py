"""Train the toy model with STQ and with plain binary weights under one budget."""

import argparse
import sys

from qrobust.experiments import stq_vs_binary_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()
    result = stq_vs_binary_trial(range(args.seeds), args.epochs, log=print)
    print(f"data: {result.source}; median stq {result.median('stq'):.1f}, median binary {result.median('binary'):.1f}")
    sys.exit(0 if result.passed else 1)


if __name__ == "__main__":
    main()
