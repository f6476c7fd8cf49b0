"""Compare training with and without the Jacobian penalty over several seeds."""

import argparse
import csv
import sys

from qrobust.experiments import jr_effect_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--lambda-jr", type=float, default=0.1)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--csv", help="write per-run rows here")
    args = ap.parse_args()
    result = jr_effect_trial(range(args.seeds), args.lambda_jr, args.epochs, log=print)
    print(f"data: {result.source}; seeds with lower JR and no larger FGSM drop: {result.wins}/{len(result.seeds)}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "lambda_jr", "mean_jr", "clean_accuracy", "fgsm_accuracy", "drop"])
            w.writerows(result.rows())
    sys.exit(0 if result.passed else 1)


if __name__ == "__main__":
    main()
