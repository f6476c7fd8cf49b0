"""Write a two-class grating stand-in in the CIFAR-10 binary layout.

The output directory holds data_batch_1.bin and test_batch.bin. Point a run
config at it with ``{"format": "cifar10", "train": DIR}`` or export it as
``QROBUST_CIFAR10``.
"""

import argparse
from pathlib import Path

from qrobust.data import synthetic_cifar, write_cifar_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--train-per-class", type=int, default=1000)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--classes", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    images, labels = synthetic_cifar(args.train_per_class, args.classes, args.seed)
    write_cifar_batch(args.out / "data_batch_1.bin", images, labels)
    images, labels = synthetic_cifar(args.test_per_class, args.classes, args.seed + 1)
    write_cifar_batch(args.out / "test_batch.bin", images, labels)
    print(f"wrote {args.out}/data_batch_1.bin and test_batch.bin")


if __name__ == "__main__":
    main()
