"""Print the weight footprint of a model spec under every quantizer scheme."""

import argparse

from qrobust.model import ModelSpec, footprint
from qrobust.quantize import SCHEMES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("spec", help="ModelSpec JSON")
    args = ap.parse_args()
    spec = ModelSpec.load(args.spec)
    names = ["fp32", "8-bit", "4-bit", "stq", "ternary", "2-bit", "binary", "s-binary"]
    base = footprint(spec, "fp32").total_bytes
    print(f"{'scheme':<10}{'params':>10}{'bytes':>12}{'packed':>10}{'KB':>10}{'vs fp32':>9}")
    for name in names:
        if name not in SCHEMES:
            continue
        r = footprint(spec, name)
        ratio = r.total_bytes / base if base else 0.0
        print(f"{name:<10}{r.total_params:>10}{r.total_bytes:>12g}{r.total_packed_bytes:>10}{r.total_kb:>10.2f}{ratio:>9.4f}")


if __name__ == "__main__":
    main()
