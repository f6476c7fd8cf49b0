"""``qrobust <command> --config <path> [--seed N] [--out DIR]``

Flags override the config file. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numerical failure (NaN/Inf during training, or a
failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from . import __version__
from .attacks import AttackConfigError
from .autodiff.checkpoint import CheckpointError
from .autodiff.tensor import NonFiniteError, ShapeError
from .data import DataError
from .harness import COMMANDS, ConfigError, load_run_config
from .model import SpecError
from .quantize import QuantizerError
from .train import TrainConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CONFIG_ERRORS = (ConfigError, SpecError, QuantizerError, TrainConfigError, AttackConfigError)
DATA_ERRORS = (DataError, CheckpointError, ShapeError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qrobust", description="Quantized-model training, robustness evaluation and footprint reports.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="run configuration (UTF-8 JSON)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=None, help="overrides the config output directory")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed=args.seed, out=args.out)
        report = COMMANDS[args.command](cfg)
    except CONFIG_ERRORS as err:
        print(f"qrobust {args.command}: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as err:
        print(f"qrobust {args.command}: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as err:
        print(f"qrobust {args.command}: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.command == "gradcheck" and not report["passed"]:
        print(f"qrobust gradcheck: max relative error {report['max_rel_error']:.3g} over tolerance", file=sys.stderr)
        return EXIT_NUMERIC
    summary = {k: report[k] for k in ("clean_accuracy", "fold_variance", "mean_jr") if report.get(k) is not None}
    print(json.dumps({"command": args.command, "out": str(cfg.out), **summary}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
