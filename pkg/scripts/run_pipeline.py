#!/usr/bin/env python3
"""End-to-end experiment: train a patch, score its transfer, probe alignment.

Usage: python scripts/run_pipeline.py [--config PATH] [--out DIR] [--seed N]
"""

import argparse
import sys
from pathlib import Path

from patchlab.cli import cmd_analyze, cmd_eval, cmd_train


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(Path(__file__).parent.parent / "configs" / "default.cfg"))
    parser.add_argument("--out", default="runs/pipeline")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    status = cmd_train(args.config, args.out, seed_override=args.seed)
    if status:
        return status
    patch = str(Path(args.out) / "patch.upaf")
    status = cmd_eval(patch, args.config, args.out)
    if status:
        return status
    return cmd_analyze(args.config, args.out, patch)


if __name__ == "__main__":
    sys.exit(main())
