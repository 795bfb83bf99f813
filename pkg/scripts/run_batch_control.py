#!/usr/bin/env python3
"""Batch-size control: scratch with doubled target batch vs. standard scratch,
plus a repeated cell to confirm identical seeds give identical curves."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from _common import build_parser, config_from, finish

from xtra.experiments import exp_batch_control


def main() -> None:
    ap = build_parser("out/batch_control")
    ap.add_argument("--target", default="maze-0", help="target task id")
    args = ap.parse_args()
    cfg, seeds = config_from(args)
    report = exp_batch_control(cfg, seeds=seeds, jobs=args.jobs, target_task=args.target)
    finish(report, args.out)


if __name__ == "__main__":
    main()
