#!/usr/bin/env python3
"""Task-relevance contrast: finetune one target from same-family pretraining,
cross-family pretraining, and scratch; log how the scheduler down-weights the
unrelated tasks."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from _common import build_parser, config_from, finish

from xtra.experiments import exp_relevance_contrast


def main() -> None:
    ap = build_parser("out/relevance_contrast")
    ap.add_argument("--target", default="maze-0", help="target task id")
    args = ap.parse_args()
    cfg, seeds = config_from(args)
    report = exp_relevance_contrast(cfg, seeds=seeds, jobs=args.jobs, target_task=args.target)
    finish(report, args.out)


if __name__ == "__main__":
    main()
