#!/usr/bin/env python3
"""Held-out-variant transfer grid: for each maze variant, pretrain on the
other four, finetune on the held-out one, and compare against scratch."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from _common import build_parser, config_from, finish

from xtra.experiments import exp_similar_transfer


def main() -> None:
    args = build_parser("out/similar_transfer").parse_args()
    cfg, seeds = config_from(args)
    report = exp_similar_transfer(cfg, seeds=seeds, jobs=args.jobs)
    finish(report, args.out)


if __name__ == "__main__":
    main()
