#!/usr/bin/env python3
"""Component-loading ablation: finetune with the empty subset, h, h+g, and
h+g+f loaded from the pretrained student, next to a scratch control."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from _common import build_parser, config_from, finish

from xtra.experiments import exp_components


def main() -> None:
    ap = build_parser("out/components")
    ap.add_argument("--target", default="maze-0", help="target task id")
    args = ap.parse_args()
    cfg, seeds = config_from(args)
    report = exp_components(cfg, seeds=seeds, jobs=args.jobs, target_task=args.target)
    finish(report, args.out)


if __name__ == "__main__":
    main()
