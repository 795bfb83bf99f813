"""Shared plumbing for the experiment scripts: argument parsing, config
resolution, and rendering the per-arm plots from a saved report."""

from __future__ import annotations

import argparse
from collections import defaultdict
from pathlib import Path

from xtra.cli import main as xtra_cli
from xtra.config import resolve_config
from xtra.experiments import ExperimentReport, save_report


def build_parser(default_out: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=default_out, help="report directory")
    ap.add_argument("--seeds", default="0,1,2,3,4", help="comma separated seeds")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for cells")
    ap.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="config override, repeatable",
    )
    return ap


def config_from(args) -> tuple:
    pairs = {}
    for item in args.overrides:
        key, _, text = item.partition("=")
        pairs[key] = text
    cfg = resolve_config(overrides=pairs, desk=True)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    return cfg, seeds


def finish(report: ExperimentReport, out_dir: str) -> Path:
    """Save the report and render one plot set per (variant, arm) group."""
    out = save_report(report, out_dir)
    groups: dict[str, list[Path]] = defaultdict(list)
    for label in report.curves:
        variant_arm, _, _ = label.rpartition("/")
        groups[variant_arm].append(out / "runs" / (label.replace("/", "_") + ".metrics.jsonl"))
    for variant_arm, files in sorted(groups.items()):
        plot_dir = out / "plots" / variant_arm.replace("/", "_")
        argv = ["plot", *[str(f) for f in files], "--out", str(plot_dir)]
        code = xtra_cli(argv)
        if code != 0:
            raise SystemExit(code)
    summaries = [r for r in report.records if r.get("record") == "summary"]
    for s in summaries:
        print(s)
    print(f"report: {out / 'report.jsonl'}")
    return out
