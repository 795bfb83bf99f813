"""Command line entry points.

Subcommands cover the full pipeline: dataset collection from checkpoints,
offline pretraining (teachers plus distilled student, or a baseline),
online finetuning with ablation switches, checkpoint evaluation, and curve
plotting from metrics files.

Every command that produces outputs writes the fully resolved configuration
next to them; re-running a command from that frozen file reproduces the
outputs byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import (
    RunConfig,
    env_spec,
    load_config,
    parse_value,
    resolve_config,
    save_config,
    search_config,
    spec_for_task_id,
)
from .envs import SHARED_ACTION_COUNT
from .errors import ConfigError, DataError, NumericError, XtraError
from .finetune import FinetuneConfig, evaluate, finetune_loop
from .model import WorldModel
from .pretrain import (
    bc_baseline,
    collect_offline_dataset,
    distill_student,
    multigame_offline_rl,
    train_teacher,
)
from .replay import load_dataset, save_dataset
from .runio import read_manifest, read_metrics, write_manifest, write_metrics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="start from a saved config file")
    parser.add_argument("--desk", action="store_true", help="apply desk-scale budget preset")
    parser.add_argument(
        "--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--out", help="override run.out_dir")


def _resolve(args, extra_typed: dict | None = None) -> RunConfig:
    typed: dict = {}
    if args.config:
        typed.update(load_config(args.config).as_dict())
    if extra_typed:
        typed.update(extra_typed)
    if args.seed is not None:
        typed["run.seed"] = args.seed
    if args.out is not None:
        typed["run.out_dir"] = args.out
    text = {}
    for item in args.sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        text[key.strip()] = value
    return resolve_config(overrides=text, desk=args.desk, typed_overrides=typed)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.s("run.out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.txt")
    return out


def _path_list(cfg: RunConfig, key: str) -> list[str]:
    raw = cfg.s(key)
    return [p.strip() for p in raw.split(",") if p.strip()]


def _load_model(path: str) -> WorldModel:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing checkpoint {p}")
    model, _ = WorldModel.load(p)
    return model


def cmd_collect(args) -> int:
    typed = {}
    if args.checkpoints:
        typed["paths.checkpoints"] = ",".join(args.checkpoints)
    if args.episodes_per_ckpt is not None:
        typed["pretrain.episodes_per_ckpt"] = args.episodes_per_ckpt
    if args.task:
        spec = spec_for_task_id(resolve_config(), args.task)
        typed["env.family"] = spec.family
        typed["env.variant_seed"] = spec.variant_seed
    cfg = _resolve(args, typed)

    spec = env_spec(cfg)
    paths = _path_list(cfg, "paths.checkpoints")
    if not paths:
        raise ConfigError("collect needs at least one checkpoint (--checkpoints)")
    models = [_load_model(p) for p in paths]
    for p, model in zip(paths, models):
        if model.cfg.obs_dim != spec.obs_dim or model.cfg.action_count != SHARED_ACTION_COUNT:
            raise ConfigError(
                f"checkpoint {p} was built for different dimensions than task {spec.task_id}"
            )

    rng = np.random.default_rng(cfg.i("run.seed"))
    data = collect_offline_dataset(
        spec, models, cfg.i("pretrain.episodes_per_ckpt"), search_config(cfg), rng
    )
    out = _out_dir(cfg)
    dataset_path = out / f"{spec.task_id}.xtrj"
    save_dataset(data, dataset_path)
    write_manifest(
        out / "manifest.txt",
        {
            "task": spec.task_id,
            "dataset": dataset_path.name,
            "trajectories": len(data),
            "transitions": sum(t.length for t in data),
        },
    )
    print(f"collect: {len(data)} trajectories for {spec.task_id} -> {dataset_path}")
    return EXIT_OK


def _load_datasets(cfg: RunConfig):
    paths = _path_list(cfg, "paths.dataset")
    if not paths:
        raise ConfigError("pretrain needs at least one dataset (--datasets)")
    datasets, task_ids = [], []
    for p in paths:
        if not Path(p).exists():
            raise DataError(f"missing dataset {p}")
        trajs = load_dataset(p)
        if not trajs:
            raise DataError(f"dataset {p} holds no trajectories")
        datasets.append(trajs)
        task_ids.append(trajs[0].task_id)
    if len(set(task_ids)) != len(task_ids):
        raise ConfigError(f"duplicate task ids across datasets: {task_ids}")
    return paths, datasets, task_ids


def cmd_pretrain(args) -> int:
    typed = {}
    if args.datasets:
        typed["paths.dataset"] = ",".join(args.datasets)
    if args.baseline:
        typed["pretrain.baseline"] = args.baseline
    cfg = _resolve(args, typed)

    paths, datasets, task_ids = _load_datasets(cfg)
    out = _out_dir(cfg)
    seed = cfg.i("run.seed")
    baseline = cfg.s("pretrain.baseline")
    if baseline not in ("", "multigame", "bc"):
        raise ConfigError(f"unknown baseline {baseline!r}")

    manifest_path = out / "manifest.txt"
    manifest: dict = {}
    if manifest_path.exists():
        manifest = dict(read_manifest(manifest_path))
    for tid, p in zip(task_ids, paths):
        manifest[f"dataset.{tid}"] = str(Path(p).resolve())

    if baseline == "multigame":
        model, metrics = multigame_offline_rl(datasets, cfg, np.random.default_rng([seed, 1]))
        model.save(out / "multigame.ckpt", extra={"trained_on": ",".join(task_ids)})
        write_metrics(out / "multigame.metrics.jsonl", metrics)
        manifest["multigame"] = "multigame.ckpt"
        write_manifest(manifest_path, manifest)
        print(f"pretrain: multigame baseline over {len(task_ids)} tasks -> multigame.ckpt")
        return EXIT_OK
    if baseline == "bc":
        model, metrics = bc_baseline(datasets, cfg, np.random.default_rng([seed, 2]))
        model.save(out / "bc.ckpt", extra={"trained_on": ",".join(task_ids)})
        write_metrics(out / "bc.metrics.jsonl", metrics)
        manifest["bc"] = "bc.ckpt"
        write_manifest(manifest_path, manifest)
        print(f"pretrain: bc baseline over {len(task_ids)} tasks -> bc.ckpt")
        return EXIT_OK

    teachers = []
    for i, (tid, dataset) in enumerate(zip(task_ids, datasets)):
        ckpt = out / f"teacher_{tid}.ckpt"
        if manifest.get(f"teacher.{tid}") and ckpt.exists():
            teachers.append(_load_model(ckpt))
            print(f"pretrain: teacher for {tid} already complete, skipping")
            continue
        try:
            teacher, metrics = train_teacher(dataset, cfg, np.random.default_rng([seed, 10 + i]))
        except XtraError as e:
            raise type(e)(f"teacher for {tid}: {e}") from e
        teacher.save(ckpt, extra={"task": tid})
        write_metrics(out / f"teacher_{tid}.metrics.jsonl", metrics)
        manifest[f"teacher.{tid}"] = ckpt.name
        write_manifest(manifest_path, manifest)
        teachers.append(teacher)
        print(f"pretrain: teacher for {tid} -> {ckpt.name}")

    student_ckpt = out / "student.ckpt"
    if manifest.get("student") and student_ckpt.exists():
        print("pretrain: student already complete, skipping")
        return EXIT_OK
    student, metrics = distill_student(teachers, datasets, cfg, np.random.default_rng([seed, 3]))
    student.save(student_ckpt, extra={"distilled_from": ",".join(task_ids)})
    write_metrics(out / "student.metrics.jsonl", metrics)
    manifest["student"] = student_ckpt.name
    write_manifest(manifest_path, manifest)
    print(f"pretrain: student distilled from {len(teachers)} teachers -> student.ckpt")
    return EXIT_OK


def _pretrain_assets(cfg: RunConfig):
    """Load student init, teachers, and datasets recorded by cmd_pretrain."""
    pdir = Path(cfg.s("paths.pretrain_dir"))
    manifest = read_manifest(pdir / "manifest.txt")
    init = None
    for key in ("student", "multigame", "bc"):
        if key in manifest:
            init = _load_model(pdir / manifest[key])
            break
    task_ids, datasets, teachers = [], [], []
    if cfg.b("flags.cross_task"):
        for key in sorted(manifest):
            if not key.startswith("teacher."):
                continue
            tid = key.split(".", 1)[1]
            dataset_key = f"dataset.{tid}"
            if dataset_key not in manifest:
                raise DataError(f"pretrain manifest lacks dataset for task {tid}")
            ds_path = Path(manifest[dataset_key])
            if not ds_path.is_absolute():
                ds_path = pdir / ds_path
            if not ds_path.exists():
                raise DataError(f"missing dataset {ds_path}")
            task_ids.append(tid)
            datasets.append(load_dataset(ds_path))
            teachers.append(_load_model(pdir / manifest[key]))
    return init, task_ids, datasets, teachers


def cmd_finetune(args) -> int:
    typed = {}
    if args.pretrain_dir:
        typed["paths.pretrain_dir"] = args.pretrain_dir
    if args.init:
        typed["paths.init_checkpoint"] = args.init
    if args.no_cross_task:
        typed["flags.cross_task"] = False
    if args.no_pretraining:
        typed["flags.load_pretrained"] = False
    if args.no_task_weights:
        typed["flags.dynamic_weights"] = False
    if args.freeze_repr:
        typed["flags.freeze_repr"] = True
    if args.load_components is not None:
        typed["flags.load_components"] = args.load_components
    cfg = _resolve(args, typed)

    target = env_spec(cfg)
    init, task_ids, datasets, teachers = None, [], [], []
    if cfg.s("paths.pretrain_dir"):
        init, task_ids, datasets, teachers = _pretrain_assets(cfg)
    elif cfg.s("paths.init_checkpoint"):
        init = _load_model(cfg.s("paths.init_checkpoint"))

    fin = FinetuneConfig(
        cfg=cfg, target=target, task_ids=task_ids, datasets=datasets,
        teachers=teachers, init=init,
    )
    out = _out_dir(cfg)
    model, metrics = finetune_loop(fin, np.random.default_rng(cfg.i("run.seed")))
    model.save(out / "model.ckpt", extra={"task": target.task_id})
    write_metrics(out / "metrics.jsonl", metrics)
    evals = [m["eval_return"] for m in metrics if "eval_return" in m]
    tail = f", final eval return {evals[-1]:.3f}" if evals else ""
    print(f"finetune: {target.task_id} done, {len(metrics)} records{tail}")
    return EXIT_OK


def cmd_eval(args) -> int:
    typed = {}
    if args.checkpoint:
        typed["paths.init_checkpoint"] = args.checkpoint
    if args.episodes is not None:
        typed["train.eval_episodes"] = args.episodes
    cfg = _resolve(args, typed)
    if not cfg.s("paths.init_checkpoint"):
        raise ConfigError("eval needs a checkpoint (--checkpoint)")
    model = _load_model(cfg.s("paths.init_checkpoint"))
    spec = env_spec(cfg)
    ret = evaluate(
        model, spec, cfg.i("train.eval_episodes"),
        np.random.default_rng(cfg.i("run.seed")), search=search_config(cfg),
    )
    out = _out_dir(cfg)
    write_metrics(
        out / "eval.jsonl",
        [{"task": spec.task_id, "episodes": cfg.i("train.eval_episodes"), "eval_return": ret}],
    )
    print(f"eval: {spec.task_id} mean return {ret:.4f} over {cfg.i('train.eval_episodes')} episodes")
    return EXIT_OK


def _eval_series(records: list[dict]) -> tuple[list[int], list[float]]:
    xs, ys = [], []
    for rec in records:
        if "eval_return" in rec:
            xs.append(int(rec["env_steps"]))
            ys.append(float(rec["eval_return"]))
    return xs, ys


def aggregate_eval_curves(runs: list[list[dict]]) -> list[dict]:
    """Align evaluation points across seed runs by eval index and report
    mean with a 95% confidence band (normal approximation over seeds)."""
    series = [_eval_series(recs) for recs in runs]
    series = [s for s in series if s[0]]
    if not series:
        raise DataError("no evaluation records in the given metrics files")
    n_points = min(len(xs) for xs, _ in series)
    out = []
    for i in range(n_points):
        env = float(np.mean([xs[i] for xs, _ in series]))
        vals = np.array([ys[i] for _, ys in series])
        mean = float(vals.mean())
        if len(vals) > 1:
            half = 1.96 * float(vals.std(ddof=1)) / np.sqrt(len(vals))
        else:
            half = 0.0
        out.append(
            {"env_steps": env, "mean": mean, "lo": mean - half, "hi": mean + half,
             "n": int(len(vals))}
        )
    return out


def aggregate_eta_traces(runs: list[list[dict]]) -> dict[str, list[dict]]:
    """Per-task weight traces, averaged across runs at matching step index."""
    tasks = sorted(
        {k.split(".", 1)[1] for recs in runs for rec in recs for k in rec if k.startswith("eta.")}
    )
    out: dict[str, list[dict]] = {}
    for task in tasks:
        per_run = []
        for recs in runs:
            trace = [
                (int(r["step"]), float(r[f"eta.{task}"])) for r in recs if f"eta.{task}" in r
            ]
            if trace:
                per_run.append(trace)
        if not per_run:
            continue
        n_points = min(len(t) for t in per_run)
        rows = []
        for i in range(n_points):
            rows.append(
                {
                    "step": int(per_run[0][i][0]),
                    "mean": float(np.mean([t[i][1] for t in per_run])),
                }
            )
        out[task] = rows
    return out


def cmd_plot(args) -> int:
    cfg = _resolve(args)
    runs = [read_metrics(p) for p in args.metrics]
    out = _out_dir(cfg)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curve = aggregate_eval_curves(runs)
    write_metrics(out / "return_curve.jsonl", curve)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [row["env_steps"] for row in curve]
    ax.plot(xs, [row["mean"] for row in curve], label=f"mean of {curve[0]['n']} runs")
    ax.fill_between(xs, [row["lo"] for row in curve], [row["hi"] for row in curve], alpha=0.25)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("evaluation return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "return_curve.png", dpi=120)
    plt.close(fig)

    traces = aggregate_eta_traces(runs)
    if traces:
        rows = [
            {"task": task, **row} for task, series in traces.items() for row in series
        ]
        write_metrics(out / "eta_traces.jsonl", rows)
        fig, ax = plt.subplots(figsize=(6, 4))
        for task, series in traces.items():
            ax.step(
                [r["step"] for r in series], [r["mean"] for r in series],
                where="post", label=task,
            )
        ax.set_xlabel("training step")
        ax.set_ylabel("task weight")
        ax.set_ylim(-0.05, 1.05)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "eta_traces.png", dpi=120)
        plt.close(fig)

    print(f"plot: {len(runs)} runs -> {out / 'return_curve.png'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xtra",
        description="Cross-task world-model pretraining and finetuning on toy grid games.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="roll out checkpoints to build an offline dataset")
    _add_common(p)
    p.add_argument("--task", help="task id like maze-3 (sets env.family and env.variant_seed)")
    p.add_argument("--checkpoints", nargs="*", default=[], help="checkpoint files to roll out")
    p.add_argument("--episodes-per-ckpt", type=int, help="episodes per checkpoint")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("pretrain", help="train teachers and distill a student")
    _add_common(p)
    p.add_argument("--datasets", nargs="*", default=[], help="dataset files, one per task")
    p.add_argument(
        "--baseline", choices=("multigame", "bc"),
        help="train a baseline instead of teachers plus student",
    )
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="online finetuning on the target task")
    _add_common(p)
    p.add_argument("--pretrain-dir", help="directory produced by the pretrain command")
    p.add_argument("--init", help="single init checkpoint (no offline tasks)")
    p.add_argument("--no-cross-task", action="store_true", help="drop offline loss terms")
    p.add_argument("--no-pretraining", action="store_true", help="start from random init")
    p.add_argument("--no-task-weights", action="store_true", help="pin all task weights at 1")
    p.add_argument("--freeze-repr", action="store_true", help="freeze the encoder")
    p.add_argument("--load-components", help="comma list from h,g,f to load from the init")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint with search")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint to evaluate")
    p.add_argument("--episodes", type=int, help="episode count")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render curves from metrics files")
    _add_common(p)
    p.add_argument("metrics", nargs="+", help="metrics files from finetune runs")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
