import numpy as np
import pytest

import xtra.cli as cli
from xtra.cli import aggregate_eval_curves, aggregate_eta_traces, main
from xtra.config import resolve_config, spec_for_task_id
from xtra.errors import NumericError
from xtra.model import ModelConfig, WorldModel
from xtra.replay import load_dataset
from xtra.runio import read_manifest, read_metrics, write_metrics

SMALL_SETS = [
    "--set", "model.latent_dim=8",
    "--set", "model.hidden=16",
    "--set", "search.n_sim=8",
    "--set", "targets.unroll_steps=2",
    "--set", "targets.td_steps=3",
    "--set", "train.batch_target=8",
    "--set", "train.batch_offline=8",
    "--set", "pretrain.teacher_steps=12",
    "--set", "pretrain.distill_steps=12",
    "--set", "train.env_steps=80",
    "--set", "replay.min_size=30",
    "--set", "weights.cycle_T=20",
    "--set", "weights.measure_N=5",
    "--set", "train.eval_interval=40",
    "--set", "train.eval_episodes=2",
]


def run_cli(*argv) -> int:
    return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Checkpoints, collected datasets, and a pretrain dir shared by tests."""
    root = tmp_path_factory.mktemp("cli")
    spec = spec_for_task_id(resolve_config(desk=True), "maze-1")
    for i in range(2):
        model = WorldModel(
            ModelConfig(obs_dim=spec.obs_dim, action_count=5, latent_dim=8, hidden=16),
            np.random.default_rng(i),
        )
        model.save(root / f"ckpt{i}.ckpt")
    for variant, seed in ((1, 5), (2, 6)):
        code = run_cli(
            "collect", "--desk", *SMALL_SETS, "--task", f"maze-{variant}",
            "--checkpoints", str(root / "ckpt0.ckpt"), str(root / "ckpt1.ckpt"),
            "--episodes-per-ckpt", "3", "--seed", str(seed),
            "--out", str(root / f"collect{variant}"),
        )
        assert code == 0
    code = run_cli(
        "pretrain", "--desk", *SMALL_SETS,
        "--datasets", str(root / "collect1" / "maze-1.xtrj"), str(root / "collect2" / "maze-2.xtrj"),
        "--seed", "7", "--out", str(root / "pre"),
    )
    assert code == 0
    return root


class TestCollect:
    def test_count_and_manifest(self, workspace):
        data = load_dataset(workspace / "collect1" / "maze-1.xtrj")
        assert len(data) == 6
        manifest = read_manifest(workspace / "collect1" / "manifest.txt")
        assert manifest["task"] == "maze-1"
        assert int(manifest["trajectories"]) == 6

    def test_frozen_config_written(self, workspace):
        assert (workspace / "collect1" / "config.txt").exists()

    def test_empty_checkpoint_list_no_partial_files(self, tmp_path, capsys):
        out = tmp_path / "never"
        code = run_cli("collect", "--desk", "--out", str(out))
        assert code == 2
        assert not out.exists()
        assert "checkpoint" in capsys.readouterr().err

    def test_missing_checkpoint_is_data_error(self, tmp_path):
        code = run_cli(
            "collect", "--desk", "--checkpoints", str(tmp_path / "nope.ckpt"),
            "--out", str(tmp_path / "out"),
        )
        assert code == 3

    def test_deterministic_under_seed(self, workspace, tmp_path):
        args = [
            "collect", "--desk", *SMALL_SETS, "--task", "maze-1",
            "--checkpoints", str(workspace / "ckpt0.ckpt"),
            "--episodes-per-ckpt", "2", "--seed", "11",
        ]
        run_cli(*args, "--out", str(tmp_path / "a"))
        run_cli(*args, "--out", str(tmp_path / "b"))
        a = (tmp_path / "a" / "maze-1.xtrj").read_bytes()
        b = (tmp_path / "b" / "maze-1.xtrj").read_bytes()
        assert a == b

    def test_dimension_mismatch_rejected(self, workspace, tmp_path):
        wrong = WorldModel(
            ModelConfig(obs_dim=10, action_count=5, latent_dim=8, hidden=16),
            np.random.default_rng(0),
        )
        wrong.save(tmp_path / "wrong.ckpt")
        code = run_cli(
            "collect", "--desk", "--task", "maze-1",
            "--checkpoints", str(tmp_path / "wrong.ckpt"),
            "--out", str(tmp_path / "out"),
        )
        assert code == 2


class TestPretrain:
    def test_outputs_per_task_plus_student(self, workspace):
        pre = workspace / "pre"
        assert (pre / "teacher_maze-1.ckpt").exists()
        assert (pre / "teacher_maze-2.ckpt").exists()
        assert (pre / "student.ckpt").exists()
        manifest = read_manifest(pre / "manifest.txt")
        assert manifest["student"] == "student.ckpt"
        assert "dataset.maze-1" in manifest

    def test_rerun_is_idempotent(self, workspace, capsys):
        pre = workspace / "pre"
        before = {
            p.name: p.read_bytes() for p in pre.iterdir() if p.suffix == ".ckpt"
        }
        assert run_cli("pretrain", "--config", str(pre / "config.txt")) == 0
        out = capsys.readouterr().out
        assert out.count("skipping") == 3
        for name, data in before.items():
            assert (pre / name).read_bytes() == data

    def test_resume_trains_only_missing_teachers(self, workspace, tmp_path, capsys):
        out = tmp_path / "resume"
        ds1 = str(workspace / "collect1" / "maze-1.xtrj")
        ds2 = str(workspace / "collect2" / "maze-2.xtrj")
        assert run_cli(
            "pretrain", "--desk", *SMALL_SETS, "--datasets", ds1,
            "--seed", "7", "--out", str(out),
        ) == 0
        first = (out / "teacher_maze-1.ckpt").read_bytes()
        capsys.readouterr()
        assert run_cli(
            "pretrain", "--desk", *SMALL_SETS, "--datasets", ds1, ds2,
            "--seed", "7", "--out", str(out),
        ) == 0
        log = capsys.readouterr().out
        assert "teacher for maze-1 already complete" in log
        assert "teacher for maze-2 -> " in log
        assert (out / "teacher_maze-1.ckpt").read_bytes() == first
        assert (out / "teacher_maze-2.ckpt").exists()

    def test_bc_baseline_checkpoint(self, workspace, tmp_path):
        out = tmp_path / "bc"
        code = run_cli(
            "pretrain", "--desk", *SMALL_SETS,
            "--datasets", str(workspace / "collect1" / "maze-1.xtrj"),
            "--baseline", "bc", "--seed", "2", "--out", str(out),
        )
        assert code == 0
        assert (out / "bc.ckpt").exists()
        assert not (out / "student.ckpt").exists()

    def test_multigame_baseline_checkpoint(self, workspace, tmp_path):
        out = tmp_path / "mg"
        code = run_cli(
            "pretrain", "--desk", *SMALL_SETS,
            "--datasets", str(workspace / "collect1" / "maze-1.xtrj"),
            str(workspace / "collect2" / "maze-2.xtrj"),
            "--baseline", "multigame", "--seed", "2", "--out", str(out),
        )
        assert code == 0
        assert (out / "multigame.ckpt").exists()

    def test_missing_dataset_is_data_error(self, tmp_path):
        code = run_cli(
            "pretrain", "--desk", "--datasets", str(tmp_path / "nope.xtrj"),
            "--out", str(tmp_path / "out"),
        )
        assert code == 3

    def test_no_datasets_is_config_error(self, tmp_path):
        assert run_cli("pretrain", "--desk", "--out", str(tmp_path / "out")) == 2


@pytest.fixture(scope="module")
def runs(workspace, tmp_path_factory):
    root = tmp_path_factory.mktemp("ft")
    common = ["finetune", "--desk", *SMALL_SETS, "--seed", "9"]
    assert run_cli(
        *common, "--pretrain-dir", str(workspace / "pre"), "--out", str(root / "xtra"),
    ) == 0
    assert run_cli(
        *common, "--pretrain-dir", str(workspace / "pre"),
        "--no-pretraining", "--no-cross-task", "--out", str(root / "ablated"),
    ) == 0
    assert run_cli(*common, "--out", str(root / "scratch")) == 0
    return root


class TestFinetune:
    def test_metrics_nonempty_and_monotone(self, runs):
        records = read_metrics(runs / "xtra" / "metrics.jsonl")
        steps = [r["step"] for r in records if "loss" in r]
        assert steps and steps == sorted(steps)

    def test_ablation_flags_reproduce_scratch(self, runs):
        ablated = (runs / "ablated" / "model.ckpt").read_bytes()
        scratch = (runs / "scratch" / "model.ckpt").read_bytes()
        assert ablated == scratch

    def test_same_seed_same_metrics_bytes(self, runs, workspace, tmp_path):
        out = tmp_path / "again"
        assert run_cli(
            "finetune", "--desk", *SMALL_SETS, "--seed", "9",
            "--pretrain-dir", str(workspace / "pre"), "--out", str(out),
        ) == 0
        assert (out / "metrics.jsonl").read_bytes() == (
            runs / "xtra" / "metrics.jsonl"
        ).read_bytes()

    def test_frozen_config_rerun_reproduces_bytes(self, runs, tmp_path):
        frozen = runs / "scratch" / "config.txt"
        before_model = (runs / "scratch" / "model.ckpt").read_bytes()
        before_metrics = (runs / "scratch" / "metrics.jsonl").read_bytes()
        assert run_cli("finetune", "--config", str(frozen)) == 0
        assert (runs / "scratch" / "model.ckpt").read_bytes() == before_model
        assert (runs / "scratch" / "metrics.jsonl").read_bytes() == before_metrics

    def test_task_weights_logged(self, runs):
        records = read_metrics(runs / "xtra" / "metrics.jsonl")
        etas = [r for r in records if "eta.maze-1" in r]
        assert etas
        assert all(0.0 <= r["eta.maze-1"] <= 1.0 for r in etas)

    def test_eval_command(self, runs, tmp_path):
        code = run_cli(
            "eval", "--desk", *SMALL_SETS,
            "--checkpoint", str(runs / "xtra" / "model.ckpt"),
            "--episodes", "2", "--seed", "3", "--out", str(tmp_path / "ev"),
        )
        assert code == 0
        rec = read_metrics(tmp_path / "ev" / "eval.jsonl")
        assert len(rec) == 1 and "eval_return" in rec[0]

    def test_eval_requires_checkpoint(self, tmp_path):
        assert run_cli("eval", "--desk", "--out", str(tmp_path / "ev")) == 2


class TestExitCodes:
    def test_bad_set_key(self, tmp_path):
        assert run_cli(
            "collect", "--desk", "--set", "bogus.key=1", "--out", str(tmp_path / "x")
        ) == 2

    def test_bad_set_format(self, tmp_path):
        assert run_cli(
            "collect", "--desk", "--set", "no-equals", "--out", str(tmp_path / "x")
        ) == 2

    def test_numeric_error_maps_to_4(self, monkeypatch, capsys):
        def boom(args):
            raise NumericError("synthetic divergence")

        monkeypatch.setattr(cli, "cmd_eval", boom)
        assert main(["eval"]) == 4
        assert "numeric error" in capsys.readouterr().err

    def test_xtra_seed_env_override(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("XTRA_SEED", "123")
        out = tmp_path / "env"
        assert run_cli(
            "eval", "--desk", *SMALL_SETS,
            "--checkpoint", str(workspace / "ckpt0.ckpt"),
            "--episodes", "1", "--seed", "9", "--out", str(out),
        ) == 0
        text = (out / "config.txt").read_text()
        assert "run.seed = 123" in text


class TestPlot:
    def _write_eval_file(self, path, returns, env_step_gap=50):
        recs = []
        for i, r in enumerate(returns):
            recs.append({"step": i * 10, "env_steps": (i + 1) * env_step_gap, "eval_return": r})
        write_metrics(path, recs)

    def test_ci_band_math(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        self._write_eval_file(a, [0.0, 1.0])
        self._write_eval_file(b, [1.0, 1.0])
        assert run_cli("plot", str(a), str(b), "--out", str(tmp_path / "plot")) == 0
        curve = read_metrics(tmp_path / "plot" / "return_curve.jsonl")
        assert len(curve) == 2
        half = 1.96 * np.std([0.0, 1.0], ddof=1) / np.sqrt(2)
        assert abs(curve[0]["mean"] - 0.5) <= 1e-12
        assert abs(curve[0]["lo"] - (0.5 - half)) <= 1e-12
        assert abs(curve[0]["hi"] - (0.5 + half)) <= 1e-12
        assert curve[1]["lo"] == curve[1]["hi"] == curve[1]["mean"] == 1.0
        assert (tmp_path / "plot" / "return_curve.png").exists()

    def test_single_file_band_collapses(self, tmp_path):
        a = tmp_path / "a.jsonl"
        self._write_eval_file(a, [0.25, 0.5, 0.75])
        assert run_cli("plot", str(a), "--out", str(tmp_path / "plot")) == 0
        curve = read_metrics(tmp_path / "plot" / "return_curve.jsonl")
        assert all(row["lo"] == row["mean"] == row["hi"] for row in curve)

    def test_eta_traces_emitted(self, tmp_path):
        recs = [
            {"step": s, "env_steps": s, "loss": 1.0, "eta.maze-1": 1.0 if s < 5 else 0.4}
            for s in range(10)
        ]
        recs.append({"step": 10, "env_steps": 10, "eval_return": 0.0})
        path = tmp_path / "m.jsonl"
        write_metrics(path, recs)
        assert run_cli("plot", str(path), "--out", str(tmp_path / "plot")) == 0
        rows = read_metrics(tmp_path / "plot" / "eta_traces.jsonl")
        assert [r["mean"] for r in rows] == [1.0] * 5 + [0.4] * 5
        assert (tmp_path / "plot" / "eta_traces.png").exists()

    def test_malformed_line_reports_line_number(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"step": 0, "eval_return": 1.0}\nnot json\n')
        assert run_cli("plot", str(bad), "--out", str(tmp_path / "plot")) == 3
        err = capsys.readouterr().err
        assert ":2:" in err

    def test_no_eval_records_is_data_error(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_metrics(path, [{"step": 0, "loss": 1.0}])
        assert run_cli("plot", str(path), "--out", str(tmp_path / "plot")) == 3


class TestAggregators:
    def test_eval_alignment_truncates_to_shortest(self):
        runs = [
            [{"step": 0, "env_steps": 10, "eval_return": 1.0},
             {"step": 1, "env_steps": 20, "eval_return": 2.0}],
            [{"step": 0, "env_steps": 12, "eval_return": 3.0}],
        ]
        curve = aggregate_eval_curves(runs)
        assert len(curve) == 1
        assert curve[0]["env_steps"] == 11.0
        assert curve[0]["mean"] == 2.0

    def test_eta_mean_across_runs(self):
        runs = [
            [{"step": 0, "eta.a": 1.0}, {"step": 1, "eta.a": 0.0}],
            [{"step": 0, "eta.a": 0.5}, {"step": 1, "eta.a": 0.5}],
        ]
        traces = aggregate_eta_traces(runs)
        assert [r["mean"] for r in traces["a"]] == [0.75, 0.25]
