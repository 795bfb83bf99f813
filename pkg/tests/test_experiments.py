"""Experiment harness tests: cell running, asset building, report structure,
and the reduction/identity guarantees each canned experiment advertises.

Budgets here are tiny; these tests exercise plumbing and invariants, not
learning quality.
"""

import numpy as np
import pytest

from xtra.config import resolve_config, spec_for_task_id
from xtra.errors import ConfigError
from xtra.experiments import (
    Cell,
    build_assets,
    clear_pipeline_cache,
    exp_batch_control,
    exp_components,
    exp_relevance_contrast,
    exp_similar_transfer,
    final_etas,
    normalized_return,
    run_cell,
    run_cells,
    save_report,
    seed_checkpoints,
    steps_to_reach,
    _scratch_values,
)
from xtra.runio import read_manifest, read_metrics

MICRO = {
    "env.grid": 4,
    "env.episode_cap": 10,
    "model.latent_dim": 6,
    "model.hidden": 8,
    "search.n_sim": 4,
    "targets.unroll_steps": 2,
    "targets.td_steps": 2,
    "train.env_steps": 50,
    "train.eval_interval": 40,
    "train.eval_episodes": 1,
    "train.batch_target": 4,
    "train.batch_offline": 4,
    "train.self_play_interval": 5,
    "train.target_interval": 10,
    "replay.min_size": 10,
    "replay.capacity": 400,
    "weights.cycle_T": 10,
    "weights.measure_N": 3,
    "pretrain.checkpoints": 2,
    "pretrain.episodes_per_ckpt": 2,
    "pretrain.seed_run_steps": 30,
    "pretrain.teacher_steps": 8,
    "pretrain.distill_steps": 8,
}


@pytest.fixture(scope="module")
def micro_cfg():
    return resolve_config(desk=True).with_overrides(MICRO)


class TestHelpers:
    def test_normalized_return_bounds(self):
        assert normalized_return("maze", -1.0) == 0.0
        assert normalized_return("maze", 3.0) == 1.0
        assert normalized_return("gauntlet", 2.0) == 0.5

    def test_normalized_return_unknown_family(self):
        with pytest.raises(ConfigError, match="family"):
            normalized_return("chess", 0.0)

    def test_steps_to_reach(self):
        curve = [{"env_steps": 10.0, "mean": 0.1}, {"env_steps": 20.0, "mean": 0.4}]
        assert steps_to_reach(curve, 0.3) == 20.0
        assert steps_to_reach(curve, 0.05) == 10.0
        assert steps_to_reach(curve, 0.9) is None

    def test_final_etas_reads_last_record(self):
        metrics = [
            {"step": 0, "eta.maze-1": 1.0},
            {"step": 1, "eta.maze-1": 0.25, "eta.maze-2": 0.5},
            {"step": 2, "eval_return": 1.0},
        ]
        assert final_etas(metrics) == {"maze-1": 0.25, "maze-2": 0.5}
        assert final_etas([{"eval_return": 0.0}]) == {}


class TestSeedCheckpoints:
    def test_count_and_distinctness(self, micro_cfg):
        spec = spec_for_task_id(micro_cfg, "maze-0")
        snaps = seed_checkpoints(spec, micro_cfg, np.random.default_rng(0))
        assert len(snaps) == micro_cfg.i("pretrain.checkpoints")
        sizes = {s.layout.size for s in snaps}
        assert len(sizes) == 1
        assert not np.array_equal(snaps[0].get_flat(), snaps[-1].get_flat())

    def test_bad_budget_rejected(self, micro_cfg):
        spec = spec_for_task_id(micro_cfg, "maze-0")
        bad = micro_cfg.with_overrides({"pretrain.checkpoints": 0})
        with pytest.raises(ConfigError):
            seed_checkpoints(spec, bad, np.random.default_rng(0))


class TestBuildAssets:
    def test_structure(self, micro_cfg):
        specs = [spec_for_task_id(micro_cfg, t) for t in ("maze-1", "maze-2")]
        assets = build_assets(specs, micro_cfg, seed=0)
        assert assets.task_ids == ["maze-1", "maze-2"]
        per_task = micro_cfg.i("pretrain.checkpoints") * micro_cfg.i("pretrain.episodes_per_ckpt")
        assert all(len(d) == per_task for d in assets.datasets)
        assert all(t.layout.size == assets.student.layout.size for t in assets.teachers)

    def test_deterministic(self, micro_cfg):
        specs = [spec_for_task_id(micro_cfg, "maze-1")]
        a = build_assets(specs, micro_cfg, seed=3)
        clear_pipeline_cache()
        b = build_assets(specs, micro_cfg, seed=3)
        assert np.array_equal(a.student.get_flat(), b.student.get_flat())

    def test_pipeline_independent_of_task_position(self, micro_cfg):
        pair = [spec_for_task_id(micro_cfg, t) for t in ("maze-1", "maze-2")]
        a = build_assets(pair, micro_cfg, seed=0)
        clear_pipeline_cache()
        b = build_assets(pair[::-1], micro_cfg, seed=0)
        assert np.array_equal(a.teachers[1].get_flat(), b.teachers[0].get_flat())

    def test_empty_rejected(self, micro_cfg):
        with pytest.raises(ConfigError):
            build_assets([], micro_cfg, seed=0)


class TestRunCells:
    def test_cell_deterministic(self, micro_cfg):
        cell = Cell("a", _scratch_values(micro_cfg), "maze-0", 7)
        r1, r2 = run_cell(cell), run_cell(cell)
        assert np.array_equal(r1.params, r2.params)
        assert r1.metrics == r2.metrics

    def test_order_preserved(self, micro_cfg):
        cells = [
            Cell(f"c{i}", _scratch_values(micro_cfg), "maze-0", i) for i in range(3)
        ]
        results = run_cells(cells, jobs=1)
        assert [r.label for r in results] == ["c0", "c1", "c2"]

    def test_parallel_matches_serial(self, micro_cfg):
        cells = [
            Cell(f"p{s}", _scratch_values(micro_cfg), "maze-0", s) for s in (0, 1)
        ]
        serial = run_cells(cells, jobs=1)
        parallel = run_cells(cells, jobs=2)
        for a, b in zip(serial, parallel):
            assert a.label == b.label
            assert np.array_equal(a.params, b.params)
            assert a.metrics == b.metrics

    def test_bad_jobs(self, micro_cfg):
        with pytest.raises(ConfigError):
            run_cells([], jobs=0)


@pytest.fixture(scope="module")
def similar_report(micro_cfg):
    return exp_similar_transfer(micro_cfg, seeds=(0, 1))


class TestSimilarTransfer:
    def test_record_counts(self, similar_report):
        kinds = [r["record"] for r in similar_report.records]
        assert kinds.count("cell") == 5 * 2 * 2
        assert kinds.count("variant_summary") == 5
        assert kinds.count("summary") == 1

    def test_summary_fields(self, similar_report):
        summary = [r for r in similar_report.records if r["record"] == "summary"][0]
        assert summary["variants"] == 5
        assert 0 <= summary["variants_improved"] <= 5
        assert 0 <= summary["speedup_hits"] <= 5
        assert summary["control_ratio"] > 0

    def test_embeds_config_and_seeds(self, similar_report, micro_cfg):
        assert similar_report.config == micro_cfg.as_dict()
        assert similar_report.seeds == [0, 1]

    def test_curves_labeled(self, similar_report):
        assert len(similar_report.curves) == 20
        assert "maze-0/xtra/s0" in similar_report.curves

    def test_variant_summary_consistency(self, similar_report):
        for rec in similar_report.records:
            if rec["record"] != "variant_summary":
                continue
            assert rec["xtra_beats_scratch"] == (rec["xtra_end"] >= rec["scratch_end"])
            if rec["matched_frac"] is not None:
                assert rec["speedup_hit"] == (rec["matched_frac"] <= 0.7)

    def test_save_report_round_trip(self, similar_report, tmp_path):
        out = save_report(similar_report, tmp_path / "rep")
        assert (out / "config.txt").exists()
        rows = read_metrics(out / "report.jsonl")
        assert len(rows) == len(similar_report.records)
        manifest = read_manifest(out / "manifest.txt")
        assert manifest["experiment"] == "similar_transfer"
        runs = list((out / "runs").glob("*.metrics.jsonl"))
        assert len(runs) == len(similar_report.curves)


@pytest.fixture(scope="module")
def relevance_report(micro_cfg):
    return exp_relevance_contrast(micro_cfg, seeds=(0, 1))


@pytest.fixture(scope="module")
def components_report(micro_cfg):
    return exp_components(micro_cfg, seeds=(0, 1))


@pytest.fixture(scope="module")
def batch_report(micro_cfg):
    return exp_batch_control(micro_cfg, seeds=(0, 1))


class TestRelevanceContrast:
    def test_arms_present(self, relevance_report):
        report = relevance_report
        arms = {r["arm"] for r in report.records if r["record"] == "cell"}
        assert arms == {"same", "cross", "scratch"}

    def test_summary(self, relevance_report):
        summary = [r for r in relevance_report.records if r["record"] == "summary"][0]
        for key in ("scratch_end", "same_end", "cross_end", "same_ge_cross",
                    "cross_within_15", "eta_final_median", "eta_below_half"):
            assert key in summary
        if summary["eta_final_median"] is not None:
            assert 0.0 <= summary["eta_final_median"] <= 1.0

    def test_curve_records_per_arm(self, relevance_report):
        arms = {r["arm"] for r in relevance_report.records if r["record"] == "curve"}
        assert arms == {"same", "cross", "scratch"}


class TestComponents:
    def test_empty_subset_is_scratch(self, components_report):
        summary = [r for r in components_report.records if r["record"] == "summary"][0]
        assert summary["none_matches_scratch"] is True

    def test_arms(self, components_report):
        cells = [r for r in components_report.records if r["record"] == "cell"]
        assert len(cells) == 5 * 2
        arms = {r["arm"] for r in cells}
        assert arms == {"scratch", "none", "h", "hg", "hgf"}

    def test_gain_capture_consistent(self, components_report):
        summary = [r for r in components_report.records if r["record"] == "summary"][0]
        if summary["gain_capture"] is None:
            assert summary["captures_80"] is False
        else:
            assert summary["captures_80"] == (summary["gain_capture"] >= 0.8)


class TestBatchControl:
    def test_repeat_identical(self, batch_report):
        summary = [r for r in batch_report.records if r["record"] == "summary"][0]
        assert summary["repeat_identical"] is True

    def test_summary_noise_fields(self, batch_report):
        summary = [r for r in batch_report.records if r["record"] == "summary"][0]
        assert summary["diff"] >= 0
        assert summary["noise_bound"] >= 0
        assert isinstance(summary["within_noise"], bool)

    def test_curves_have_bands(self, batch_report):
        rows = [r for r in batch_report.records if r["record"] == "curve"]
        assert {r["arm"] for r in rows} == {"batch_x1", "batch_x2"}
        for row in rows:
            assert row["lo"] <= row["mean"] <= row["hi"]
