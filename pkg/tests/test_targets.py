from fractions import Fraction

import numpy as np
import pytest

from xtra.errors import ConfigError
from xtra.mcts import SearchConfig
from xtra.model import WorldModel, ez_loss
from xtra.replay import ReplayBuffer, Trajectory
from xtra.targets import (
    TargetSpec,
    reanalyze_batch,
    reanalyze_policy,
    teacher_batch,
    teacher_targets,
    value_target,
)
from tests.conftest import tiny_model
from tests.test_replay import make_traj


def exact_return_oracle(rewards, t, k, gamma, bootstrap):
    """Independent n-step return in exact rational arithmetic."""
    g = Fraction(gamma)
    z = Fraction(0)
    L = len(rewards)
    for i in range(k):
        if t + i < L:
            z += g**i * Fraction(float(rewards[t + i]))
    if t + k < L:
        z += g**k * Fraction(float(bootstrap[t + k]))
    return float(z)


class TestValueTarget:
    def test_hand_example(self, rng):
        # rewards [1, 0, 2], gamma 0.5, k=3, bootstrap 4: 1 + 0 + 0.5 + 0.5
        traj = make_traj(rng, length=4)
        traj.rewards = np.array([1.0, 0.0, 2.0, 7.0])
        z = value_target(traj, 0, 3, 0.5, lambda obs: 4.0)
        assert z == 2.0

    def test_zero_rewards_zero_bootstrap(self, rng):
        traj = make_traj(rng, length=6)
        traj.rewards[:] = 0.0
        assert value_target(traj, 1, 3, 0.9, lambda obs: 0.0) == 0.0

    def test_truncation_at_episode_end(self, rng):
        # terminal right after t: only u_t contributes, bootstrap never called
        traj = make_traj(rng, length=3)
        traj.rewards[2] = 1.0

        def boom(obs):
            raise AssertionError("bootstrap touched a post-terminal observation")

        assert value_target(traj, 2, 5, 0.9, boom) == 1.0

    def test_bootstrap_at_last_live_position(self, rng):
        traj = make_traj(rng, length=4)
        traj.rewards[:] = 0.0
        z = value_target(traj, 0, 3, 0.5, lambda obs: 8.0)
        assert z == 0.5**3 * 8.0

    def test_index_bounds(self, rng):
        traj = make_traj(rng, length=3)
        with pytest.raises(IndexError):
            value_target(traj, -1, 3, 0.9, lambda obs: 0.0)
        with pytest.raises(IndexError):
            value_target(traj, 3, 3, 0.9, lambda obs: 0.0)

    def test_matches_exact_rational_oracle(self, rng):
        for _ in range(200):
            L = int(rng.integers(1, 12))
            traj = make_traj(rng, length=L)
            boot = rng.standard_normal(L + 1)
            t = int(rng.integers(0, L))
            k = int(rng.integers(1, 8))
            gamma = float(rng.uniform(0.1, 1.0))
            got = value_target(traj, t, k, gamma, lambda obs, _b=boot, _t=t, _k=k: _b[_t + _k])
            want = exact_return_oracle(traj.rewards, t, k, gamma, boot)
            assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


class TestTargetSpec:
    def test_defaults_validate(self):
        TargetSpec().validate()

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            TargetSpec(discount=0.0).validate()
        with pytest.raises(ConfigError):
            TargetSpec(td_steps=0).validate()
        with pytest.raises(ConfigError):
            TargetSpec(reanalyze_ratio=1.5).validate()
        with pytest.raises(ConfigError):
            TargetSpec(source="oracle").validate()


class TestReanalyzePolicy:
    def test_single_action_is_point_mass(self, rng):
        model = tiny_model(rng, obs_dim=4, actions=1)
        traj = make_traj(rng, length=3, d_obs=4, actions=1)
        cfg = SearchConfig(n_sim=8)
        pi = reanalyze_policy(model, traj, 0, cfg, np.random.default_rng(0))
        assert np.array_equal(pi, np.array([1.0]))

    def test_reproducible_under_fixed_seed(self, rng):
        model = tiny_model(rng, obs_dim=4, actions=3)
        traj = make_traj(rng, length=3, d_obs=4, actions=3)
        cfg = SearchConfig(n_sim=16)
        a = reanalyze_policy(model, traj, 1, cfg, np.random.default_rng(7))
        b = reanalyze_policy(model, traj, 1, cfg, np.random.default_rng(7))
        assert np.array_equal(a, b)


class TestTeacherTargets:
    def test_zero_weight_teacher_gives_uniform_policy(self, rng):
        teacher = tiny_model(rng, obs_dim=4, actions=3)
        teacher.set_flat(np.zeros(teacher.layout.size))
        traj = make_traj(rng, length=4, d_obs=4, actions=3)
        pi, z, u = teacher_targets(teacher, traj, 0, 3, 0.9)
        assert np.allclose(pi, 1.0 / 3.0)
        assert u == traj.rewards[0]

    def test_zero_rewards_reduce_to_teacher_bootstrap(self, rng):
        teacher = tiny_model(rng, obs_dim=4, actions=3)
        traj = make_traj(rng, length=6, d_obs=4, actions=3)
        traj.rewards[:] = 0.0
        k, gamma = 2, 0.8
        _, z, _ = teacher_targets(teacher, traj, 1, k, gamma)
        expected = gamma**k * teacher.value_of(traj.observations[3])
        assert z == pytest.approx(expected, rel=1e-12)

    def test_deterministic(self, rng):
        teacher = tiny_model(rng, obs_dim=4, actions=3)
        traj = make_traj(rng, length=5, d_obs=4, actions=3)
        first = teacher_targets(teacher, traj, 2, 3, 0.9)
        second = teacher_targets(teacher, traj, 2, 3, 0.9)
        assert np.array_equal(first[0], second[0])
        assert first[1] == second[1] and first[2] == second[2]


def fill_buffer(rng, model, n_trajs=4, length=5):
    buf = ReplayBuffer("t0", capacity=1000)
    for _ in range(n_trajs):
        buf.append(make_traj(rng, length=length, d_obs=model.cfg.obs_dim, actions=model.cfg.action_count))
    return buf


class TestBatchBuilders:
    def test_teacher_batch_absorbing_padding(self, rng):
        teacher = tiny_model(rng, obs_dim=4, actions=3)
        traj = make_traj(rng, length=2, d_obs=4, actions=3)
        spec = TargetSpec(td_steps=2, discount=0.9, unroll_steps=3, source="teacher")
        batch = teacher_batch(teacher, [(traj, 1)], np.ones(1), spec, pad_action=0)
        assert batch.actions[0, 0] == traj.actions[1]
        assert np.all(batch.actions[0, 1:] == 0)
        assert batch.target_rewards[0, 0] == traj.rewards[1]
        assert np.all(batch.target_rewards[0, 1:] == 0.0)
        for j in (1, 2, 3):
            assert np.allclose(batch.target_policies[0, j], 1.0 / 3.0)
            assert batch.target_values[0, j] == 0.0
            assert np.array_equal(batch.next_observations[0, j - 1], traj.observations[2])
        assert np.array_equal(batch.next_observations[0, 0], traj.observations[2])

    def test_teacher_batch_matches_pointwise_targets(self, rng):
        teacher = tiny_model(rng, obs_dim=4, actions=3)
        traj = make_traj(rng, length=8, d_obs=4, actions=3)
        spec = TargetSpec(td_steps=3, discount=0.9, unroll_steps=2, source="teacher")
        batch = teacher_batch(teacher, [(traj, 1)], np.ones(1), spec)
        for j in range(3):
            pi, z, _ = teacher_targets(teacher, traj, 1 + j, 3, 0.9)
            assert np.allclose(batch.target_policies[0, j], pi, rtol=0, atol=0)
            assert batch.target_values[0, j] == z

    def test_teacher_batch_bit_deterministic(self, rng):
        teacher = tiny_model(rng, obs_dim=4, actions=3)
        buf = fill_buffer(rng, teacher)
        samples = [buf.transition(i) for i in range(4)]
        spec = TargetSpec(unroll_steps=2, source="teacher")
        a = teacher_batch(teacher, samples, np.ones(4), spec)
        b = teacher_batch(teacher, samples, np.ones(4), spec)
        assert np.array_equal(a.target_policies, b.target_policies)
        assert np.array_equal(a.target_values, b.target_values)

    def test_identical_teacher_student_policy_term_is_entropy(self, rng):
        model = tiny_model(rng, obs_dim=4, actions=3)
        traj = make_traj(rng, length=6, d_obs=4, actions=3)
        spec = TargetSpec(td_steps=2, discount=0.9, unroll_steps=0, source="teacher")
        samples = [(traj, 0), (traj, 2)]
        batch = teacher_batch(model, samples, np.ones(2), spec)
        breakdown, _ = ez_loss(model, batch)
        pi, _ = model.predict(model.represent(batch.observations))
        entropy = float(np.mean(-np.sum(pi * np.log(pi), axis=1)))
        assert breakdown.policy == pytest.approx(entropy, rel=1e-12)

    def test_reanalyze_batch_validates_and_refreshes_priorities(self, rng):
        model = tiny_model(rng, obs_dim=4, actions=3)
        buf = fill_buffer(rng, model)
        search_rng = np.random.default_rng(3)
        idx, weights = buf.sample(4, alpha=0.6, beta=0.4, rng=search_rng)
        samples = [buf.transition(i) for i in idx]
        spec = TargetSpec(td_steps=2, unroll_steps=2)
        cfg = SearchConfig(n_sim=8)
        batch, priorities = reanalyze_batch(
            model, model, samples, weights, spec, cfg, search_rng
        )
        assert batch.observations.shape == (4, 4)
        assert np.allclose(batch.target_policies.sum(axis=2), 1.0)
        assert np.all(priorities >= 1e-6)
        expected = np.abs(
            batch.target_values[:, 0] - model.predict(model.represent(batch.observations))[1]
        ) + 1e-6
        assert np.allclose(priorities, expected, rtol=0, atol=0)

    def test_reanalyze_ratio_zero_reuses_stored_policies(self, rng):
        model = tiny_model(rng, obs_dim=4, actions=3)
        traj = make_traj(rng, length=6, d_obs=4, actions=3)
        spec = TargetSpec(td_steps=2, unroll_steps=1, reanalyze_ratio=0.0)
        cfg = SearchConfig(n_sim=8)
        batch, _ = reanalyze_batch(
            model, model, [(traj, 2)], np.ones(1), spec, cfg, np.random.default_rng(0)
        )
        assert np.array_equal(batch.target_policies[0, 0], traj.search_policies[2])
        assert np.array_equal(batch.target_policies[0, 1], traj.search_policies[3])

    def test_reanalyze_batch_deterministic_given_seed(self, rng):
        model = tiny_model(rng, obs_dim=4, actions=3)
        traj = make_traj(rng, length=6, d_obs=4, actions=3)
        spec = TargetSpec(td_steps=2, unroll_steps=2)
        cfg = SearchConfig(n_sim=8)
        out = [
            reanalyze_batch(
                model, model, [(traj, 1)], np.ones(1), spec, cfg, np.random.default_rng(11)
            )
            for _ in range(2)
        ]
        assert np.array_equal(out[0][0].target_policies, out[1][0].target_policies)
        assert np.array_equal(out[0][1], out[1][1])
