"""Training-target computation: n-step returns, fresh-search policy targets,
teacher distillation targets, and the builders that assemble unroll batches
from sampled transitions.

Positions past the end of an episode are absorbing: reward 0, value 0,
uniform policy, final observation repeated, pad action applied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .mcts import SearchConfig, run_searches
from .model import UnrollBatch, WorldModel
from .replay import Trajectory

TARGET_SOURCES = ("reanalyze", "teacher")


@dataclass(frozen=True)
class TargetSpec:
    td_steps: int = 5
    discount: float = 0.997**4
    unroll_steps: int = 5
    reanalyze_ratio: float = 1.0
    source: str = "reanalyze"

    def validate(self) -> None:
        if not 0.0 < self.discount <= 1.0:
            raise ConfigError(f"discount must be in (0, 1], got {self.discount}")
        if self.td_steps < 1:
            raise ConfigError(f"td_steps must be >= 1, got {self.td_steps}")
        if self.unroll_steps < 0:
            raise ConfigError(f"unroll_steps must be >= 0, got {self.unroll_steps}")
        if not 0.0 <= self.reanalyze_ratio <= 1.0:
            raise ConfigError(f"reanalyze_ratio must be in [0, 1], got {self.reanalyze_ratio}")
        if self.source not in TARGET_SOURCES:
            raise ConfigError(f"unknown target source {self.source!r}")


def value_target(
    traj: Trajectory,
    t: int,
    td_steps: int,
    discount: float,
    bootstrap_value_fn: Callable[[np.ndarray], float],
) -> float:
    """n-step return z_t = sum_i gamma^i u_{t+i} + gamma^k v(s_{t+k}).

    The reward sum truncates at episode end and the bootstrap is 0 at or past
    the terminal state, so post-terminal observations are never touched.
    """
    L = traj.length
    if not 0 <= t < L:
        raise IndexError(f"t={t} outside trajectory of length {L}")
    z = 0.0
    for i in range(min(td_steps, L - t)):
        z += (discount**i) * float(traj.rewards[t + i])
    if t + td_steps < L:
        z += (discount**td_steps) * float(bootstrap_value_fn(traj.observations[t + td_steps]))
    return z


def reanalyze_policy(
    model: WorldModel,
    traj: Trajectory,
    t: int,
    search_cfg: SearchConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Fresh search at a stored observation; the visit distribution replaces
    the stale policy recorded at collection time."""
    return run_searches(model, [traj.observations[t]], search_cfg, rng)[0].policy_target


def teacher_targets(
    teacher: WorldModel,
    traj: Trajectory,
    t: int,
    td_steps: int,
    discount: float,
) -> tuple[np.ndarray, float, float]:
    """(policy, value, reward) targets read off a frozen teacher."""
    policy, _ = teacher.predict(teacher.represent(traj.observations[t]))
    z = value_target(traj, t, td_steps, discount, teacher.value_of)
    return policy, z, float(traj.rewards[t])


def _batch_frame(
    samples: list[tuple[Trajectory, int]],
    unroll_steps: int,
    action_count: int,
    pad_action: int,
) -> dict[str, np.ndarray]:
    """Observations, actions, rewards, and next observations common to both
    target sources, with absorbing padding past episode end."""
    B, K = len(samples), unroll_steps
    d_obs = samples[0][0].observations.shape[1]
    frame = {
        "observations": np.zeros((B, d_obs)),
        "actions": np.full((B, K), pad_action, dtype=np.int64),
        "target_rewards": np.zeros((B, K)),
        "next_observations": np.zeros((B, K, d_obs)),
    }
    for i, (traj, t) in enumerate(samples):
        L = traj.length
        frame["observations"][i] = traj.observations[t]
        for j in range(K):
            pos = t + j
            if pos < L:
                frame["actions"][i, j] = traj.actions[pos]
                frame["target_rewards"][i, j] = traj.rewards[pos]
            frame["next_observations"][i, j] = traj.observations[min(pos + 1, L)]
    return frame


def reanalyze_batch(
    model: WorldModel,
    value_model: WorldModel,
    samples: list[tuple[Trajectory, int]],
    weights: np.ndarray,
    tspec: TargetSpec,
    search_cfg: SearchConfig,
    rng: np.random.Generator,
    pad_action: int = 0,
) -> tuple[UnrollBatch, np.ndarray]:
    """Unroll batch with policy targets from fresh searches under `model` and
    value targets bootstrapped through `value_model` (the lagged copy).

    Returns the batch and refreshed priorities |z_0 - v(s_0)| for the sampled
    root transitions.
    """
    tspec.validate()
    B, K = len(samples), tspec.unroll_steps
    A = model.cfg.action_count
    frame = _batch_frame(samples, K, A, pad_action)
    policies = np.full((B, K + 1, A), 1.0 / A)
    values = np.zeros((B, K + 1))

    fresh = rng.random(B) < tspec.reanalyze_ratio
    live = [
        (i, j) for i, (traj, t) in enumerate(samples) for j in range(K + 1) if t + j < traj.length
    ]
    searched = [(i, j) for i, j in live if fresh[i]]
    if searched:
        roots = [samples[i][0].observations[samples[i][1] + j] for i, j in searched]
        results = run_searches(model, roots, search_cfg, rng)
        for (i, j), res in zip(searched, results):
            policies[i, j] = res.policy_target
    for i, j in live:
        traj, t = samples[i]
        if not fresh[i]:
            policies[i, j] = traj.search_policies[t + j]
        values[i, j] = value_target(
            traj, t + j, tspec.td_steps, tspec.discount, value_model.value_of
        )

    batch = UnrollBatch(
        observations=frame["observations"],
        actions=frame["actions"],
        target_rewards=frame["target_rewards"],
        target_policies=policies,
        target_values=values,
        next_observations=frame["next_observations"],
        importance_weights=np.asarray(weights, dtype=np.float64),
    )
    batch.validate()
    _, root_predicted = model.predict(model.represent(frame["observations"]))
    new_priorities = np.abs(values[:, 0] - root_predicted) + 1e-6
    return batch, new_priorities


def teacher_batch(
    teacher: WorldModel,
    samples: list[tuple[Trajectory, int]],
    weights: np.ndarray,
    tspec: TargetSpec,
    pad_action: int = 0,
) -> UnrollBatch:
    """Unroll batch whose policy and bootstrap values come from a frozen
    teacher; used for distillation and for offline task batches."""
    tspec.validate()
    B, K = len(samples), tspec.unroll_steps
    A = teacher.cfg.action_count
    frame = _batch_frame(samples, K, A, pad_action)
    policies = np.full((B, K + 1, A), 1.0 / A)
    values = np.zeros((B, K + 1))

    live = [
        (i, j) for i, (traj, t) in enumerate(samples) for j in range(K + 1) if t + j < traj.length
    ]
    if live:
        obs = np.stack([samples[i][0].observations[samples[i][1] + j] for i, j in live])
        teacher_pi, _ = teacher.predict(teacher.represent(obs))
        for row, (i, j) in enumerate(live):
            traj, t = samples[i]
            policies[i, j] = teacher_pi[row]
            values[i, j] = value_target(
                traj, t + j, tspec.td_steps, tspec.discount, teacher.value_of
            )

    batch = UnrollBatch(
        observations=frame["observations"],
        actions=frame["actions"],
        target_rewards=frame["target_rewards"],
        target_policies=policies,
        target_values=values,
        next_observations=frame["next_observations"],
        importance_weights=np.asarray(weights, dtype=np.float64),
    )
    batch.validate()
    return batch
