"""Per-task trajectory storage with prioritized sampling, and the binary
dataset format used to persist offline pretraining data.

Buffers hold whole episodes; transitions are addressed by flat indices that
remain valid until the next eviction (single-writer discipline: the trainer
samples and updates priorities before appending again).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChecksumError,
    TruncatedError,
    UnavailableError,
    ValidationError,
    VersionError,
)

DATASET_MAGIC = b"XTRJ"
DATASET_VERSION = 1
PRIORITY_FLOOR = 1e-6


@dataclass
class Trajectory:
    """One whole episode: L transitions, L+1 stacked observations."""

    task_id: str
    observations: np.ndarray  # [L+1, D]
    actions: np.ndarray  # [L]
    rewards: np.ndarray  # [L]
    search_policies: np.ndarray  # [L, A]
    root_values: np.ndarray  # [L]

    @property
    def length(self) -> int:
        return len(self.actions)

    def validate(self) -> None:
        L = self.length
        if self.observations.ndim != 2 or self.observations.shape[0] != L + 1:
            raise ValidationError(
                f"observations must be [L+1, D], got {self.observations.shape} for L={L}"
            )
        for name in ("rewards", "root_values"):
            arr = getattr(self, name)
            if arr.shape != (L,):
                raise ValidationError(f"{name} must be [L], got {arr.shape}")
        if self.search_policies.ndim != 2 or self.search_policies.shape[0] != L:
            raise ValidationError(
                f"search_policies must be [L, A], got {self.search_policies.shape}"
            )
        sums = self.search_policies.sum(axis=1)
        if L and np.abs(sums - 1.0).max() > 1e-9:
            raise ValidationError("search_policies rows must sum to 1 within 1e-9")
        for name in ("observations", "rewards", "search_policies", "root_values"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValidationError(f"non-finite values in {name}")


class ReplayBuffer:
    """Prioritized transition storage over whole trajectories.

    capacity counts transitions; once exceeded, whole trajectories are evicted
    oldest-first (the newest trajectory is never evicted).
    """

    def __init__(self, task_id: str, capacity: int):
        self.task_id = task_id
        self.capacity = capacity
        self.trajectories: list[Trajectory] = []
        self._pairs: list[tuple[Trajectory, int]] = []
        self.priorities = np.zeros(0, dtype=np.float64)

    @property
    def n_transitions(self) -> int:
        return len(self._pairs)

    def transition(self, index: int) -> tuple[Trajectory, int]:
        return self._pairs[index]

    def append(self, traj: Trajectory, initial_priority: float | None = None) -> None:
        traj.validate()
        if traj.length == 0:
            raise ValidationError("empty trajectory")
        if initial_priority is None:
            initial_priority = (
                float(self.priorities.max()) if self.priorities.size else 1.0
            )
        self.trajectories.append(traj)
        self._pairs.extend((traj, t) for t in range(traj.length))
        self.priorities = np.concatenate(
            [self.priorities, np.full(traj.length, max(initial_priority, PRIORITY_FLOOR))]
        )
        while self.n_transitions > self.capacity and len(self.trajectories) > 1:
            old = self.trajectories.pop(0)
            self._pairs = self._pairs[old.length :]
            self.priorities = self.priorities[old.length :]

    def sample(
        self,
        batch: int,
        alpha: float,
        beta: float,
        rng: np.random.Generator,
        allow_replacement: bool = False,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Indices drawn with P(i) ∝ priority^α and their importance weights
        (N·P)^(−β), normalized so the largest weight in the batch is 1."""
        n = self.n_transitions
        if n == 0:
            raise UnavailableError(f"replay buffer {self.task_id!r} is empty")
        if n < batch and not allow_replacement:
            raise UnavailableError(
                f"replay buffer {self.task_id!r} holds {n} transitions, "
                f"batch of {batch} requested (pass allow_replacement to permit)"
            )
        probs = self.priorities**alpha
        probs /= probs.sum()
        indices = rng.choice(n, size=batch, replace=allow_replacement, p=probs)
        weights = (n * probs[indices]) ** (-beta)
        weights /= weights.max()
        return indices.astype(np.int64), weights

    def update_priorities(self, indices, new_priorities) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            return
        if indices.min() < 0 or indices.max() >= self.n_transitions:
            raise IndexError(
                f"priority index out of range 0..{self.n_transitions - 1}"
            )
        self.priorities[indices] = np.maximum(
            np.asarray(new_priorities, dtype=np.float64), PRIORITY_FLOOR
        )


def beta_at(step: int, total_steps: int, beta_start: float = 0.4, beta_end: float = 1.0) -> float:
    """Linear importance-correction anneal with exact endpoints."""
    if total_steps <= 0 or step >= total_steps:
        return beta_end
    if step <= 0:
        return beta_start
    return beta_start + (beta_end - beta_start) * (step / total_steps)


# -- dataset files --------------------------------------------------------------


def save_dataset(trajectories: list[Trajectory], path) -> None:
    """Byte-stable binary serialization; trailing CRC32 covers everything."""
    if trajectories:
        task_id = trajectories[0].task_id
        a_count = trajectories[0].search_policies.shape[1]
        d_obs = trajectories[0].observations.shape[1]
        for traj in trajectories:
            traj.validate()
            if traj.task_id != task_id:
                raise ValidationError("all trajectories in a dataset share one task_id")
            if traj.search_policies.shape[1] != a_count or traj.observations.shape[1] != d_obs:
                raise ValidationError("mixed action/observation dimensions in dataset")
    else:
        task_id, a_count, d_obs = "", 0, 0

    parts = [DATASET_MAGIC, struct.pack("<I", DATASET_VERSION)]
    raw_id = task_id.encode("utf-8")
    parts.append(struct.pack("<I", len(raw_id)))
    parts.append(raw_id)
    parts.append(struct.pack("<III", a_count, d_obs, len(trajectories)))
    for traj in trajectories:
        parts.append(struct.pack("<I", traj.length))
        for field in (
            traj.observations,
            traj.actions.astype(np.float64),
            traj.rewards,
            traj.search_policies,
            traj.root_values,
        ):
            parts.append(np.ascontiguousarray(field, dtype="<f8").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_dataset(path) -> list[Trajectory]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise TruncatedError(f"{path}: too short to hold a header")
    payload, crc_raw = data[:-4], data[-4:]
    if len(crc_raw) != 4:
        raise TruncatedError(f"{path}: missing checksum")
    if zlib.crc32(payload) != struct.unpack("<I", crc_raw)[0]:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(payload):
            raise TruncatedError(
                f"{path}: needed {n} bytes at offset {pos}, payload has {len(payload)}"
            )
        out = payload[pos : pos + n]
        pos += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    def f64s(count: int, shape: tuple[int, ...]) -> np.ndarray:
        return np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    magic = take(4)
    if magic != DATASET_MAGIC:
        raise VersionError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    version = u32()
    if version != DATASET_VERSION:
        raise VersionError(
            f"{path}: dataset version {version}, this build reads {DATASET_VERSION}"
        )
    task_id = take(u32()).decode("utf-8")
    a_count, d_obs, n_traj = u32(), u32(), u32()
    out = []
    for _ in range(n_traj):
        L = u32()
        traj = Trajectory(
            task_id=task_id,
            observations=f64s((L + 1) * d_obs, (L + 1, d_obs)),
            actions=f64s(L, (L,)).astype(np.int64),
            rewards=f64s(L, (L,)),
            search_policies=f64s(L * a_count, (L, a_count)),
            root_values=f64s(L, (L,)),
        )
        out.append(traj)
    return out
