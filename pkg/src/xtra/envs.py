"""Deterministic-seeded toy task families: a maze family (navigation for
pellets with a lethal hazard) and a gauntlet family (bottom-row agent shooting
descending enemies).

Observations are plane-stacked grids flattened to vectors, with the last
`stack` frames concatenated (zero-padded at episode start). All variants share
a padded action space so one world model can span tasks; action ids beyond a
family's native set act as stay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

FAMILIES = ("maze", "gauntlet")
SHARED_ACTION_COUNT = 5

MAZE_ACTIONS = ("up", "down", "left", "right", "stay")
GAUNTLET_ACTIONS = ("left", "right", "fire", "stay")

_MOVES = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}


@dataclass(frozen=True)
class EnvSpec:
    family: str
    variant_seed: int
    grid: int = 7
    episode_cap: int = 40
    plane_count: int = 3
    stack: int = 2

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.grid < 4:
            raise ConfigError(f"grid must be >= 4, got {self.grid}")
        if self.episode_cap < 1:
            raise ConfigError(f"episode_cap must be >= 1, got {self.episode_cap}")
        if self.plane_count != 3:
            raise ConfigError(f"plane_count is fixed at 3, got {self.plane_count}")
        if self.stack < 1:
            raise ConfigError(f"stack must be >= 1, got {self.stack}")

    @property
    def obs_dim(self) -> int:
        return self.stack * self.plane_count * self.grid * self.grid

    @property
    def native_action_count(self) -> int:
        return len(MAZE_ACTIONS) if self.family == "maze" else len(GAUNTLET_ACTIONS)

    @property
    def task_id(self) -> str:
        return f"{self.family}-{self.variant_seed}"


def family_variants(family: str, count: int, base_seed: int = 0) -> tuple[EnvSpec, ...]:
    return tuple(EnvSpec(family=family, variant_seed=base_seed + i) for i in range(count))


class _GridEnv:
    """Frame stacking and bookkeeping shared by both families."""

    def __init__(self, spec: EnvSpec):
        spec.validate()
        self.spec = spec
        self._frames: list[np.ndarray] = []
        self._steps = 0
        self._done = True

    @property
    def done(self) -> bool:
        return self._done

    def _stacked(self) -> np.ndarray:
        return np.concatenate(self._frames)

    def _begin(self, frame: np.ndarray) -> np.ndarray:
        zero = np.zeros(self.spec.plane_count * self.spec.grid**2)
        self._frames = [zero.copy() for _ in range(self.spec.stack - 1)] + [frame]
        self._steps = 0
        self._done = False
        return self._stacked()

    def _advance(self, frame: np.ndarray, reward: float, done: bool):
        self._frames = self._frames[1:] + [frame]
        self._steps += 1
        if self._steps >= self.spec.episode_cap:
            done = True
        self._done = done
        return self._stacked(), float(np.clip(reward, -1.0, 1.0)), done

    def _check_action(self, action: int) -> int:
        if self._done:
            raise ValueError("episode is over; call reset")
        if not 0 <= action < SHARED_ACTION_COUNT:
            raise ValueError(
                f"action {action} outside shared range 0..{SHARED_ACTION_COUNT - 1}"
            )
        return action


class MazeEnv(_GridEnv):
    """Collect every pellet (+1 each) without touching the hazard (-1,
    terminal). Walls and object placement derive from variant_seed; the agent
    start cell is drawn from the reset rng."""

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        n = spec.grid
        for attempt in range(100):
            layout_rng = np.random.default_rng([spec.variant_seed, 1, attempt])
            walls = layout_rng.random((n, n)) < 0.22
            component = _largest_component(~walls)
            cells = [tuple(c) for c in np.argwhere(component)]
            if len(cells) >= 6:
                order = layout_rng.permutation(len(cells))
                picks = [cells[i] for i in order[:4]]
                self.walls = ~component
                self.pellet_cells = frozenset(picks[:3])
                self.hazard = picks[3]
                self.start_cells = tuple(
                    c for c in cells if c not in self.pellet_cells and c != self.hazard
                )
                if self.start_cells:
                    break
        else:
            raise ConfigError(f"no solvable maze layout for variant_seed {spec.variant_seed}")
        self._agent = (0, 0)
        self._pellets: set = set()

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._agent = self.start_cells[int(rng.integers(len(self.start_cells)))]
        self._pellets = set(self.pellet_cells)
        return self._begin(self._frame())

    def step(self, action: int):
        action = self._check_action(action)
        name = MAZE_ACTIONS[action] if action < len(MAZE_ACTIONS) else "stay"
        r, c = self._agent
        if name != "stay":
            dr, dc = _MOVES[name]
            nr, nc = r + dr, c + dc
            n = self.spec.grid
            if 0 <= nr < n and 0 <= nc < n and not self.walls[nr, nc]:
                r, c = nr, nc
        self._agent = (r, c)
        reward, done = 0.0, False
        if (r, c) == self.hazard:
            reward, done = -1.0, True
        elif (r, c) in self._pellets:
            self._pellets.discard((r, c))
            reward = 1.0
            if not self._pellets:
                done = True
        return self._advance(self._frame(), reward, done)

    def _frame(self) -> np.ndarray:
        n = self.spec.grid
        structure = self.walls.astype(np.float64)
        agent = np.zeros((n, n))
        agent[self._agent] = 1.0
        objects = np.zeros((n, n))
        for cell in self._pellets:
            objects[cell] = 1.0
        objects[self.hazard] = -1.0
        return np.concatenate([structure.ravel(), agent.ravel(), objects.ravel()])


class GauntletEnv(_GridEnv):
    """Shoot every descending enemy (+1 per kill) before any reaches the
    bottom row (-1, terminal). Wave composition and descent speed derive from
    variant_seed; the agent start column is drawn from the reset rng."""

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        n = spec.grid
        layout_rng = np.random.default_rng([spec.variant_seed, 2])
        count = int(layout_rng.integers(3, min(6, n)))
        cols = layout_rng.choice(n, size=count, replace=False)
        rows = layout_rng.integers(0, 2, size=count)
        self.initial_enemies = tuple(sorted((int(r), int(c)) for r, c in zip(rows, cols)))
        self.descent_every = int(layout_rng.integers(2, 4))
        self._enemies: list[tuple[int, int]] = []
        self._agent_col = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._agent_col = int(rng.integers(self.spec.grid))
        self._enemies = list(self.initial_enemies)
        return self._begin(self._frame())

    def step(self, action: int):
        action = self._check_action(action)
        name = GAUNTLET_ACTIONS[action] if action < len(GAUNTLET_ACTIONS) else "stay"
        n = self.spec.grid
        reward = 0.0
        if name == "left":
            self._agent_col = max(0, self._agent_col - 1)
        elif name == "right":
            self._agent_col = min(n - 1, self._agent_col + 1)
        elif name == "fire":
            in_column = [e for e in self._enemies if e[1] == self._agent_col]
            if in_column:
                self._enemies.remove(max(in_column))
                reward += 1.0
        if (self._steps + 1) % self.descent_every == 0:
            self._enemies = [(r + 1, c) for r, c in self._enemies]
        done = False
        if any(r >= n - 1 for r, _ in self._enemies):
            reward -= 1.0
            done = True
        elif not self._enemies:
            done = True
        return self._advance(self._frame(), reward, done)

    def _frame(self) -> np.ndarray:
        n = self.spec.grid
        structure = np.zeros((n, n))
        structure[n - 1, :] = 1.0
        agent = np.zeros((n, n))
        agent[n - 1, self._agent_col] = 1.0
        objects = np.zeros((n, n))
        for r, c in self._enemies:
            objects[min(r, n - 1), c] = 1.0
        return np.concatenate([structure.ravel(), agent.ravel(), objects.ravel()])


def _largest_component(free: np.ndarray) -> np.ndarray:
    """Boolean mask of the largest 4-connected component of free cells."""
    n = free.shape[0]
    seen = np.zeros_like(free, dtype=bool)
    best: list[tuple[int, int]] = []
    for r in range(n):
        for c in range(n):
            if not free[r, c] or seen[r, c]:
                continue
            stack, comp = [(r, c)], []
            seen[r, c] = True
            while stack:
                cr, cc = stack.pop()
                comp.append((cr, cc))
                for dr, dc in _MOVES.values():
                    nr, nc = cr + dr, cc + dc
                    if 0 <= nr < n and 0 <= nc < n and free[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
            if len(comp) > len(best):
                best = comp
    mask = np.zeros_like(free, dtype=bool)
    for cell in best:
        mask[cell] = True
    return mask


def make_env(spec: EnvSpec) -> _GridEnv:
    spec.validate()
    return MazeEnv(spec) if spec.family == "maze" else GauntletEnv(spec)
