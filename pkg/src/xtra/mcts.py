"""Monte Carlo tree search in latent space.

Selection by pUCT with min-max value normalization, expansion through the
model's dynamics/prediction heads, discounted value backup, Dirichlet noise at
the root, and visit-count policy extraction.

`run_searches` advances a batch of independent trees in lockstep so network
evaluations batch across trees; a single search is a batch of one, so results
are identical either way. Ties break toward the lowest action id everywhere,
which makes searches exactly reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class SearchConfig:
    n_sim: int = 50
    discount: float = 0.997**4
    c1: float = 1.25
    c2: float = 19652.0
    noise_ratio: float = 0.3
    dirichlet_alpha: float = 0.3
    temperature: float = 1.0
    add_noise: bool = True

    def for_eval(self) -> "SearchConfig":
        """Noise-free, temperature-0 variant used by evaluation."""
        return replace(self, add_noise=False, temperature=0.0)


@dataclass
class SearchResult:
    policy_target: np.ndarray
    root_value: float
    chosen_action: int


class MinMaxStats:
    __slots__ = ("min_seen", "max_seen")

    def __init__(self):
        self.min_seen = math.inf
        self.max_seen = -math.inf

    def update(self, value: float) -> None:
        if value < self.min_seen:
            self.min_seen = value
        if value > self.max_seen:
            self.max_seen = value

    def normalize(self, value: float) -> float:
        if self.max_seen > self.min_seen:
            return (value - self.min_seen) / (self.max_seen - self.min_seen)
        return 0.5


class SearchNode:
    __slots__ = ("prior", "visit_count", "value_sum", "reward", "latent", "children")

    def __init__(self, prior: float):
        self.prior = prior
        self.visit_count = 0
        self.value_sum = 0.0
        self.reward = 0.0
        self.latent: np.ndarray | None = None
        self.children: dict[int, "SearchNode"] = {}

    @property
    def expanded(self) -> bool:
        return bool(self.children)

    @property
    def mean_value(self) -> float:
        if self.visit_count == 0:
            return 0.0
        return self.value_sum / self.visit_count


def puct_score(
    child: SearchNode,
    parent_visits: int,
    stats: MinMaxStats,
    c1: float,
    c2: float,
    discount: float,
) -> float:
    """normalized(Q) + prior · √parent/(1+child) · (c1 + log((parent+c2+1)/c2))."""
    explore = (
        child.prior
        * math.sqrt(parent_visits)
        / (1 + child.visit_count)
        * (c1 + math.log((parent_visits + c2 + 1.0) / c2))
    )
    if child.visit_count > 0:
        q_term = stats.normalize(child.reward + discount * child.mean_value)
    else:
        q_term = 0.5  # neutral midpoint; equals normalize() under degenerate stats
    return q_term + explore


def backup(
    path: list[SearchNode], leaf_value: float, discount: float, stats: MinMaxStats
) -> None:
    """Propagate the leaf value to the root: G = reward + discount·G below."""
    g = leaf_value
    for node in reversed(path):
        node.value_sum += g
        node.visit_count += 1
        stats.update(g)
        g = node.reward + discount * g


def _select_child(
    node: SearchNode, stats: MinMaxStats, cfg: SearchConfig
) -> tuple[int, SearchNode]:
    parent_visits = max(1, node.visit_count)
    best_action = -1
    best_score = -math.inf
    for action in sorted(node.children):
        score = puct_score(
            node.children[action], parent_visits, stats, cfg.c1, cfg.c2, cfg.discount
        )
        if score > best_score:
            best_score = score
            best_action = action
    return best_action, node.children[best_action]


def _expand(node: SearchNode, latent: np.ndarray, reward: float, policy: np.ndarray) -> None:
    node.latent = latent
    node.reward = reward
    node.children = {a: SearchNode(float(policy[a])) for a in range(len(policy))}


def _policy_from_visits(visits: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0.0:
        out = np.zeros(len(visits))
        out[int(np.argmax(visits))] = 1.0  # argmax takes the lowest index on ties
        return out
    logw = np.where(visits > 0, np.log(np.maximum(visits, 1e-300)) / temperature, -np.inf)
    if not np.isfinite(logw).any():
        return np.full(len(visits), 1.0 / len(visits))
    w = np.exp(logw - logw[np.isfinite(logw)].max())
    return w / w.sum()


def run_searches(
    model, obs_batch: np.ndarray, cfg: SearchConfig, rng: np.random.Generator
) -> list[SearchResult]:
    """Run independent searches on a batch of root observations.

    Trees advance in lockstep so dynamics/prediction evaluations batch across
    trees; per-tree outcomes match running each search alone with the same
    noise draws.
    """
    obs_batch = np.atleast_2d(np.asarray(obs_batch, dtype=np.float64))
    m = obs_batch.shape[0]
    latents = model.represent(obs_batch)
    policies, _ = model.predict(latents)

    roots = []
    stats_all = []
    for i in range(m):
        prior = policies[i]
        if cfg.add_noise and cfg.noise_ratio > 0.0:
            noise = rng.dirichlet(np.full(len(prior), cfg.dirichlet_alpha))
            prior = (1.0 - cfg.noise_ratio) * prior + cfg.noise_ratio * noise
        root = SearchNode(1.0)
        _expand(root, latents[i], 0.0, prior)
        roots.append(root)
        stats_all.append(MinMaxStats())

    z_dim = latents.shape[1]
    for _ in range(cfg.n_sim):
        paths: list[list[SearchNode]] = []
        parent_latents = np.empty((m, z_dim))
        actions = np.empty(m, dtype=np.int64)
        for i in range(m):
            node = roots[i]
            path = [node]
            action = -1
            while node.expanded:
                action, node = _select_child(node, stats_all[i], cfg)
                path.append(node)
            paths.append(path)
            parent_latents[i] = path[-2].latent
            actions[i] = action
        next_latents, rewards = model.dynamics(parent_latents, actions)
        leaf_policies, leaf_values = model.predict(next_latents)
        for i in range(m):
            _expand(paths[i][-1], next_latents[i], float(rewards[i]), leaf_policies[i])
            backup(paths[i], float(leaf_values[i]), cfg.discount, stats_all[i])

    results = []
    for i in range(m):
        root = roots[i]
        visits = np.array(
            [root.children[a].visit_count for a in range(len(root.children))],
            dtype=np.float64,
        )
        results.append(
            SearchResult(
                policy_target=_policy_from_visits(visits, cfg.temperature),
                root_value=root.mean_value,
                chosen_action=int(np.argmax(visits)),
            )
        )
    return results


def run_search(
    model, root_obs: np.ndarray, cfg: SearchConfig, rng: np.random.Generator
) -> SearchResult:
    return run_searches(model, np.asarray(root_obs)[None, :], cfg, rng)[0]


def temperature_at(
    progress: float,
    early: float = 1.0,
    mid: float = 0.5,
    late: float = 0.25,
    mid_at: float = 0.5,
    late_at: float = 0.75,
) -> float:
    """Visit-count temperature as a function of training progress in [0, 1]."""
    if progress < mid_at:
        return early
    if progress < late_at:
        return mid
    return late
