from __future__ import annotations

import numpy as np
import pytest

from xtra.model import ModelConfig, UnrollBatch, WorldModel


def finite_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle, independent of the tape code."""
    g = np.zeros(x.size, dtype=np.float64)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-based relative error, floored so near-zero gradients compare absolutely."""
    denom = max(1.0, float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return float(np.linalg.norm(a - b)) / denom


def tiny_model(rng: np.random.Generator, obs_dim=6, actions=3, latent=4, hidden=5) -> WorldModel:
    cfg = ModelConfig(obs_dim=obs_dim, action_count=actions, latent_dim=latent, hidden=hidden)
    return WorldModel(cfg, rng)


def random_batch(model: WorldModel, batch: int, k_steps: int, rng: np.random.Generator) -> UnrollBatch:
    cfg = model.cfg
    pis = rng.random((batch, k_steps + 1, cfg.action_count)) + 0.1
    pis /= pis.sum(axis=2, keepdims=True)
    return UnrollBatch(
        observations=rng.standard_normal((batch, cfg.obs_dim)),
        actions=rng.integers(0, cfg.action_count, size=(batch, k_steps)),
        target_rewards=rng.standard_normal((batch, k_steps)) * 0.5,
        target_policies=pis,
        target_values=rng.standard_normal((batch, k_steps + 1)),
        next_observations=rng.standard_normal((batch, k_steps, cfg.obs_dim)),
        importance_weights=rng.random(batch) * 0.9 + 0.1,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
