"""Flat key=value run configuration.

Every tunable lives in one flat namespace with section prefixes so ablation
diffs are one line. Defaults follow the reference hyperparameter table where a
value is stated there; budget-style keys default to full-scale values, and
`desk_overrides` shrinks them to laptop-size runs. Unknown keys are rejected
so typos fail loudly.
"""

from __future__ import annotations

import os

from .envs import EnvSpec
from .errors import ConfigError
from .mcts import SearchConfig
from .model import LossCoeffs, ModelConfig
from .runio import read_manifest, write_manifest
from .targets import TargetSpec

DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "run.out_dir": "runs",
    # target (or collection) task
    "env.family": "maze",
    "env.variant_seed": 0,
    "env.grid": 7,
    "env.episode_cap": 40,
    "env.stack": 2,
    # network sizes
    "model.latent_dim": 32,
    "model.hidden": 64,
    # loss coefficients (lambda1..lambda3)
    "loss.policy_coeff": 1.0,
    "loss.value_coeff": 0.25,
    "loss.consistency_coeff": 2.0,
    # SGD with momentum, linear lr decay
    "optim.lr_start": 0.2,
    "optim.lr_end": 0.02,
    "optim.momentum": 0.9,
    "optim.weight_decay": 0.0001,
    "optim.max_grad_norm": 5.0,
    # prioritized replay
    "replay.capacity": 100000,
    "replay.alpha": 0.6,
    "replay.beta_start": 0.4,
    "replay.beta_end": 1.0,
    "replay.min_size": 2000,
    # training targets
    "targets.discount": 0.997**4,
    "targets.td_steps": 5,
    "targets.unroll_steps": 5,
    "targets.reanalyze_ratio": 1.0,
    # tree search
    "search.n_sim": 50,
    "search.c1": 1.25,
    "search.c2": 19652.0,
    "search.noise_ratio": 0.3,
    "search.dirichlet_alpha": 0.3,
    "search.temp_mid_at": 0.5,
    "search.temp_late_at": 0.75,
    # online training loop
    "train.env_steps": 100000,
    "train.batch_target": 256,
    "train.batch_offline": 256,
    "train.self_play_interval": 100,
    "train.target_interval": 200,
    "train.eval_episodes": 32,
    "train.eval_interval": 10000,
    "train.extra_gradient_steps": 0,
    "train.extra_lr_scale": 0.1,
    # dynamic task reweighting
    "weights.cycle_T": 500,
    "weights.measure_N": 50,
    "weights.warmup_frac": 0.1,
    "weights.threshold": 0.1,
    # offline stage budgets
    "pretrain.checkpoints": 12,
    "pretrain.episodes_per_ckpt": 64,
    "pretrain.seed_run_steps": 2000,
    "pretrain.teacher_steps": 5000,
    "pretrain.distill_steps": 10000,
    "pretrain.baseline": "",
    # ablation switches
    "flags.cross_task": True,
    "flags.load_pretrained": True,
    "flags.dynamic_weights": True,
    "flags.freeze_repr": False,
    "flags.load_components": "h,g,f",
    # file inputs recorded so a frozen config replays the run
    "paths.pretrain_dir": "",
    "paths.dataset": "",
    "paths.checkpoints": "",
    "paths.init_checkpoint": "",
}

def desk_overrides() -> dict[str, object]:
    """Budget shrink for single-core experiment grids.

    Small boards keep reward contact frequent enough that search targets carry
    signal at these step counts; the lr/temperature settings match that scale.
    """
    return {
        "env.grid": 4,
        "env.episode_cap": 20,
        "optim.lr_start": 0.1,
        "replay.capacity": 5000,
        "replay.min_size": 64,
        "search.n_sim": 16,
        "search.temp_mid_at": 0.7,
        "search.temp_late_at": 0.9,
        "train.env_steps": 1500,
        "train.batch_target": 16,
        "train.batch_offline": 16,
        "train.eval_episodes": 8,
        "train.eval_interval": 250,
        "train.self_play_interval": 10,
        "train.target_interval": 50,
        "weights.cycle_T": 100,
        "weights.measure_N": 25,
        "pretrain.checkpoints": 3,
        "pretrain.episodes_per_ckpt": 8,
        "pretrain.seed_run_steps": 3000,
        "pretrain.teacher_steps": 1200,
        "pretrain.distill_steps": 2000,
    }


class RunConfig:
    """Resolved, type-checked view over the flat key space."""

    def __init__(self, values: dict[str, object]):
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = dict(DEFAULTS)
        merged.update(values)
        for key, value in merged.items():
            want = type(DEFAULTS[key])
            if type(value) is not want:
                raise ConfigError(
                    f"{key} must be {want.__name__}, got {type(value).__name__} ({value!r})"
                )
        self._values = merged

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def _typed(self, key: str, want: type):
        value = self[key]
        if type(value) is not want:
            raise ConfigError(f"{key} holds {type(value).__name__}, asked for {want.__name__}")
        return value

    def i(self, key: str) -> int:
        return self._typed(key, int)

    def f(self, key: str) -> float:
        return self._typed(key, float)

    def s(self, key: str) -> str:
        return self._typed(key, str)

    def b(self, key: str) -> bool:
        return self._typed(key, bool)

    def as_dict(self) -> dict[str, object]:
        return dict(self._values)

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        merged = self.as_dict()
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
        return RunConfig(merged)


def parse_value(key: str, text: str):
    """Parse a textual override using the default value's type."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    want = type(DEFAULTS[key])
    text = text.strip()
    if want is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {text!r}")
    try:
        if want is int:
            return int(text)
        if want is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key} expects {want.__name__}, got {text!r}") from exc
    return text


def resolve_config(
    overrides: dict[str, str] | None = None,
    desk: bool = False,
    typed_overrides: dict[str, object] | None = None,
) -> RunConfig:
    """Defaults, then the desk preset, then explicit overrides, then the
    XTRA_SEED environment variable."""
    values: dict[str, object] = {}
    if desk:
        values.update(desk_overrides())
    if typed_overrides:
        values.update(typed_overrides)
    for key, text in (overrides or {}).items():
        values[key] = parse_value(key, text)
    env_seed = os.environ.get("XTRA_SEED")
    if env_seed is not None:
        try:
            values["run.seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"XTRA_SEED must be an integer, got {env_seed!r}") from exc
    return RunConfig(values)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_config(cfg: RunConfig, path) -> None:
    write_manifest(path, {k: _format_value(v) for k, v in cfg.as_dict().items()})


def load_config(path) -> RunConfig:
    raw = read_manifest(path)
    return RunConfig({k: parse_value(k, v) for k, v in raw.items()})


# -- typed views consumed by the rest of the package -----------------------------


def env_spec(cfg: RunConfig) -> EnvSpec:
    spec = EnvSpec(
        family=cfg.s("env.family"),
        variant_seed=cfg.i("env.variant_seed"),
        grid=cfg.i("env.grid"),
        episode_cap=cfg.i("env.episode_cap"),
        stack=cfg.i("env.stack"),
    )
    spec.validate()
    return spec


def spec_for_task_id(cfg: RunConfig, task_id: str) -> EnvSpec:
    """Rebuild a task's spec from its 'family-variant' id using the run's
    shared grid settings."""
    family, _, variant = task_id.rpartition("-")
    if not family or not variant.lstrip("-").isdigit():
        raise ConfigError(f"malformed task id {task_id!r}, expected family-variant")
    spec = EnvSpec(
        family=family,
        variant_seed=int(variant),
        grid=cfg.i("env.grid"),
        episode_cap=cfg.i("env.episode_cap"),
        stack=cfg.i("env.stack"),
    )
    spec.validate()
    return spec


def model_config(cfg: RunConfig, obs_dim: int, action_count: int) -> ModelConfig:
    return ModelConfig(
        obs_dim=obs_dim,
        action_count=action_count,
        latent_dim=cfg.i("model.latent_dim"),
        hidden=cfg.i("model.hidden"),
    )


def loss_coeffs(cfg: RunConfig) -> LossCoeffs:
    return LossCoeffs(
        policy=cfg.f("loss.policy_coeff"),
        value=cfg.f("loss.value_coeff"),
        consistency=cfg.f("loss.consistency_coeff"),
    )


def target_spec(cfg: RunConfig, source: str = "reanalyze") -> TargetSpec:
    spec = TargetSpec(
        td_steps=cfg.i("targets.td_steps"),
        discount=cfg.f("targets.discount"),
        unroll_steps=cfg.i("targets.unroll_steps"),
        reanalyze_ratio=cfg.f("targets.reanalyze_ratio"),
        source=source,
    )
    spec.validate()
    return spec


def search_config(cfg: RunConfig, temperature: float = 1.0, add_noise: bool = True) -> SearchConfig:
    return SearchConfig(
        n_sim=cfg.i("search.n_sim"),
        discount=cfg.f("targets.discount"),
        c1=cfg.f("search.c1"),
        c2=cfg.f("search.c2"),
        noise_ratio=cfg.f("search.noise_ratio"),
        dirichlet_alpha=cfg.f("search.dirichlet_alpha"),
        temperature=temperature,
        add_noise=add_noise,
    )
