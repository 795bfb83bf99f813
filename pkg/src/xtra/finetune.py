"""Online finetuning on a target task with concurrent offline cross-task terms.

The training loop alternates self-play on the target environment with
gradient steps on a combined loss: the target-task term always has weight 1,
and each offline task contributes with a weight that is re-estimated on a
fixed cycle from the cosine similarity between its loss gradient and the
target-task loss gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import (
    RunConfig,
    loss_coeffs,
    model_config,
    search_config,
    target_spec,
)
from .envs import SHARED_ACTION_COUNT, EnvSpec, make_env
from .errors import ConfigError, NumericError, ValidationError
from .mcts import SearchConfig, run_search, temperature_at
from .model import (
    COMPONENTS,
    LossBreakdown,
    WorldModel,
    component_of,
    ez_loss,
)
from .nets import lr_schedule
from .pretrain import _SgdState, batch_shares, play_episode
from .replay import ReplayBuffer, Trajectory, beta_at
from .targets import reanalyze_batch, teacher_batch


def gradient_similarity(g_target: np.ndarray, g_task: np.ndarray) -> float:
    """Cosine similarity between two flat gradients; 0 if either is all zero."""
    if g_target.shape != g_task.shape:
        raise ConfigError(
            f"gradient layouts differ: {g_target.shape} vs {g_task.shape}"
        )
    na = float(np.linalg.norm(g_target))
    nb = float(np.linalg.norm(g_task))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(g_target, g_task) / (na * nb))


@dataclass
class TaskWeightState:
    """Per-task weight schedule driven by gradient-similarity counts.

    Training steps are grouped into cycles of `cycle_steps`. During the first
    `measure_steps` of each cycle the counter s_i gains 1 whenever task i's
    similarity exceeds `threshold`; when the window closes, eta_i becomes
    s_i / measure_steps and stays fixed until the next window closes. All
    weights are 1 during the initial `warmup_steps` and until the first
    window has completed.

    `etas_cyclestart` tracks the alternative timing where a freshly measured
    weight is only applied at the start of the next cycle; it is logged for
    comparison and never drives training.
    """

    task_count: int
    cycle_steps: int
    measure_steps: int
    warmup_steps: int
    threshold: float = 0.1
    step: int = 0
    counts: np.ndarray = field(init=False)
    etas: np.ndarray = field(init=False)
    etas_cyclestart: np.ndarray = field(init=False)
    _pending: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.task_count < 0:
            raise ConfigError(f"task_count must be >= 0, got {self.task_count}")
        if self.cycle_steps < 1:
            raise ConfigError(f"cycle_steps must be >= 1, got {self.cycle_steps}")
        if not 1 <= self.measure_steps <= self.cycle_steps:
            raise ConfigError(
                f"measure_steps must be in [1, cycle_steps], got {self.measure_steps}"
            )
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        self.counts = np.zeros(self.task_count, dtype=np.int64)
        self.etas = np.ones(self.task_count)
        self.etas_cyclestart = np.ones(self.task_count)
        self._pending = np.ones(self.task_count)

    @property
    def cycle_step(self) -> int:
        if self.step < self.warmup_steps:
            return -1
        return (self.step - self.warmup_steps) % self.cycle_steps

    @property
    def measuring(self) -> bool:
        return 0 <= self.cycle_step < self.measure_steps

    @property
    def phase(self) -> str:
        if self.step < self.warmup_steps:
            return "warmup"
        return "measuring" if self.measuring else "fixed"


def update_task_weights(state: TaskWeightState, sims: np.ndarray | None) -> TaskWeightState:
    """Advance the schedule by one training step.

    `sims` carries this step's per-task similarities and is required exactly
    when the state is in a measurement window. Weights change only when a
    window completes; the new value takes effect from the following step.
    """
    if state.measuring:
        if sims is None:
            raise ConfigError("similarities required during a measurement window")
        sims = np.asarray(sims, dtype=float)
        if sims.shape != (state.task_count,):
            raise ConfigError(
                f"expected {state.task_count} similarities, got shape {sims.shape}"
            )
        state.counts += (sims > state.threshold).astype(np.int64)
        if state.cycle_step == state.measure_steps - 1:
            state.etas = state.counts / float(state.measure_steps)
            state._pending = state.etas.copy()
            state.counts[:] = 0
    state.step += 1
    if state.step >= state.warmup_steps and state.cycle_step == 0:
        state.etas_cyclestart = state._pending.copy()
    return state


@dataclass
class AdaptBreakdown:
    """Combined loss report: target term plus weighted offline terms."""

    target: LossBreakdown
    offline: list[LossBreakdown | None]
    etas: np.ndarray

    @property
    def total(self) -> float:
        out = self.target.total
        for bd, eta in zip(self.offline, self.etas):
            if bd is not None and eta != 0.0:
                out += eta * bd.total
        return out


def _ez_terms(model, target_batch, offline_batches, etas, coeffs, force_all):
    """Evaluate ez_loss per batch; offline tasks with eta 0 are skipped
    entirely unless force_all (a skipped task contributes nothing, bit-exactly)."""
    target_term = ez_loss(model, target_batch, coeffs)
    offline_terms = []
    for batch, eta in zip(offline_batches, etas):
        if force_all or eta != 0.0:
            offline_terms.append(ez_loss(model, batch, coeffs))
        else:
            offline_terms.append(None)
    return target_term, offline_terms


def _assemble(target_term, offline_terms, etas) -> tuple[AdaptBreakdown, np.ndarray]:
    target_bd, grad = target_term
    grad = grad.copy()
    breakdowns: list[LossBreakdown | None] = []
    for term, eta in zip(offline_terms, etas):
        if term is None or eta == 0.0:
            breakdowns.append(None if term is None else term[0])
            continue
        bd_i, g_i = term
        grad += eta * g_i
        breakdowns.append(bd_i)
    return AdaptBreakdown(target=target_bd, offline=breakdowns, etas=np.asarray(etas, dtype=float)), grad


def adapt_loss(model, target_batch, offline_batches, etas, coeffs):
    """Combined gradient: target term with weight 1 plus eta-weighted offline
    terms. Returns (AdaptBreakdown, flat gradient)."""
    etas = np.asarray(etas, dtype=float)
    if len(offline_batches) != etas.shape[0]:
        raise ConfigError(
            f"{len(offline_batches)} offline batches but {etas.shape[0]} weights"
        )
    target_term, offline_terms = _ez_terms(
        model, target_batch, offline_batches, etas, coeffs, force_all=False
    )
    return _assemble(target_term, offline_terms, etas)


def load_components(target: WorldModel, source: WorldModel, subset) -> WorldModel:
    """Copy the selected components' parameter segments from source into
    target; everything else keeps target's current values."""
    subset = frozenset(subset)
    unknown = subset - set(COMPONENTS)
    if unknown:
        raise ConfigError(f"unknown components: {', '.join(sorted(unknown))}")
    if not subset:
        return target
    flat = target.get_flat()
    for name, sl, shape in target.layout.slices():
        if component_of(name) not in subset:
            continue
        try:
            src_sl, src_shape = source.layout.segment_slice(name)
        except KeyError:
            raise ConfigError(f"source checkpoint lacks component {component_of(name)!r} segment {name!r}")
        if src_shape != shape:
            raise ConfigError(
                f"component {component_of(name)!r} shape mismatch on {name!r}: "
                f"{src_shape} vs {shape}"
            )
        flat[sl] = source.get_flat()[src_sl]
    target.set_flat(flat)
    return target


def evaluate(
    model: WorldModel,
    spec: EnvSpec,
    episodes: int,
    rng,
    search: SearchConfig | None = None,
) -> float:
    """Mean return over seeded episodes with noise-free, temperature-0 search."""
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")
    scfg = (search or SearchConfig()).for_eval()
    total = 0.0
    for _ in range(episodes):
        env = make_env(spec)
        obs = env.reset(rng)
        while not env.done:
            result = run_search(model, obs, scfg, rng)
            obs, reward, _ = env.step(result.chosen_action)
            total += reward
    return total / episodes


@dataclass
class FinetuneConfig:
    """Everything a finetuning run consumes besides the rng.

    Offline task lists must be aligned: datasets[i] was produced on
    task_ids[i] and teachers[i] was trained on it.
    """

    cfg: RunConfig
    target: EnvSpec
    task_ids: list[str] = field(default_factory=list)
    datasets: list[list[Trajectory]] = field(default_factory=list)
    teachers: list[WorldModel] = field(default_factory=list)
    init: WorldModel | None = None

    def validate(self) -> None:
        self.target.validate()
        cross = self.cfg.b("flags.cross_task")
        m = len(self.task_ids)
        if not (len(self.datasets) == len(self.teachers) == m):
            raise ConfigError(
                f"offline task lists misaligned: {m} ids, "
                f"{len(self.datasets)} datasets, {len(self.teachers)} teachers"
            )
        if self.cfg.i("train.batch_target") < 1:
            raise ConfigError("train.batch_target must be >= 1")
        if cross and m > 0 and self.cfg.i("train.batch_offline") < m:
            raise ConfigError(
                "train.batch_offline must allow at least one sample per offline task"
            )
        for key in ("train.self_play_interval", "train.target_interval", "train.eval_interval"):
            if self.cfg.i(key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for tid, ds in zip(self.task_ids, self.datasets):
            if not ds:
                raise ValidationError(f"empty dataset for task {tid!r}")
            for traj in ds:
                if traj.task_id != tid:
                    raise ValidationError(
                        f"dataset for {tid!r} contains trajectory from {traj.task_id!r}"
                    )

    @property
    def offline_count(self) -> int:
        return len(self.task_ids) if self.cfg.b("flags.cross_task") else 0


def _init_model(fin: FinetuneConfig, rng) -> WorldModel:
    cfg = fin.cfg
    mc = model_config(cfg, fin.target.obs_dim, SHARED_ACTION_COUNT)
    model = WorldModel(mc, rng)
    if cfg.b("flags.load_pretrained") and fin.init is not None:
        wanted = [p.strip() for p in cfg.s("flags.load_components").split(",") if p.strip()]
        if fin.init.layout.size != model.layout.size and wanted:
            raise ConfigError("pretrained checkpoint layout does not match target model")
        load_components(model, fin.init, wanted)
    if cfg.b("flags.freeze_repr"):
        model.frozen = frozenset({"h"})
    return model


def _trainable_mask(model: WorldModel) -> np.ndarray | None:
    if not model.frozen:
        return None
    mask = np.ones(model.layout.size, dtype=bool)
    for name, sl, _ in model.layout.slices():
        if component_of(name) in model.frozen:
            mask[sl] = False
    return mask


def finetune_loop(fin: FinetuneConfig, rng, on_snapshot=None) -> tuple[WorldModel, list[dict]]:
    """Online finetuning with concurrent offline terms.

    Collects one self-play episode at a time, then (once the replay buffer
    holds replay.min_size transitions) runs one training step per collected
    environment step. Returns the final model and the metrics log.

    ``on_snapshot(model, env_steps)``, when given, is called after each
    episode's training so callers can clone intermediate checkpoints. The
    callback must not mutate the model.
    """
    fin.validate()
    cfg = fin.cfg
    budget = cfg.i("train.env_steps")
    m = fin.offline_count
    coeffs = loss_coeffs(cfg)
    tspec = target_spec(cfg, source="reanalyze")
    teacher_spec = target_spec(cfg, source="teacher")
    scfg_act = search_config(cfg, temperature=1.0, add_noise=True)
    dynamic = cfg.b("flags.dynamic_weights")

    model = _init_model(fin, rng)
    if m > 0:
        for tid, teacher in zip(fin.task_ids, fin.teachers):
            if teacher.layout.size != model.layout.size:
                raise ConfigError(f"teacher for {tid!r} does not match the model layout")
    target_model = model.clone()
    actor = model.clone()
    opt = _SgdState(model, cfg, trainable=_trainable_mask(model))

    buffer = ReplayBuffer(fin.target.task_id, cfg.i("replay.capacity"))
    offline_buffers = []
    shares = []
    if m > 0:
        for tid, ds in zip(fin.task_ids, fin.datasets):
            buf = ReplayBuffer(tid, capacity=sum(t.length for t in ds))
            for traj in ds:
                buf.append(traj, initial_priority=1.0)
            offline_buffers.append(buf)
        shares = batch_shares(cfg.i("train.batch_offline"), m)

    weights = TaskWeightState(
        task_count=m,
        cycle_steps=cfg.i("weights.cycle_T"),
        measure_steps=cfg.i("weights.measure_N"),
        warmup_steps=int(round(cfg.f("weights.warmup_frac") * budget)),
        threshold=cfg.f("weights.threshold"),
    )

    metrics: list[dict] = []
    env_steps = 0
    train_steps = 0
    trained_for = 0
    last_refresh = 0
    next_eval = 0
    diverged = False

    def run_eval() -> None:
        ret = evaluate(
            model, fin.target, cfg.i("train.eval_episodes"), rng, search=search_config(cfg)
        )
        metrics.append({"step": train_steps, "env_steps": env_steps, "eval_return": ret})

    def train_one(step_index: int, horizon: int, lr_scale: float) -> bool:
        """One gradient step; returns False when training must stop."""
        nonlocal train_steps, diverged
        lr = lr_scale * lr_schedule(
            step_index, horizon, cfg.f("optim.lr_start"), cfg.f("optim.lr_end")
        )
        beta = beta_at(
            step_index, horizon, cfg.f("replay.beta_start"), cfg.f("replay.beta_end")
        )
        measuring = dynamic and m > 0 and weights.measuring
        etas = weights.etas if dynamic else np.ones(m)
        try:
            idx, iw = buffer.sample(
                cfg.i("train.batch_target"), cfg.f("replay.alpha"), beta, rng,
                allow_replacement=buffer.n_transitions < cfg.i("train.batch_target"),
            )
            samples = [buffer.transition(i) for i in idx]
            target_batch, priorities = reanalyze_batch(
                model, target_model, samples, iw, tspec, scfg_act, rng
            )
            buffer.update_priorities(idx, priorities)

            offline_batches = []
            for share, buf, teacher in zip(shares, offline_buffers, fin.teachers):
                o_idx, o_iw = buf.sample(
                    share, 0.0, 0.0, rng,
                    allow_replacement=buf.n_transitions < share,
                )
                o_samples = [buf.transition(i) for i in o_idx]
                offline_batches.append(
                    teacher_batch(teacher, o_samples, o_iw, teacher_spec)
                )

            target_term, offline_terms = _ez_terms(
                model, target_batch, offline_batches, etas, coeffs, force_all=measuring
            )
            sims = None
            if measuring:
                g_t = target_term[1]
                sims = np.array(
                    [gradient_similarity(g_t, term[1]) for term in offline_terms]
                )
            breakdown, grad = _assemble(target_term, offline_terms, etas)
            opt.apply(grad, lr)
        except NumericError:
            opt.rollback()
            diverged = True
            metrics.append({"step": train_steps, "env_steps": env_steps, "diverged": True})
            return False
        opt.mark_good()

        record = {
            "step": train_steps,
            "env_steps": env_steps,
            "lr": lr,
            "loss": breakdown.total,
            "loss_target": breakdown.target.total,
            "loss_reward": breakdown.target.reward,
            "loss_policy": breakdown.target.policy,
            "loss_value": breakdown.target.value,
            "loss_consistency": breakdown.target.consistency,
        }
        for tid, eta, eta_alt in zip(fin.task_ids, etas, weights.etas_cyclestart):
            record[f"eta.{tid}"] = float(eta)
            record[f"eta_cyclestart.{tid}"] = float(eta_alt if dynamic else 1.0)
        if sims is not None:
            for tid, sim in zip(fin.task_ids, sims):
                record[f"sim.{tid}"] = float(sim)
        for tid, bd in zip(fin.task_ids, breakdown.offline):
            if bd is not None:
                record[f"loss_offline.{tid}"] = bd.total
        metrics.append(record)

        if dynamic and m > 0:
            update_task_weights(weights, sims)
        train_steps += 1
        if train_steps % cfg.i("train.target_interval") == 0:
            target_model.set_flat(model.get_flat())
        return True

    while env_steps < budget and not diverged:
        if train_steps - last_refresh >= cfg.i("train.self_play_interval"):
            actor.set_flat(model.get_flat())
            last_refresh = train_steps
        temp = temperature_at(
            env_steps / budget,
            mid_at=cfg.f("search.temp_mid_at"),
            late_at=cfg.f("search.temp_late_at"),
        )
        traj = play_episode(fin.target, actor, scfg_act, rng, action_temperature=temp)
        buffer.append(traj)
        env_steps += traj.length

        if buffer.n_transitions >= cfg.i("replay.min_size"):
            due = min(env_steps, budget) - trained_for
            for _ in range(due):
                if not train_one(train_steps, budget, 1.0):
                    break
            trained_for = min(env_steps, budget)

        if on_snapshot is not None:
            on_snapshot(model, env_steps)

        while env_steps >= next_eval:
            run_eval()
            next_eval += cfg.i("train.eval_interval")

    extra = cfg.i("train.extra_gradient_steps")
    if extra > 0 and not diverged:
        for _ in range(extra):
            if not train_one(budget, budget, cfg.f("train.extra_lr_scale")):
                break

    if not metrics or "eval_return" not in metrics[-1]:
        run_eval()
    return model, metrics
