"""Offline stage: rollout collection from checkpoint policies, per-task
offline RL (teachers), multi-task distillation into a student, the multi-game
offline RL control, and the behavioral-cloning control.

All trainers share one loop skeleton: sample per-task shares, build one
combined unroll batch, take an SGD step, refresh the lagged value network on
its interval, and abort to the last finite parameters on divergence.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import RunConfig, loss_coeffs, model_config, search_config, target_spec
from .envs import EnvSpec, make_env
from .errors import ConfigError, NumericError, ValidationError
from .mcts import SearchConfig, run_search
from .model import UnrollBatch, WorldModel, component_of, ez_loss
from .nets import clip_grad_norm, lr_schedule, sgd_step
from .replay import ReplayBuffer, Trajectory, beta_at
from .targets import reanalyze_batch, teacher_batch


def sample_tempered_action(policy: np.ndarray, temperature: float, rng) -> int:
    """Draw from p^(1/T); T <= 0 is greedy with ties to the lowest id."""
    if temperature <= 0.0:
        return int(np.argmax(policy))
    logits = np.where(policy > 0, np.log(np.maximum(policy, 1e-300)) / temperature, -np.inf)
    tempered = np.exp(logits - logits.max())
    tempered /= tempered.sum()
    return int(rng.choice(len(policy), p=tempered))


def play_episode(
    spec: EnvSpec,
    model: WorldModel,
    search_cfg: SearchConfig,
    rng: np.random.Generator,
    action_temperature: float = 1.0,
) -> Trajectory:
    """One full episode driven by tree search; stores the raw visit
    distribution as the policy record regardless of the acting temperature."""
    env = make_env(spec)
    obs = env.reset(rng)
    observations, actions, rewards, policies, values = [obs], [], [], [], []
    while not env.done:
        result = run_search(model, obs, search_cfg, rng)
        action = sample_tempered_action(result.policy_target, action_temperature, rng)
        obs, reward, _ = env.step(action)
        observations.append(obs)
        actions.append(action)
        rewards.append(reward)
        policies.append(result.policy_target)
        values.append(result.root_value)
    return Trajectory(
        task_id=spec.task_id,
        observations=np.stack(observations),
        actions=np.array(actions, dtype=np.int64),
        rewards=np.array(rewards),
        search_policies=np.stack(policies),
        root_values=np.array(values),
    )


def collect_offline_dataset(
    spec: EnvSpec,
    checkpoints: list[WorldModel],
    episodes_per_ckpt: int,
    search_cfg: SearchConfig,
    rng: np.random.Generator,
) -> list[Trajectory]:
    """Mixed-quality dataset: every checkpoint policy contributes the same
    number of noisy-search episodes."""
    if not checkpoints:
        raise ConfigError("collect_offline_dataset needs at least one checkpoint")
    if episodes_per_ckpt < 1:
        raise ConfigError(f"episodes_per_ckpt must be >= 1, got {episodes_per_ckpt}")
    out = []
    for model in checkpoints:
        for _ in range(episodes_per_ckpt):
            out.append(play_episode(spec, model, search_cfg, rng))
    return out


def _dataset_dims(datasets: list[list[Trajectory]]) -> tuple[int, int]:
    for ds in datasets:
        if not ds:
            raise ValidationError("empty dataset in training input")
    d_obs = datasets[0][0].observations.shape[1]
    a_count = datasets[0][0].search_policies.shape[1]
    for ds in datasets:
        for traj in ds:
            if traj.observations.shape[1] != d_obs or traj.search_policies.shape[1] != a_count:
                raise ConfigError(
                    "datasets disagree on observation/action dimensions; "
                    "a shared model needs matching spaces"
                )
    return d_obs, a_count


def _buffers(datasets: list[list[Trajectory]]) -> list[ReplayBuffer]:
    buffers = []
    for ds in datasets:
        buf = ReplayBuffer(ds[0].task_id, capacity=sum(t.length for t in ds))
        for traj in ds:
            buf.append(traj, initial_priority=1.0)
        buffers.append(buf)
    return buffers


def batch_shares(total: int, parts: int) -> list[int]:
    """Deterministic near-equal split; the remainder goes to the first parts."""
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


class _SgdState:
    """Flat-parameter SGD with momentum, gradient clipping, divergence
    rollback, and an optional trainable mask.

    Masked-out parameters are left untouched entirely: weight decay and
    momentum must not drift frozen segments."""

    def __init__(self, model: WorldModel, cfg: RunConfig, trainable: np.ndarray | None = None):
        self.model = model
        self.cfg = cfg
        self.velocity = np.zeros(model.layout.size)
        self.last_good = model.get_flat()
        self.trainable = trainable

    def apply(self, grad: np.ndarray, lr: float) -> None:
        grad = clip_grad_norm(grad, self.cfg.f("optim.max_grad_norm"))
        before = self.model.get_flat()
        params, velocity = sgd_step(
            before,
            grad,
            self.velocity,
            lr=lr,
            momentum=self.cfg.f("optim.momentum"),
            weight_decay=self.cfg.f("optim.weight_decay"),
        )
        if self.trainable is not None:
            params = np.where(self.trainable, params, before)
            velocity = np.where(self.trainable, velocity, self.velocity)
        self.velocity = velocity
        self.model.set_flat(params)

    def mark_good(self) -> None:
        self.last_good = self.model.get_flat()

    def rollback(self) -> None:
        self.model.set_flat(self.last_good)


def _offline_rl(
    datasets: list[list[Trajectory]],
    cfg: RunConfig,
    rng: np.random.Generator,
    steps: int,
) -> tuple[WorldModel, list[dict]]:
    """Fixed-dataset RL with self-generated search targets; one model over
    all datasets, equal per-task batch shares."""
    d_obs, a_count = _dataset_dims(datasets)
    model = WorldModel(model_config(cfg, d_obs, a_count), rng)
    target_model = model.clone()
    buffers = _buffers(datasets)
    shares = batch_shares(cfg.i("train.batch_offline"), len(buffers))
    tspec = target_spec(cfg, source="reanalyze")
    scfg = search_config(cfg, temperature=1.0, add_noise=True)
    coeffs = loss_coeffs(cfg)
    opt = _SgdState(model, cfg)
    metrics: list[dict] = []

    for step in range(steps):
        lr = lr_schedule(step, max(steps, 1), cfg.f("optim.lr_start"), cfg.f("optim.lr_end"))
        beta = beta_at(step, steps, cfg.f("replay.beta_start"), cfg.f("replay.beta_end"))
        try:
            parts = []
            for share, buf in zip(shares, buffers):
                if share == 0:
                    continue
                idx, weights = buf.sample(
                    share, cfg.f("replay.alpha"), beta, rng,
                    allow_replacement=buf.n_transitions < share,
                )
                samples = [buf.transition(i) for i in idx]
                batch, priorities = reanalyze_batch(
                    model, target_model, samples, weights, tspec, scfg, rng
                )
                buf.update_priorities(idx, priorities)
                parts.append(batch)
            breakdown, grad = ez_loss(model, concat_batches(parts), coeffs)
            opt.apply(grad, lr)
        except NumericError:
            opt.rollback()
            break
        opt.mark_good()
        if (step + 1) % cfg.i("train.target_interval") == 0:
            target_model.set_flat(model.get_flat())
        metrics.append(
            {
                "step": step,
                "lr": lr,
                "loss": breakdown.total,
                "loss_reward": breakdown.reward,
                "loss_policy": breakdown.policy,
                "loss_value": breakdown.value,
                "loss_consistency": breakdown.consistency,
            }
        )
    return model, metrics


def concat_batches(parts: list[UnrollBatch]) -> UnrollBatch:
    if len(parts) == 1:
        return parts[0]
    return UnrollBatch(
        observations=np.concatenate([p.observations for p in parts]),
        actions=np.concatenate([p.actions for p in parts]),
        target_rewards=np.concatenate([p.target_rewards for p in parts]),
        target_policies=np.concatenate([p.target_policies for p in parts]),
        target_values=np.concatenate([p.target_values for p in parts]),
        next_observations=np.concatenate([p.next_observations for p in parts]),
        importance_weights=np.concatenate([p.importance_weights for p in parts]),
    )


def train_teacher(
    dataset: list[Trajectory], cfg: RunConfig, rng: np.random.Generator
) -> tuple[WorldModel, list[dict]]:
    return _offline_rl([dataset], cfg, rng, cfg.i("pretrain.teacher_steps"))


def multigame_offline_rl(
    datasets: list[list[Trajectory]], cfg: RunConfig, rng: np.random.Generator
) -> tuple[WorldModel, list[dict]]:
    return _offline_rl(datasets, cfg, rng, cfg.i("pretrain.teacher_steps"))


def distill_student(
    teachers: list[WorldModel],
    datasets: list[list[Trajectory]],
    cfg: RunConfig,
    rng: np.random.Generator,
) -> tuple[WorldModel, list[dict]]:
    """Multi-task student trained against frozen teacher predictions with
    uniform within-task sampling and equal per-task shares."""
    if len(teachers) != len(datasets) or not teachers:
        raise ConfigError(
            f"need one teacher per dataset, got {len(teachers)} teachers "
            f"for {len(datasets)} datasets"
        )
    d_obs, a_count = _dataset_dims(datasets)
    for i, teacher in enumerate(teachers):
        if teacher.cfg.obs_dim != d_obs or teacher.cfg.action_count != a_count:
            raise ConfigError(f"teacher {i} shape mismatch with datasets")
    ref = teachers[0].layout
    for i, teacher in enumerate(teachers):
        if teacher.layout.segments != ref.segments:
            raise ConfigError(f"teacher {i} parameter layout differs from teacher 0")

    student = WorldModel(model_config(cfg, d_obs, a_count), rng)
    if student.layout.segments != ref.segments:
        raise ConfigError("student/teacher parameter layouts differ; check model sizes")
    buffers = _buffers(datasets)
    shares = batch_shares(cfg.i("train.batch_offline"), len(buffers))
    tspec = target_spec(cfg, source="teacher")
    coeffs = loss_coeffs(cfg)
    opt = _SgdState(student, cfg)
    steps = cfg.i("pretrain.distill_steps")
    metrics: list[dict] = []

    for step in range(steps):
        lr = lr_schedule(step, max(steps, 1), cfg.f("optim.lr_start"), cfg.f("optim.lr_end"))
        try:
            parts = []
            for share, (buf, teacher) in zip(shares, zip(buffers, teachers)):
                if share == 0:
                    continue
                idx, weights = buf.sample(
                    share, 0.0, 0.0, rng, allow_replacement=buf.n_transitions < share
                )
                samples = [buf.transition(i) for i in idx]
                parts.append(teacher_batch(teacher, samples, weights, tspec))
            breakdown, grad = ez_loss(student, concat_batches(parts), coeffs)
            opt.apply(grad, lr)
        except NumericError:
            opt.rollback()
            break
        opt.mark_good()
        metrics.append(
            {
                "step": step,
                "lr": lr,
                "loss": breakdown.total,
                "loss_reward": breakdown.reward,
                "loss_policy": breakdown.policy,
                "loss_value": breakdown.value,
                "loss_consistency": breakdown.consistency,
            }
        )
    return student, metrics


def bc_baseline(
    datasets: list[list[Trajectory]], cfg: RunConfig, rng: np.random.Generator
) -> tuple[WorldModel, list[dict]]:
    """Supervised policy cloning of logged actions through the encoder and
    prediction head only; dynamics parameters stay at initialization."""
    d_obs, a_count = _dataset_dims(datasets)
    model = WorldModel(model_config(cfg, d_obs, a_count), rng)
    trainable = np.zeros(model.layout.size, dtype=bool)
    for name, sl, _ in model.layout.slices():
        if component_of(name) in ("h", "f"):
            trainable[sl] = True

    buffers = _buffers(datasets)
    shares = batch_shares(cfg.i("train.batch_offline"), len(buffers))
    opt = _SgdState(model, cfg)
    steps = cfg.i("pretrain.distill_steps")
    metrics: list[dict] = []

    for step in range(steps):
        lr = lr_schedule(step, max(steps, 1), cfg.f("optim.lr_start"), cfg.f("optim.lr_end"))
        obs_rows, action_rows = [], []
        for share, buf in zip(shares, buffers):
            if share == 0:
                continue
            idx, _ = buf.sample(share, 0.0, 0.0, rng, allow_replacement=buf.n_transitions < share)
            for i in idx:
                traj, t = buf.transition(i)
                obs_rows.append(traj.observations[t])
                action_rows.append(traj.actions[t])
        obs = np.stack(obs_rows)
        onehot = np.zeros((len(action_rows), a_count))
        onehot[np.arange(len(action_rows)), action_rows] = 1.0

        leaves = {name: ad.leaf(arr) for name, arr in model._param_items()}
        latent = model.repr_net.forward_t(ad.constant(obs), leaves)
        logits = ad.cols(model.pred_net.forward_t(latent, leaves), 0, a_count)
        picked = ad.row_sum(ad.mul(ad.log_softmax(logits), ad.constant(onehot)))
        loss = ad.mul(ad.mean_all(picked), -1.0)
        try:
            if not np.isfinite(loss.value):
                raise NumericError("behavioral cloning loss is non-finite")
            ad.backward(loss)
            pieces = []
            for name, arr in model._param_items():
                g = leaves[name].grad
                pieces.append(np.zeros(arr.size) if g is None else g.ravel())
            grad = np.where(trainable, np.concatenate(pieces), 0.0)
            before = model.get_flat()
            opt.apply(grad, lr)
            # weight decay must not touch the untrained dynamics segments
            model.set_flat(np.where(trainable, model.get_flat(), before))
        except NumericError:
            opt.rollback()
            break
        opt.mark_good()
        metrics.append({"step": step, "lr": lr, "loss": float(loss.value)})
    return model, metrics


def mean_policy_kl(
    reference: WorldModel, candidate: WorldModel, observations: np.ndarray
) -> float:
    """Mean KL(reference || candidate) over the policies at the given states."""
    if observations.ndim != 2:
        raise ValidationError("observations must be [N, D]")
    total = 0.0
    for obs in observations:
        p, _ = reference.predict(reference.represent(obs))
        q, _ = candidate.predict(candidate.represent(obs))
        total += float(np.sum(p * (np.log(p) - np.log(q))))
    return total / observations.shape[0]


def evaluate_policy_zero_shot(
    model: WorldModel, spec: EnvSpec, episodes: int, rng: np.random.Generator
) -> float:
    """Mean return of the raw predicted policy (greedy, no search)."""
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")
    total = 0.0
    for _ in range(episodes):
        env = make_env(spec)
        obs = env.reset(rng)
        while not env.done:
            policy, _ = model.predict(model.represent(obs))
            obs, reward, _ = env.step(int(np.argmax(policy)))
            total += reward
    return total / episodes
