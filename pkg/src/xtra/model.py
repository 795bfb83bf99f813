"""Latent world model: representation h, dynamics g, prediction f, and the
unrolled training loss.

h : stacked observation -> latent state
g : (latent ⊕ one-hot action) -> (next latent, reward)
f : latent -> (policy logits, value)

The training loss unrolls g for K steps from an encoded root observation and
regresses rewards/values (squared error), policies (cross-entropy against a
target distribution) and latent consistency (squared error against the
stop-gradient encoding of the actually-reached observation). Loss terms at
unroll depth k >= 1 are scaled by 1/K, and each dynamics application scales
its backward signal by 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, ValidationError
from .nets import DenseNet, ParamLayout, check_finite, flatten, load_checkpoint, save_checkpoint, unflatten
from .runio import read_manifest, write_manifest

COMPONENTS = ("h", "g", "f")


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int
    action_count: int
    latent_dim: int = 32
    hidden: int = 64


@dataclass(frozen=True)
class LossCoeffs:
    """Weights on the loss terms: total = reward + policy*L_p + value*L_v + consistency*L_s."""

    policy: float = 1.0
    value: float = 0.25
    consistency: float = 2.0


@dataclass
class LossBreakdown:
    reward: float
    policy: float
    value: float
    consistency: float
    coeffs: LossCoeffs = field(default_factory=LossCoeffs)

    @property
    def total(self) -> float:
        return (
            self.reward
            + self.coeffs.policy * self.policy
            + self.coeffs.value * self.value
            + self.coeffs.consistency * self.consistency
        )


class WorldModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        z, a, hdim = cfg.latent_dim, cfg.action_count, cfg.hidden
        self.repr_net = DenseNet("h", [cfg.obs_dim, hdim, z], ["relu", "tanh"], rng)
        self.dyn_net = DenseNet(
            "g", [z + a, hdim, z + 1], ["relu", "identity"], rng, final_scale=0.1
        )
        self.pred_net = DenseNet(
            "f", [z, hdim, a + 1], ["relu", "identity"], rng, final_scale=0.1
        )
        self.frozen: frozenset[str] = frozenset()
        self._layout, _ = flatten(self._param_items())

    # -- parameter plumbing ------------------------------------------------

    def _param_items(self) -> list[tuple[str, np.ndarray]]:
        return (
            self.repr_net.param_items()
            + self.dyn_net.param_items()
            + self.pred_net.param_items()
        )

    @property
    def layout(self) -> ParamLayout:
        return self._layout

    def get_flat(self) -> np.ndarray:
        _, vec = flatten(self._param_items())
        return vec

    def set_flat(self, vec: np.ndarray) -> None:
        values = unflatten(self._layout, np.asarray(vec, dtype=np.float64))
        for net in (self.repr_net, self.dyn_net, self.pred_net):
            net.set_params({k: values[k] for k in net.params})

    def clone(self) -> "WorldModel":
        twin = WorldModel(self.cfg, np.random.default_rng(0))
        twin.set_flat(self.get_flat())
        twin.frozen = self.frozen
        return twin

    # -- inference (no gradient tracking) ----------------------------------

    def represent(self, obs: np.ndarray) -> np.ndarray:
        return self.repr_net.forward(obs)

    def dynamics(self, latent: np.ndarray, actions) -> tuple[np.ndarray, np.ndarray]:
        """latent [Z] or [B,Z]; actions int or [B] -> (next latent, reward)."""
        latent = np.asarray(latent, dtype=np.float64)
        single = latent.ndim == 1
        lat2 = latent[None, :] if single else latent
        acts = np.atleast_1d(np.asarray(actions, dtype=np.int64))
        if (acts < 0).any() or (acts >= self.cfg.action_count).any():
            raise ValueError(f"action id out of range 0..{self.cfg.action_count - 1}")
        onehot = np.zeros((lat2.shape[0], self.cfg.action_count))
        onehot[np.arange(lat2.shape[0]), acts] = 1.0
        out = self.dyn_net.forward(np.concatenate([lat2, onehot], axis=1))
        nxt = np.tanh(out[:, : self.cfg.latent_dim])
        rew = out[:, self.cfg.latent_dim]
        if single:
            return nxt[0], float(rew[0])
        return nxt, rew

    def predict(self, latent: np.ndarray) -> tuple[np.ndarray, np.ndarray | float]:
        """latent [Z] or [B,Z] -> (policy [A] or [B,A], value scalar or [B])."""
        latent = np.asarray(latent, dtype=np.float64)
        single = latent.ndim == 1
        lat2 = latent[None, :] if single else latent
        out = self.pred_net.forward(lat2)
        logits = out[:, : self.cfg.action_count]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        policy = e / e.sum(axis=1, keepdims=True)
        value = out[:, self.cfg.action_count]
        if single:
            return policy[0], float(value[0])
        return policy, value

    def value_of(self, obs: np.ndarray) -> np.ndarray | float:
        """Value head applied to (batched) raw observations."""
        return self.predict(self.represent(obs))[1]

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, self._layout, self.get_flat())
        manifest = {
            "obs_dim": self.cfg.obs_dim,
            "action_count": self.cfg.action_count,
            "latent_dim": self.cfg.latent_dim,
            "hidden": self.cfg.hidden,
            "components": "hgf",
        }
        if extra:
            manifest.update(extra)
        write_manifest(str(path) + ".manifest", manifest)

    @classmethod
    def load(cls, path) -> tuple["WorldModel", dict[str, str]]:
        manifest = read_manifest(str(path) + ".manifest")
        cfg = ModelConfig(
            obs_dim=int(manifest["obs_dim"]),
            action_count=int(manifest["action_count"]),
            latent_dim=int(manifest["latent_dim"]),
            hidden=int(manifest["hidden"]),
        )
        model = cls(cfg, np.random.default_rng(0))
        layout, vec = load_checkpoint(path)
        if layout != model.layout:
            raise ConfigError(
                f"{path}: checkpoint layout does not match a model built from its manifest"
            )
        model.set_flat(vec)
        return model, manifest


def component_of(segment_name: str) -> str:
    return segment_name.split("/", 1)[0]


def unroll(
    model: WorldModel, obs: np.ndarray, actions: list[int] | np.ndarray
) -> list[dict]:
    """Inference-path unroll; step 0 is the encoded root (reward 0.0)."""
    z = model.represent(np.asarray(obs, dtype=np.float64))
    policy, value = model.predict(z)
    steps = [{"latent": z, "reward": 0.0, "policy": policy, "value": value}]
    for a in actions:
        z, r = model.dynamics(z, int(a))
        policy, value = model.predict(z)
        steps.append({"latent": z, "reward": r, "policy": policy, "value": value})
    return steps


@dataclass
class UnrollBatch:
    """Training targets for a batch of root positions unrolled K steps.

    observations      [B, D]        stacked obs at the root position t
    actions           [B, K]        a_{t} .. a_{t+K-1}
    target_rewards    [B, K]        u_{t} .. u_{t+K-1}
    target_policies   [B, K+1, A]   distributions at t .. t+K
    target_values     [B, K+1]      z_t .. z_{t+K}
    next_observations [B, K, D]     stacked obs at t+1 .. t+K (consistency targets)
    importance_weights[B]
    """

    observations: np.ndarray
    actions: np.ndarray
    target_rewards: np.ndarray
    target_policies: np.ndarray
    target_values: np.ndarray
    next_observations: np.ndarray
    importance_weights: np.ndarray

    def validate(self) -> None:
        b, d = self.observations.shape
        k = self.actions.shape[1] if self.actions.ndim == 2 else 0
        if self.actions.shape != (b, k):
            raise ValidationError("actions must be [B, K]")
        if self.target_rewards.shape != (b, k):
            raise ValidationError(f"target_rewards must be [B, {k}]")
        if self.target_policies.shape[:2] != (b, k + 1):
            raise ValidationError(f"target_policies must be [B, {k + 1}, A]")
        if self.target_values.shape != (b, k + 1):
            raise ValidationError(f"target_values must be [B, {k + 1}]")
        if self.next_observations.shape != (b, k, d):
            raise ValidationError(f"next_observations must be [B, {k}, {d}]")
        if self.importance_weights.shape != (b,):
            raise ValidationError("importance_weights must be [B]")

    @property
    def batch_size(self) -> int:
        return self.observations.shape[0]

    @property
    def unroll_steps(self) -> int:
        return self.actions.shape[1]


def _square(t: ad.Tensor) -> ad.Tensor:
    return ad.mul(t, t)


def ez_loss_pins(model: WorldModel, batch: UnrollBatch) -> dict:
    """Values held by every stop-gradient point of ez_loss at the current params.

    The training loss is a two-slot function L(θ, sg(θ)): the consistency
    targets and the detached half of each dynamics-input mixture do not carry
    gradient. Pinning them at a base point lets a finite-difference oracle
    probe exactly the quantity the backward pass computes. Training never
    needs pins; they exist so the gradient contract is checkable.
    """
    batch.validate()
    k_steps = batch.unroll_steps
    z_dim = model.cfg.latent_dim
    scale_refs = []
    z = model.represent(batch.observations)
    for k in range(1, k_steps + 1):
        scale_refs.append(z.copy())
        z, _ = model.dynamics(z, batch.actions[:, k - 1].astype(int))
    if k_steps > 0:
        flat_next = batch.next_observations.reshape(-1, batch.observations.shape[1])
        consistency = model.represent(flat_next).reshape(-1, k_steps, z_dim)
    else:
        consistency = np.zeros((batch.batch_size, 0, z_dim))
    return {"scale_refs": scale_refs, "consistency": consistency}


def ez_loss(
    model: WorldModel,
    batch: UnrollBatch,
    coeffs: LossCoeffs = LossCoeffs(),
    pin: dict | None = None,
) -> tuple[LossBreakdown, np.ndarray]:
    """Unrolled model loss and its gradient over the flat parameter vector.

    Weight decay is NOT part of this loss (the optimizer applies it), so the
    returned gradient is exactly the data-fitting gradient used for
    task-similarity measurements. With `pin` (see ez_loss_pins) the
    stop-gradient branches evaluate at pinned values instead of the current
    params; at the pin's own base point both paths agree bit-for-bit.
    """
    batch.validate()
    cfg = model.cfg
    k_steps = batch.unroll_steps
    a_count = cfg.action_count
    z_dim = cfg.latent_dim

    leaves = {name: ad.leaf(arr) for name, arr in model._param_items()}
    obs = ad.constant(batch.observations)
    weights = ad.constant(batch.importance_weights)

    # consistency targets use the stop-gradient encoder branch: plain forward
    if k_steps > 0:
        if pin is not None:
            next_latents = pin["consistency"]
        else:
            flat_next = batch.next_observations.reshape(-1, batch.observations.shape[1])
            next_latents = model.represent(flat_next).reshape(-1, k_steps, z_dim)

    def predict_terms(latent: ad.Tensor, k: int) -> tuple[ad.Tensor, ad.Tensor]:
        out = model.pred_net.forward_t(latent, leaves)
        logits = ad.cols(out, 0, a_count)
        value = ad.row_sum(ad.cols(out, a_count, a_count + 1))
        pi = ad.constant(batch.target_policies[:, k])
        ce = ad.mul(ad.row_sum(ad.mul(pi, ad.log_softmax(logits))), -1.0)
        verr = _square(ad.sub(value, ad.constant(batch.target_values[:, k])))
        return ce, verr

    z = model.repr_net.forward_t(obs, leaves)
    policy_vec, value_vec = predict_terms(z, 0)
    reward_vec: ad.Tensor | None = None
    cons_vec: ad.Tensor | None = None

    for k in range(1, k_steps + 1):
        if pin is not None:
            # 0.5·z + 0.5·pinned(z): same value and gradient as grad_scale at
            # the base point, but finite-difference visible
            zin = ad.add(ad.mul(z, 0.5), ad.constant(0.5 * pin["scale_refs"][k - 1]))
        else:
            zin = ad.grad_scale(z, 0.5)
        onehot = np.zeros((batch.batch_size, a_count))
        onehot[np.arange(batch.batch_size), batch.actions[:, k - 1].astype(int)] = 1.0
        gout = model.dyn_net.forward_t(
            ad.concat_cols([zin, ad.constant(onehot)]), leaves
        )
        z = ad.tanh(ad.cols(gout, 0, z_dim))
        r_hat = ad.row_sum(ad.cols(gout, z_dim, z_dim + 1))

        r_err = _square(ad.sub(r_hat, ad.constant(batch.target_rewards[:, k - 1])))
        c_err = ad.mul(
            ad.row_sum(_square(ad.sub(z, ad.constant(next_latents[:, k - 1])))),
            1.0 / z_dim,
        )
        ce, verr = predict_terms(z, k)

        scale = 1.0 / k_steps
        reward_vec = r_err if reward_vec is None else ad.add(reward_vec, r_err)
        cons_vec = c_err if cons_vec is None else ad.add(cons_vec, c_err)
        policy_vec = ad.add(policy_vec, ad.mul(ce, scale))
        value_vec = ad.add(value_vec, ad.mul(verr, scale))

    def weighted(term: ad.Tensor | None) -> ad.Tensor:
        if term is None:
            return ad.constant(0.0)
        return ad.mean_all(ad.mul(term, weights))

    reward_s = weighted(None if reward_vec is None else ad.mul(reward_vec, 1.0 / k_steps))
    cons_s = weighted(None if cons_vec is None else ad.mul(cons_vec, 1.0 / k_steps))
    policy_s = weighted(policy_vec)
    value_s = weighted(value_vec)

    parts = {
        "reward": reward_s,
        "policy": policy_s,
        "value": value_s,
        "consistency": cons_s,
    }
    for name, t in parts.items():
        if not np.isfinite(t.value).all():
            raise NumericError(f"non-finite {name} loss term")

    total = ad.add(
        ad.add(reward_s, ad.mul(policy_s, coeffs.policy)),
        ad.add(ad.mul(value_s, coeffs.value), ad.mul(cons_s, coeffs.consistency)),
    )
    ad.backward(total)

    grads = []
    for name, arr in model._param_items():
        g = leaves[name].grad
        grads.append(np.zeros(arr.size) if g is None else g.ravel())
    grad = np.concatenate(grads) if grads else np.zeros(0)

    if model.frozen:
        for name, sl, _ in model.layout.slices():
            if component_of(name) in model.frozen:
                grad[sl] = 0.0

    check_finite(model.layout, grad)
    breakdown = LossBreakdown(
        reward=float(reward_s.value),
        policy=float(policy_s.value),
        value=float(value_s.value),
        consistency=float(cons_s.value),
        coeffs=coeffs,
    )
    return breakdown, grad
