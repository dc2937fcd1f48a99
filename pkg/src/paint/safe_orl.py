"""Safety-constrained offline RL for basal dosing.

Phase 1 trains a TD3+BC policy (twin critics, delayed actor updates,
target-policy smoothing, n-step returns) on the negated Magni risk,
cloning toward the demonstrator's actions: this is the safety anchor.
Phase 2 re-targets the cloning term at that anchor policy and trains
fresh critics on model-predicted preference rewards; the coefficient
lambda scales how far preferences may pull the policy away from the
anchor, with lambda = 0 collapsing tuning onto the anchor exactly.

Networks operate on z-scored states and actions mapped to [-1, 1];
conversion to pump units happens only at the action boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import datastore, features
from .nn import Adam, Mlp, NormalizationRecord, load_checkpoint, save_checkpoint, soft_update
from .simulator import PatientParams


@dataclass
class Td3bcConfig:
    gamma: float = 0.999
    n_steps: int = 10
    batch_size: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_update_freq: int = 2
    target_update_rate: float = 5e-3
    alpha: float = 2.5
    reward_scale: float = 1000.0
    epochs_pretrain: int = 300
    epochs_tune: int = 150
    hidden: int = 256
    termination_penalty: float = -100.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        for name in ("actor_lr", "critic_lr", "target_update_rate", "reward_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def action_to_norm(basal_u_per_min, max_basal: float):
    return 2.0 * np.asarray(basal_u_per_min, dtype=np.float64) / max_basal - 1.0


def norm_to_action(a_norm, max_basal: float):
    a = (np.asarray(a_norm, dtype=np.float64) + 1.0) * 0.5 * max_basal
    return np.clip(a, 0.0, max_basal)


def make_actor(seed: int, hidden: int = 256) -> Mlp:
    # Output layer shrunk and biased low: fresh policies start near zero insulin.
    return Mlp.create(
        [features.STATE_DIM, hidden, hidden, 1],
        ["relu", "relu", "tanh"],
        seed=seed,
        final_weight_scale=0.01,
        final_bias=-2.0,
    )


def make_critic(seed: int, hidden: int = 256) -> Mlp:
    return Mlp.create(
        [features.STATE_DIM + 1, hidden, hidden, 1],
        ["relu", "relu", "linear"],
        seed=seed,
    )


@dataclass
class TrainResult:
    actor: Mlp
    q1: Mlp
    q2: Mlp
    diagnostics: dict


class _Phase:
    """Shared TD3+BC training loop over precomputed transition arrays."""

    def __init__(
        self,
        dataset: datastore.Dataset,
        config: Td3bcConfig,
        seed: int,
        norm: NormalizationRecord,
        reward_kind: str,
        bc_target: str,
        priori_actor: Mlp | None = None,
        lam: float | None = None,
    ):
        self.cfg = config
        self.norm = norm
        max_basal = dataset.params.max_basal_u_per_min

        ss = np.random.SeedSequence(seed)
        seeds = ss.spawn(4)
        self.rng = np.random.default_rng(seeds[0])
        actor_seed = int(seeds[1].generate_state(1)[0])
        q_seed = int(seeds[2].generate_state(1)[0])

        if bc_target == "dataset":
            self.actor = make_actor(actor_seed, config.hidden)
            self.bc_coeff = config.alpha
        elif bc_target == "priori":
            if priori_actor is None:
                raise ValueError("tuning requires the anchor policy")
            if lam is None or lam < 0.0:
                raise ValueError("lambda must be >= 0")
            self.actor = priori_actor.copy()
            self.bc_coeff = float(lam)
        else:
            raise ValueError(f"unknown bc target {bc_target!r}")
        self.actor_target = self.actor.copy()
        self.q1 = make_critic(q_seed, config.hidden)
        self.q2 = make_critic(q_seed + 1, config.hidden)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.adam_actor = Adam(self.actor, config.actor_lr)
        self.adam_q1 = Adam(self.q1, config.critic_lr)
        self.adam_q2 = Adam(self.q2, config.critic_lr)

        reward_scale = (
            config.reward_scale if reward_kind == "safety" else 1.0
        )
        termination_penalty = (
            config.termination_penalty if reward_kind == "safety" else 0.0
        )
        views = datastore.assemble(
            dataset,
            config.n_steps,
            config.gamma,
            reward_kind=reward_kind,
            reward_scale=reward_scale,
            termination_penalty=termination_penalty,
        )
        discounts = config.gamma ** np.arange(config.n_steps)
        self.ret = views.rewards @ discounts
        self.gamma_pow = config.gamma ** views.n_taken.astype(np.float64)
        self.not_done = 1.0 - views.done.astype(np.float64)
        self.state_index = views.state_index
        self.boot_index = views.bootstrap_index
        self.n_views = len(views)

        self.states = norm.normalize(dataset.states)
        self.actions = action_to_norm(dataset.actions, max_basal).reshape(-1, 1)
        if bc_target == "priori":
            self.bc_actions = self._forward_chunked(priori_actor, self.states)
        else:
            self.bc_actions = self.actions

    @staticmethod
    def _forward_chunked(mlp: Mlp, x: np.ndarray, chunk: int = 8192) -> np.ndarray:
        outs = [mlp.forward(x[i : i + chunk]) for i in range(0, x.shape[0], chunk)]
        return np.vstack(outs)

    def critic_step(self, batch: np.ndarray) -> float:
        cfg = self.cfg
        s = self.states[self.state_index[batch]]
        a = self.actions[self.state_index[batch]]
        s_boot = self.states[self.boot_index[batch]]

        noise = np.clip(
            self.rng.normal(0.0, cfg.policy_noise, size=(batch.size, 1)),
            -cfg.noise_clip,
            cfg.noise_clip,
        )
        a_boot = np.clip(self.actor_target.forward(s_boot) + noise, -1.0, 1.0)
        boot_in = np.hstack([s_boot, a_boot])
        q_next = np.minimum(
            self.q1_target.forward(boot_in), self.q2_target.forward(boot_in)
        )[:, 0]
        y = (
            self.ret[batch]
            + self.gamma_pow[batch] * self.not_done[batch] * q_next
        )[:, None]

        q_in = np.hstack([s, a])
        loss = 0.0
        for q, adam in ((self.q1, self.adam_q1), (self.q2, self.adam_q2)):
            pred, cache = q.forward_cached(q_in)
            err = pred - y
            loss += float(np.mean(err**2))
            grads, _ = q.backward(cache, 2.0 * err / batch.size)
            adam.step(q, grads)
        return loss

    def actor_step(self, batch: np.ndarray) -> dict:
        cfg = self.cfg
        idx = self.state_index[batch]
        s = self.states[idx]
        a_ref = self.bc_actions[idx]

        pi, cache_pi = self.actor.forward_cached(s)
        q_in = np.hstack([s, pi])
        q, cache_q = self.q1.forward_cached(q_in)
        lam_hat = self.bc_coeff / (float(np.mean(np.abs(q))) + 1e-8)

        _, d_qin = self.q1.backward(
            cache_q, np.full((batch.size, 1), lam_hat / batch.size), need_input_grad=True
        )
        d_pi = d_qin[:, -1:] - 2.0 * (pi - a_ref) / batch.size
        grads, _ = self.actor.backward(cache_pi, -d_pi)
        self.adam_actor.step(self.actor, grads)

        soft_update(self.actor_target, self.actor, cfg.target_update_rate)
        soft_update(self.q1_target, self.q1, cfg.target_update_rate)
        soft_update(self.q2_target, self.q2, cfg.target_update_rate)
        return {
            "bc_mse": float(np.mean((pi - a_ref) ** 2)),
            "mean_q": float(np.mean(q)),
        }

    def train(self, epochs: int) -> TrainResult:
        cfg = self.cfg
        steps_per_epoch = max(1, self.n_views // cfg.batch_size)
        diag = {}
        step = 0
        for _ in range(epochs):
            for _ in range(steps_per_epoch):
                batch = self.rng.integers(0, self.n_views, size=cfg.batch_size)
                critic_loss = self.critic_step(batch)
                step += 1
                if step % cfg.policy_update_freq == 0:
                    diag = self.actor_step(batch)
                    diag["critic_loss"] = critic_loss
        for net in (self.actor, self.q1, self.q2):
            net.check_finite()
        diag["steps"] = step
        return TrainResult(actor=self.actor, q1=self.q1, q2=self.q2, diagnostics=diag)


def train_priori(
    dataset: datastore.Dataset,
    config: Td3bcConfig | None = None,
    seed: int = 0,
    norm: NormalizationRecord | None = None,
    epochs: int | None = None,
) -> tuple[TrainResult, NormalizationRecord]:
    """Phase 1: safety policy on negated-risk rewards, cloned to the data."""
    config = config or Td3bcConfig()
    norm = norm or NormalizationRecord.fit(dataset.states)
    phase = _Phase(dataset, config, seed, norm, "safety", "dataset")
    return phase.train(epochs or config.epochs_pretrain), norm


def tune(
    dataset: datastore.Dataset,
    priori_actor: Mlp,
    lam: float,
    config: Td3bcConfig | None = None,
    seed: int = 0,
    norm: NormalizationRecord | None = None,
    epochs: int | None = None,
) -> TrainResult:
    """Phase 2: preference tuning with the cloning term aimed at the anchor.

    Critics are reinitialized and trained on the relabeled preference
    rewards; the actor starts from the anchor weights.
    """
    config = config or Td3bcConfig()
    if norm is None:
        raise ValueError("tuning requires the frozen phase-1 normalization")
    phase = _Phase(
        dataset,
        config,
        seed,
        norm,
        "preference",
        "priori",
        priori_actor=priori_actor,
        lam=lam,
    )
    return phase.train(epochs or config.epochs_tune)


@dataclass
class PolicyBundle:
    """Deployable artifact: anchor policy, optional reward model and tuned policy."""

    priori: Mlp
    norm: NormalizationRecord
    max_basal_u_per_min: float
    patient_id: str
    tuned: Mlp | None = None
    reward_mlp: Mlp | None = None
    lam: float | None = None
    meta: dict = field(default_factory=dict)

    def act(self, state_norm: np.ndarray) -> float:
        """Deterministic basal rate (U/min) from a normalized state."""
        actor = self.tuned if self.tuned is not None else self.priori
        a_norm = actor.forward(np.asarray(state_norm, dtype=np.float64))
        return float(norm_to_action(a_norm[-1] if a_norm.ndim else a_norm, self.max_basal_u_per_min))

    def act_raw_state(self, state: np.ndarray) -> float:
        return self.act(self.norm.normalize(state))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        common = {
            "patient_id": self.patient_id,
            "max_basal_u_per_min": self.max_basal_u_per_min,
        }
        save_checkpoint(directory / "priori.ckpt", self.priori, self.norm, common)
        if self.reward_mlp is not None:
            save_checkpoint(directory / "reward.ckpt", self.reward_mlp, self.norm, common)
        if self.tuned is not None:
            save_checkpoint(directory / "tuned.ckpt", self.tuned, self.norm, common)
        meta = dict(self.meta)
        meta.update(common)
        meta["lambda"] = self.lam
        (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))

    @classmethod
    def load(cls, directory) -> "PolicyBundle":
        directory = Path(directory)
        priori, norm, common = load_checkpoint(directory / "priori.ckpt")
        meta = json.loads((directory / "meta.json").read_text())
        tuned = reward_mlp = None
        if (directory / "tuned.ckpt").exists():
            tuned, _, _ = load_checkpoint(directory / "tuned.ckpt")
        if (directory / "reward.ckpt").exists():
            reward_mlp, _, _ = load_checkpoint(directory / "reward.ckpt")
        return cls(
            priori=priori,
            norm=norm,
            max_basal_u_per_min=meta["max_basal_u_per_min"],
            patient_id=meta["patient_id"],
            tuned=tuned,
            reward_mlp=reward_mlp,
            lam=meta.get("lambda"),
            meta=meta,
        )


class RlPolicy:
    """Episode controller wrapping a bundle's deterministic actor."""

    def __init__(self, bundle: PolicyBundle, params: PatientParams, use_tuned=True):
        self.bundle = bundle
        self.params = params
        self.use_tuned = use_tuned

    def reset(self, rng=None):
        pass

    def __call__(self, ctx) -> float:
        state = features.state_from_arrays(
            ctx.glucose, ctx.basal, ctx.bolus, ctx.carbs, ctx.index, self.params
        )
        actor = (
            self.bundle.tuned
            if (self.use_tuned and self.bundle.tuned is not None)
            else self.bundle.priori
        )
        a_norm = actor.forward(self.bundle.norm.normalize(state))
        return float(norm_to_action(a_norm[0], self.bundle.max_basal_u_per_min))
