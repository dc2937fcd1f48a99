"""Reward-model learning from sketch labels.

Scalar labels in [-1, +1] attached to (episode, step) samples train a
small regression network over (state, action). Mini-batches draw
equally from uniformly-spaced label strata, which keeps rare label
values represented when the sketch distribution is lopsided (all-zero
background with a few highlighted spans, say). The trained model then
relabels every sample of the offline dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datastore import Dataset
from .nn import Adam, Mlp, NormalizationRecord
from .features import STATE_DIM


class InsufficientLabels(ValueError):
    pass


class ConflictingLabel(ValueError):
    pass


@dataclass(frozen=True)
class SketchLabel:
    episode_id: str
    step: int
    reward: float

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("label reward must be finite")


def clamp_reward(value: float) -> float:
    return min(max(float(value), -1.0), 1.0)


class LabelSet:
    """Deduplicating label store keyed by (episode, step).

    Re-adding an identical label is a no-op; adding a different reward
    for an existing key raises ConflictingLabel. Rewards are clamped to
    [-1, 1] at ingestion, never rescaled.
    """

    def __init__(self, labels=None):
        self._by_key: dict[tuple[str, int], float] = {}
        for lab in labels or []:
            self.add(lab)

    def add(self, label: SketchLabel):
        key = (label.episode_id, label.step)
        value = clamp_reward(label.reward)
        existing = self._by_key.get(key)
        if existing is not None and existing != value:
            raise ConflictingLabel(
                f"conflicting labels for {key}: {existing} vs {value}"
            )
        self._by_key[key] = value

    def extend(self, labels):
        for lab in labels:
            self.add(lab)

    def __len__(self):
        return len(self._by_key)

    def items(self) -> list[SketchLabel]:
        return [
            SketchLabel(ep, step, reward)
            for (ep, step), reward in sorted(self._by_key.items())
        ]

    def rewards(self) -> np.ndarray:
        return np.array([lab.reward for lab in self.items()])


def write_labels(path, labels):
    with open(path, "w") as f:
        for lab in labels.items() if isinstance(labels, LabelSet) else labels:
            f.write(
                json.dumps(
                    {"episode_id": lab.episode_id, "t": lab.step, "reward": lab.reward}
                )
                + "\n"
            )


def read_labels(path) -> LabelSet:
    labels = LabelSet()
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        labels.add(SketchLabel(rec["episode_id"], int(rec["t"]), float(rec["reward"])))
    return labels


def stratum_of(rewards: np.ndarray, k: int) -> np.ndarray:
    """Index of the uniform stratum over [-1, 1] each reward falls in."""
    idx = np.floor((np.asarray(rewards) + 1.0) / 2.0 * k).astype(np.int64)
    return np.clip(idx, 0, k - 1)


def stratified_batches(
    rewards: np.ndarray, k: int, batch_size: int, rng: np.random.Generator
):
    """Yield index batches drawing equally from each non-empty stratum.

    Counts differ by at most one; the strata receiving the remainder
    rotate randomly. Within a stratum, indices are drawn without
    replacement unless the stratum is smaller than its quota.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("no labels to sample")
    strata = stratum_of(rewards, k)
    members = [np.flatnonzero(strata == s) for s in range(k)]
    members = [m for m in members if m.size > 0]
    m = len(members)

    while True:
        base = batch_size // m
        extra = batch_size - base * m
        bonus = np.zeros(m, dtype=np.int64)
        if extra:
            bonus[rng.choice(m, size=extra, replace=False)] = 1
        parts = []
        for j, idx in enumerate(members):
            count = base + int(bonus[j])
            if count == 0:
                continue
            replace = count > idx.size
            parts.append(rng.choice(idx, size=count, replace=replace))
        batch = np.concatenate(parts)
        rng.shuffle(batch)
        yield batch


@dataclass
class RewardModelConfig:
    learning_rate: float = 4e-5
    batch_size: int = 128
    max_epochs: int = 500
    reward_bins: int = 10
    hidden: int = 256
    n_hidden_layers: int = 3
    early_stopping: bool = True
    patience: int = 25
    val_fraction: float = 0.1
    min_labels: int = 50


@dataclass
class RewardModel:
    mlp: Mlp
    norm: NormalizationRecord
    max_basal_u_per_min: float
    meta: dict = field(default_factory=dict)

    def _inputs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        s = self.norm.normalize(np.atleast_2d(states))
        a = 2.0 * np.asarray(actions, dtype=np.float64) / self.max_basal_u_per_min - 1.0
        return np.hstack([s, a.reshape(-1, 1)])

    def predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        out = self.mlp.forward(self._inputs(states, actions))
        return np.clip(out[:, 0], -1.0, 1.0)


def _label_arrays(dataset: Dataset, labels: LabelSet):
    items = labels.items()
    idx = np.array(
        [dataset.global_index(lab.episode_id, lab.step) for lab in items],
        dtype=np.int64,
    )
    y = np.array([lab.reward for lab in items])
    eps = np.array([lab.episode_id for lab in items])
    return idx, y, eps


def _split_by_episode(eps: np.ndarray, val_fraction: float, rng: np.random.Generator):
    """Hold out whole episodes; fall back to a temporal tail for one episode."""
    unique = list(dict.fromkeys(eps.tolist()))
    n = eps.size
    if len(unique) > 1:
        order = list(rng.permutation(unique))
        val_eps, count = [], 0
        for ep in order:
            if count >= val_fraction * n:
                break
            val_eps.append(ep)
            count += int(np.sum(eps == ep))
        # never consume every episode
        if len(val_eps) == len(unique):
            val_eps = val_eps[:-1]
        val_mask = np.isin(eps, val_eps)
    else:
        cut = max(1, int(round(n * (1.0 - val_fraction))))
        val_mask = np.zeros(n, dtype=bool)
        val_mask[cut:] = True
    if not val_mask.any():
        val_mask[-1] = True
    return ~val_mask, val_mask


def train_reward_model(
    dataset: Dataset,
    labels: LabelSet,
    config: RewardModelConfig | None = None,
    seed: int = 0,
    norm: NormalizationRecord | None = None,
) -> RewardModel:
    """Fit the reward regressor by MSE with stratified mini-batches.

    Early stopping tracks the held-out split and restores the best
    weights seen, so the returned model's validation loss is the
    minimum over epochs.
    """
    config = config or RewardModelConfig()
    if len(labels) < config.min_labels:
        raise InsufficientLabels(
            f"insufficient labels: have {len(labels)}, need {config.min_labels}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    idx, y, eps = _label_arrays(dataset, labels)
    norm = norm or NormalizationRecord.fit(dataset.states)

    model = RewardModel(
        mlp=Mlp.create(
            [STATE_DIM + 1] + [config.hidden] * config.n_hidden_layers + [1],
            ["relu"] * config.n_hidden_layers + ["linear"],
            seed=seed,
        ),
        norm=norm,
        max_basal_u_per_min=dataset.params.max_basal_u_per_min,
        meta={"k_strata": config.reward_bins, "seed": seed},
    )

    inputs = model._inputs(dataset.states[idx], dataset.actions[idx])
    train_mask, val_mask = _split_by_episode(eps, config.val_fraction, rng)
    x_train, y_train = inputs[train_mask], y[train_mask]
    x_val, y_val = inputs[val_mask], y[val_mask]

    adam = Adam(model.mlp, lr=config.learning_rate)
    batches = stratified_batches(
        y_train, config.reward_bins, config.batch_size, rng
    )
    steps_per_epoch = max(1, y_train.size // config.batch_size)

    def val_loss():
        pred = model.mlp.forward(x_val)[:, 0]
        return float(np.mean((pred - y_val) ** 2))

    best = val_loss()
    best_weights = [w.copy() for w in model.mlp.weights]
    best_biases = [b.copy() for b in model.mlp.biases]
    best_epoch = 0
    since_best = 0
    history = [best]

    epochs_run = 0
    for epoch in range(1, config.max_epochs + 1):
        for _ in range(steps_per_epoch):
            batch = next(batches)
            xb, yb = x_train[batch], y_train[batch]
            pred, cache = model.mlp.forward_cached(xb)
            d_out = 2.0 * (pred[:, 0] - yb)[:, None] / xb.shape[0]
            grads, _ = model.mlp.backward(cache, d_out)
            adam.step(model.mlp, grads)
        epochs_run = epoch
        loss = val_loss()
        history.append(loss)
        if loss < best:
            best = loss
            best_epoch = epoch
            best_weights = [w.copy() for w in model.mlp.weights]
            best_biases = [b.copy() for b in model.mlp.biases]
            since_best = 0
        else:
            since_best += 1
            if config.early_stopping and since_best >= config.patience:
                break

    model.mlp.weights = best_weights
    model.mlp.biases = best_biases
    model.mlp.check_finite()
    model.meta.update(
        {
            "val_loss": best,
            "best_epoch": best_epoch,
            "epochs_run": epochs_run,
            "n_labels": len(labels),
            "val_history": history,
        }
    )
    return model


def relabel(dataset: Dataset, model: RewardModel) -> np.ndarray:
    """Attach model-predicted rewards to every dataset sample (idempotent)."""
    preds = model.predict(dataset.states, dataset.actions)
    dataset.pref_reward = preds
    return preds
