"""Trajectory persistence and offline dataset assembly.

Trajectories are columnar binary files (JSON header + little-endian
float64 arrays), written deterministically so identical generation
seeds give identical bytes. A Dataset stacks trajectories, attaches
per-sample feature/reward arrays and produces n-step transition views
that never cross episode boundaries.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as feat
from .metrics import magni_risk
from .simulator import DT_MIN, PatientParams

_MAGIC = b"TRJ1"
_VERSION = 1
_ARRAYS = ("t", "glucose", "basal", "bolus", "carbs", "true_glucose")


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    patient_id: str
    episode_id: str
    seed: int
    start_clock_min: float
    t: np.ndarray
    glucose: np.ndarray
    basal: np.ndarray
    bolus: np.ndarray
    carbs: np.ndarray
    true_glucose: np.ndarray
    terminated: bool = False
    fault_onsets_step: list[int] = field(default_factory=list)
    meal_slots: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(getattr(self, name)) for name in _ARRAYS}
        if len(lengths) != 1:
            raise ValueError("trajectory arrays must have equal length")
        t = np.asarray(self.t)
        if t.size > 1 and not np.allclose(np.diff(t), DT_MIN):
            raise ValueError("trajectory time must advance by the global step")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def clock_min(self) -> np.ndarray:
        return (self.start_clock_min + self.t) % 1440.0

    def meal_steps(self) -> list[int]:
        return np.flatnonzero(self.carbs > 0.0).tolist()


def write_trajectory(path, traj: Trajectory):
    header = {
        "patient_id": traj.patient_id,
        "episode_id": traj.episode_id,
        "seed": int(traj.seed),
        "start_clock_min": float(traj.start_clock_min),
        "terminated": bool(traj.terminated),
        "n": len(traj),
        "fault_onsets_step": [int(s) for s in traj.fault_onsets_step],
        "meal_slots": {str(k): int(v) for k, v in traj.meal_slots.items()},
        "arrays": list(_ARRAYS),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(blob)))
        f.write(blob)
        for name in _ARRAYS:
            f.write(np.ascontiguousarray(getattr(traj, name), dtype="<f8").tobytes())


def read_trajectory(path) -> Trajectory:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise TrajectoryFormatError(f"{path}: bad magic")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise TrajectoryFormatError(f"{path}: unsupported version {version}")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    n = header["n"]
    expected = 12 + hlen + 8 * n * len(_ARRAYS)
    if len(data) != expected:
        raise TrajectoryFormatError(
            f"{path}: truncated or oversized (have {len(data)}, want {expected})"
        )
    off = 12 + hlen
    arrays = {}
    for name in header["arrays"]:
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
    return Trajectory(
        patient_id=header["patient_id"],
        episode_id=header["episode_id"],
        seed=header["seed"],
        start_clock_min=header["start_clock_min"],
        terminated=header["terminated"],
        fault_onsets_step=list(header.get("fault_onsets_step", [])),
        meal_slots={int(k): v for k, v in header.get("meal_slots", {}).items()},
        **arrays,
    )


def export_csv(path, traj: Trajectory):
    with open(path, "w") as f:
        f.write("t,glucose_mgdl,basal_u_min,bolus_u,carbs_g\n")
        for i in range(len(traj)):
            f.write(
                f"{traj.t[i]:.1f},{traj.glucose[i]:.6g},{traj.basal[i]:.10g},"
                f"{traj.bolus[i]:.10g},{traj.carbs[i]:.6g}\n"
            )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


@dataclass
class TransitionView:
    """One n-step transition; reward list never crosses the episode end."""

    episode: int
    index: int
    rewards: np.ndarray
    bootstrap_index: int  # global sample index of s_{t+k}
    done: bool

    def discounted_sum(self, gamma: float) -> float:
        return float(sum(r * gamma**j for j, r in enumerate(self.rewards)))


class Dataset:
    """Stacked trajectories with per-sample features and rewards.

    Sample index space is the concatenation of all episodes' steps.
    ``safety_reward[i]`` is the negated Magni risk of the next glucose
    reading; the final step of each episode has no successor and is
    excluded from transition views. ``pref_reward`` is attached by the
    reward-model relabeling pass.
    """

    def __init__(self, trajectories: list[Trajectory], params: PatientParams):
        if not trajectories:
            raise ValueError("dataset needs at least one trajectory")
        self.trajectories = list(trajectories)
        self.params = params
        self.ep_offsets = np.cumsum([0] + [len(tr) for tr in self.trajectories])
        self.n_samples = int(self.ep_offsets[-1])

        self.states = np.vstack(
            [feat.state_matrix(tr, params) for tr in self.trajectories]
        )
        self.actions = np.concatenate([tr.basal for tr in self.trajectories])
        self.glucose = np.concatenate([tr.glucose for tr in self.trajectories])

        rewards = []
        for tr in self.trajectories:
            g = np.asarray(tr.glucose)
            r = np.zeros(len(tr))
            r[:-1] = -magni_risk(g[1:])
            rewards.append(r)
        self.safety_reward = np.concatenate(rewards)
        self.pref_reward: np.ndarray | None = None

    def episode_slice(self, ep: int) -> slice:
        return slice(int(self.ep_offsets[ep]), int(self.ep_offsets[ep + 1]))

    def sample_location(self, global_index: int) -> tuple[int, int]:
        ep = int(np.searchsorted(self.ep_offsets, global_index, side="right") - 1)
        return ep, int(global_index - self.ep_offsets[ep])

    def global_index(self, episode_id: str, step: int) -> int:
        for ep, tr in enumerate(self.trajectories):
            if tr.episode_id == episode_id:
                if not 0 <= step < len(tr):
                    raise IndexError(f"step {step} outside episode {episode_id}")
                return int(self.ep_offsets[ep]) + step
        raise KeyError(f"unknown episode {episode_id!r}")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for tr in self.trajectories:
            h.update(tr.episode_id.encode())
            for name in _ARRAYS:
                h.update(np.ascontiguousarray(getattr(tr, name), dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class TransitionBatchArrays:
    """Flat arrays over all views, ready for vectorized sampling."""

    state_index: np.ndarray
    bootstrap_index: np.ndarray
    n_taken: np.ndarray
    rewards: np.ndarray  # (n_views, n) zero-padded
    done: np.ndarray

    def __len__(self):
        return self.state_index.size


def assemble(
    dataset: Dataset,
    n_steps: int,
    gamma: float,
    reward_kind: str = "safety",
    reward_scale: float = 1.0,
    termination_penalty: float = 0.0,
) -> TransitionBatchArrays:
    """Build n-step transition views over every episode.

    Rewards are divided by ``reward_scale``; ``termination_penalty`` is
    added to the reward of a transition that reaches a terminal state
    (glucose-range exit). Views at most ``n_steps`` long, truncated at
    episode ends; ``done`` marks views whose bootstrap state is terminal.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if reward_kind == "safety":
        reward = dataset.safety_reward / reward_scale
    elif reward_kind == "preference":
        if dataset.pref_reward is None:
            raise ValueError("dataset has no preference rewards; relabel first")
        reward = dataset.pref_reward / reward_scale
    else:
        raise ValueError(f"unknown reward kind {reward_kind!r}")

    state_idx, boot_idx, n_taken, done = [], [], [], []
    reward_rows = []
    for ep, tr in enumerate(dataset.trajectories):
        base = int(dataset.ep_offsets[ep])
        length = len(tr)
        if length < 2:
            continue
        last = length - 1  # final state index within the episode
        for i in range(length - 1):
            k = min(n_steps, last - i)
            row = np.zeros(n_steps)
            row[:k] = reward[base + i : base + i + k]
            if tr.terminated and i + k == last:
                row[k - 1] += termination_penalty
            state_idx.append(base + i)
            boot_idx.append(base + i + k)
            n_taken.append(k)
            done.append(bool(tr.terminated and i + k == last))
            reward_rows.append(row)

    return TransitionBatchArrays(
        state_index=np.asarray(state_idx, dtype=np.int64),
        bootstrap_index=np.asarray(boot_idx, dtype=np.int64),
        n_taken=np.asarray(n_taken, dtype=np.int64),
        rewards=np.vstack(reward_rows),
        done=np.asarray(done, dtype=bool),
    )


def transition_view(arrays: TransitionBatchArrays, dataset: Dataset, i: int) -> TransitionView:
    ep, idx = dataset.sample_location(int(arrays.state_index[i]))
    k = int(arrays.n_taken[i])
    return TransitionView(
        episode=ep,
        index=idx,
        rewards=arrays.rewards[i, :k].copy(),
        bootstrap_index=int(arrays.bootstrap_index[i]),
        done=bool(arrays.done[i]),
    )


class ReplaySampler:
    """Seeded uniform sampler over transition views."""

    def __init__(self, n_views: int, seed: int):
        if n_views < 1:
            raise ValueError("empty view set")
        self.n_views = n_views
        self.rng = np.random.default_rng(seed)

    def sample(self, batch_size: int) -> np.ndarray:
        return self.rng.integers(0, self.n_views, size=batch_size)


def load_dataset(directory, params: PatientParams) -> Dataset:
    directory = Path(directory)
    paths = sorted(directory.glob("*.traj"))
    if not paths:
        raise FileNotFoundError(f"no .traj files under {directory}")
    return Dataset([read_trajectory(p) for p in paths], params)
