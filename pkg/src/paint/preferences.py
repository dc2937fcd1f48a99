"""Simulated patient preference functions.

Each strategy maps dataset samples to a raw scalar, then the values for
a labeled subset are min-max normalized into [-1, +1] (an affine map,
so argmax/argmin sample sets survive). Strategies cover the nine goal
variants (time-in-range, time-below-range, glucose variability), the
two action-labelling case studies (pre-meal dosing, compression-low
response), and a parameterized glucose-target strategy used by the
target-following experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import magni_risk
from .reward_learning import SketchLabel
from .simulator import DT_MIN

_DELTA_STEPS_30MIN = 10
_COMP_STEPS = 5
_COMP_THRESHOLD_MGDL = 15.0
_PRE_MEAL_WINDOW_MIN = 120.0


@dataclass
class SampleBatch:
    """Per-sample fields a preference function may consult."""

    glucose: np.ndarray
    action: np.ndarray  # basal, U/min
    delta_g_30min: np.ndarray
    delta_g_15min: np.ndarray
    clock_min: np.ndarray
    mean_glucose: float
    meal_windows: list[tuple[float, float]]  # clock intervals [lo, hi)

    def in_meal_window(self) -> np.ndarray:
        flag = np.zeros(self.clock_min.size, dtype=bool)
        for lo, hi in self.meal_windows:
            if lo <= hi:
                flag |= (self.clock_min >= lo) & (self.clock_min < hi)
            else:  # window wraps midnight
                flag |= (self.clock_min >= lo) | (self.clock_min < hi)
        return flag


def _tir1(b: SampleBatch):
    return -((b.glucose - 125.0) ** 4)


def _tir2(b: SampleBatch):
    return ((b.glucose > 70.0) & (b.glucose < 180.0)).astype(np.float64)


def _tir3(b: SampleBatch):
    return b.action.copy()


def _tbr1(b: SampleBatch):
    return -(magni_risk(b.glucose) ** 2)


def _tbr2(b: SampleBatch):
    return (b.glucose > 70.0).astype(np.float64)


def _tbr3(b: SampleBatch):
    return -b.action


def _cov1(b: SampleBatch):
    return -np.abs(b.glucose - 144.0)


def _cov2(b: SampleBatch):
    dev_sq = (b.glucose - b.mean_glucose) ** 2
    hypo_penalty = float(dev_sq.max()) if dev_sq.size else 0.0
    return np.where(b.glucose > 70.0, -dev_sq, -hypo_penalty)


def _cov3(b: SampleBatch):
    return -np.abs(b.delta_g_30min)


def _mealtime(b: SampleBatch):
    return b.in_meal_window().astype(np.float64) * b.action**2


def _compression(b: SampleBatch):
    trigger = np.abs(b.delta_g_15min) > _COMP_THRESHOLD_MGDL
    return trigger.astype(np.float64) * b.action**2


_REGISTRY = {
    "tir1": _tir1,
    "tir2": _tir2,
    "tir3": _tir3,
    "tbr1": _tbr1,
    "tbr2": _tbr2,
    "tbr3": _tbr3,
    "cov1": _cov1,
    "cov2": _cov2,
    "cov3": _cov3,
    "mealtime": _mealtime,
    "compression": _compression,
}


def preference_names() -> list[str]:
    return sorted(_REGISTRY) + ["target:<mgdl>"]


def _resolve(name: str):
    if name.startswith("target:"):
        target = float(name.split(":", 1)[1])

        def _target(b: SampleBatch, _t=target):
            return -np.abs(b.glucose - _t)

        return _target
    try:
        return _REGISTRY[name]
    except KeyError:
        known = ", ".join(preference_names())
        raise KeyError(f"unknown preference {name!r} (have: {known})") from None


def _lagged_delta(g: np.ndarray, lag: int) -> np.ndarray:
    idx = np.maximum(np.arange(g.size) - lag, 0)
    return g - g[idx]


def _meal_windows(dataset, indices: np.ndarray) -> list[tuple[float, float]]:
    """Pre-meal clock windows from the labeled subset's meal events.

    One window per meal slot, covering the two hours before the slot's
    mean clock time. Falls back to the whole dataset's meals when the
    subset contains none.
    """
    chosen = set(int(i) for i in indices)

    def collect(restrict: bool):
        by_slot: dict[int, list[float]] = {}
        for ep, tr in enumerate(dataset.trajectories):
            base = int(dataset.ep_offsets[ep])
            for step, slot in tr.meal_slots.items():
                if restrict and (base + step) not in chosen:
                    continue
                clock = (tr.start_clock_min + step * DT_MIN) % 1440.0
                by_slot.setdefault(slot, []).append(clock)
        return by_slot

    by_slot = collect(restrict=True) or collect(restrict=False)
    windows = []
    for slot in sorted(by_slot):
        mean_clock = float(np.mean(by_slot[slot]))
        lo = (mean_clock - _PRE_MEAL_WINDOW_MIN) % 1440.0
        windows.append((lo, mean_clock))
    return windows


def build_sample_batch(dataset, indices) -> SampleBatch:
    indices = np.asarray(indices, dtype=np.int64)
    g = np.empty(indices.size)
    a = np.empty(indices.size)
    d30 = np.empty(indices.size)
    d15 = np.empty(indices.size)
    clock = np.empty(indices.size)

    per_ep_delta30 = {}
    per_ep_delta15 = {}
    for j, gi in enumerate(indices):
        ep, i = dataset.sample_location(int(gi))
        tr = dataset.trajectories[ep]
        if ep not in per_ep_delta30:
            eg = np.asarray(tr.glucose)
            per_ep_delta30[ep] = _lagged_delta(eg, _DELTA_STEPS_30MIN)
            per_ep_delta15[ep] = _lagged_delta(eg, _COMP_STEPS)
        g[j] = tr.glucose[i]
        a[j] = tr.basal[i]
        d30[j] = per_ep_delta30[ep][i]
        d15[j] = per_ep_delta15[ep][i]
        clock[j] = (tr.start_clock_min + i * DT_MIN) % 1440.0

    return SampleBatch(
        glucose=g,
        action=a,
        delta_g_30min=d30,
        delta_g_15min=d15,
        clock_min=clock,
        mean_glucose=float(np.mean(g)) if g.size else 0.0,
        meal_windows=_meal_windows(dataset, indices),
    )


def evaluate_raw(name: str, batch: SampleBatch) -> np.ndarray:
    values = _resolve(name)(batch)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"preference {name!r} produced non-finite values")
    return values


def normalize_labels(raw: np.ndarray) -> np.ndarray:
    """Min-max map onto [-1, +1]; constant input maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return np.zeros_like(raw)
    return 2.0 * (raw - lo) / (hi - lo) - 1.0


def contiguous_label_indices(dataset, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ~n_samples indices as contiguous per-episode segments."""
    if n_samples > dataset.n_samples:
        raise ValueError("requested more labels than dataset samples")
    order = rng.permutation(len(dataset.trajectories))
    picked: list[np.ndarray] = []
    remaining = n_samples
    for ep in order:
        if remaining <= 0:
            break
        lo, hi = dataset.ep_offsets[ep], dataset.ep_offsets[ep + 1]
        length = int(hi - lo)
        take = min(length, remaining)
        start = int(lo) + (int(rng.integers(0, length - take + 1)) if take < length else 0)
        picked.append(np.arange(start, start + take))
        remaining -= take
    return np.concatenate(picked)


def auto_label(
    dataset,
    name: str,
    n_samples: int,
    seed: int = 0,
    corrupt_fraction: float = 0.0,
    noise_sigma_multiple: float = 0.0,
) -> list[SketchLabel]:
    """Simulate sketch labels on contiguous segments of the dataset.

    ``corrupt_fraction`` flips that share of labels to the negated
    preference (extreme labelling error); ``noise_sigma_multiple`` adds
    Gaussian noise scaled by the clean labels' standard deviation.
    Labels are clamped to [-1, 1] after both effects.
    """
    if not 0.0 <= corrupt_fraction <= 1.0:
        raise ValueError("corrupt_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    indices = contiguous_label_indices(dataset, n_samples, rng)
    batch = build_sample_batch(dataset, indices)
    labels = normalize_labels(evaluate_raw(name, batch))

    if corrupt_fraction > 0.0:
        n_bad = int(round(corrupt_fraction * labels.size))
        bad = rng.permutation(labels.size)[:n_bad]
        labels[bad] = -labels[bad]
    if noise_sigma_multiple > 0.0:
        sigma = float(np.std(labels))
        labels = labels + rng.standard_normal(labels.size) * (
            noise_sigma_multiple * sigma
        )
    labels = np.clip(labels, -1.0, 1.0)

    out = []
    for gi, value in zip(indices, labels):
        ep, i = dataset.sample_location(int(gi))
        out.append(
            SketchLabel(
                episode_id=dataset.trajectories[ep].episode_id,
                step=int(i),
                reward=float(value),
            )
        )
    return out
