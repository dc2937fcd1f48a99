"""Glycaemic risk and trajectory scoring.

The central quantity is the Magni risk, an asymmetric penalty on blood
glucose that grows steeply below ~80 mg/dL and gently above the healthy
range, with its minimum near 139 mg/dL. Episode scoring aggregates risk,
time-in-range statistics and glucose variability, plus event-windowed
variants used by the meal and sensor-fault case studies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

# Magni risk constants.
_C1 = 3.5506
_C2 = 0.8353
_C3 = 3.7932

# Glucose range definitions (mg/dL). TIR is inclusive on both ends.
TIR_LO = 70.0
TIR_HI = 180.0


def magni_risk(g):
    """Glycaemic risk of a glucose value (mg/dL), scalar or array.

    risk(g) = 10 * (c1 * (ln(g)^c2 - c3))^2, defined for g >= 1.
    Values below 1 mg/dL are rejected together with non-positive input;
    the simulator clamps sensor readings to [1, 1000] so the domain
    restriction never binds in practice.
    """
    arr = np.asarray(g, dtype=np.float64)
    if np.any(arr <= 0.0):
        raise ValueError("magni_risk requires glucose > 0 mg/dL")
    ln = np.log(np.maximum(arr, 1.0))
    risk = 10.0 * (_C1 * (ln**_C2 - _C3)) ** 2
    if np.isscalar(g) or arr.ndim == 0:
        return float(risk)
    return risk


# Glucose at which magni_risk attains its minimum: ln(g*) = c3^(1/c2).
MAGNI_OPTIMUM_MGDL = float(np.exp(_C3 ** (1.0 / _C2)))


@dataclass
class EpisodeReport:
    """Summary metrics for one simulated episode.

    ``magni_total`` is the negated sum of per-step risk (a negative
    number where closer to zero is better); ``risk_total`` is the
    positive sum. Windowed metrics are medians over per-event windows
    and are NaN when the episode contains no such events.
    """

    mean_glucose: float
    median_glucose: float
    magni_total: float
    risk_total: float
    tir_pct: float
    tbr_pct: float
    tar_pct: float
    cov_pct: float
    terminated: bool
    n_samples: int
    mean_basal: float
    post_meal_tir_4h: float = float("nan")
    post_event_cov_8h: float = float("nan")
    post_event_basal_1h: float = float("nan")
    pre_meal_basal_2h: float = float("nan")
    post_meal_basal_2h: float = float("nan")

    def as_dict(self) -> dict:
        return asdict(self)


def _tir_split(glucose: np.ndarray) -> tuple[float, float, float]:
    n = glucose.size
    in_range = int(np.count_nonzero((glucose >= TIR_LO) & (glucose <= TIR_HI)))
    below = int(np.count_nonzero(glucose < TIR_LO))
    above = n - in_range - below
    return 100.0 * in_range / n, 100.0 * below / n, 100.0 * above / n


def _cov(glucose: np.ndarray) -> float:
    mean = float(np.mean(glucose))
    if mean == 0.0:
        return 0.0
    return 100.0 * float(np.std(glucose)) / mean


def _window_slices(
    event_steps: Sequence[int], n: int, start_offset: int, length: int
) -> list[slice]:
    out = []
    for e in event_steps:
        lo = e + start_offset
        hi = lo + length
        if lo < 0:
            lo = 0
        if lo >= n:
            continue
        out.append(slice(lo, min(hi, n)))
    return out


def score(
    trajectory,
    meal_steps: Sequence[int] | None = None,
    event_steps: Sequence[int] | None = None,
    dt_min: float = 3.0,
) -> EpisodeReport:
    """Score a trajectory into an EpisodeReport.

    ``meal_steps``/``event_steps`` default to the trajectory's own meal
    records and fault-event metadata. Windowed metrics are computed per
    event and aggregated by median.
    """
    g = np.asarray(trajectory.glucose, dtype=np.float64)
    basal = np.asarray(trajectory.basal, dtype=np.float64)
    if g.size == 0:
        raise ValueError("cannot score an empty trajectory")
    if meal_steps is None:
        meal_steps = np.flatnonzero(np.asarray(trajectory.carbs) > 0.0).tolist()
    if event_steps is None:
        event_steps = list(getattr(trajectory, "fault_onsets_step", []) or [])

    tir, tbr, tar = _tir_split(g)
    risk_total = float(np.sum(magni_risk(g)))
    steps_per_hour = int(round(60.0 / dt_min))

    report = EpisodeReport(
        mean_glucose=float(np.mean(g)),
        median_glucose=float(np.median(g)),
        magni_total=-risk_total,
        risk_total=risk_total,
        tir_pct=tir,
        tbr_pct=tbr,
        tar_pct=tar,
        cov_pct=_cov(g),
        terminated=bool(trajectory.terminated),
        n_samples=int(g.size),
        mean_basal=float(np.mean(basal)),
    )

    if meal_steps:
        tirs = [
            _tir_split(g[s])[0]
            for s in _window_slices(meal_steps, g.size, 0, 4 * steps_per_hour)
        ]
        if tirs:
            report.post_meal_tir_4h = float(np.median(tirs))
        pre = [
            float(np.mean(basal[s]))
            for s in _window_slices(
                meal_steps, g.size, -2 * steps_per_hour, 2 * steps_per_hour
            )
        ]
        post = [
            float(np.mean(basal[s]))
            for s in _window_slices(meal_steps, g.size, 0, 2 * steps_per_hour)
        ]
        if pre:
            report.pre_meal_basal_2h = float(np.median(pre))
        if post:
            report.post_meal_basal_2h = float(np.median(post))

    if event_steps:
        covs = [
            _cov(g[s])
            for s in _window_slices(event_steps, g.size, 0, 8 * steps_per_hour)
        ]
        basals = [
            float(np.mean(basal[s]))
            for s in _window_slices(event_steps, g.size, 0, steps_per_hour)
        ]
        if covs:
            report.post_event_cov_8h = float(np.median(covs))
        if basals:
            report.post_event_basal_1h = float(np.median(basals))

    return report
