"""State featurization for the dosing networks.

Each sample becomes a 21-vector: current glucose, eight 30-minute mean
glucose windows and eight 30-minute mean insulin-delivery windows
covering the prior four hours, insulin-on-board and carbs-on-board from
exponential-decay activity curves, patient weight, and the episode's
running mean basal action. Glucose windows include the current reading;
insulin windows and the on-board sums only see doses strictly before
the current step, so a state never depends on the action taken at it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import NormalizationRecord
from .simulator import DT_MIN, PatientParams

STATE_DIM = 21
_WINDOW_STEPS = 10  # 30 min
_N_WINDOWS = 8  # 4 h
_HIST_STEPS = _WINDOW_STEPS * _N_WINDOWS

INSULIN_CURVE_PEAK_MIN = 55.0
INSULIN_CURVE_DURATION_MIN = 240.0
CARB_CURVE_PEAK_MIN = 40.0
CARB_CURVE_DURATION_MIN = 210.0


@dataclass(frozen=True)
class ActivityCurve:
    """Skewed activity profile rising from zero at t=0 back to zero at t_d.

    activity(t) = (S / tau^2) * t * (1 - t/t_d) * exp(-t/tau)
    with tau = t_p (1 - t_p/t_d) / (1 - 2 t_p/t_d), a = 2 tau / t_d and
    S = 1 / (1 - a + (1 + a) exp(-t_d/tau)). Requires 2 t_p < t_d.
    """

    t_p: float
    t_d: float

    def __post_init__(self):
        if not (0.0 < self.t_p and 2.0 * self.t_p < self.t_d):
            raise ValueError("activity curve requires 0 < 2*t_p < t_d")

    @property
    def tau(self) -> float:
        return self.t_p * (1.0 - self.t_p / self.t_d) / (1.0 - 2.0 * self.t_p / self.t_d)

    @property
    def a(self) -> float:
        return 2.0 * self.tau / self.t_d

    @property
    def s(self) -> float:
        a = self.a
        return 1.0 / (1.0 - a + (1.0 + a) * math.exp(-self.t_d / self.tau))

    def activity(self, t_min):
        t = np.asarray(t_min, dtype=np.float64)
        if np.any(t < 0.0):
            raise ValueError("activity time must be non-negative")
        tau = self.tau
        val = (self.s / tau**2) * t * (1.0 - t / self.t_d) * np.exp(-t / tau)
        val = np.where((t >= 0.0) & (t <= self.t_d), val, 0.0)
        return float(val) if np.isscalar(t_min) else val

    def remaining_fraction(self, age_min):
        """1 - (cumulative activity up to age) / (total activity).

        Evaluated from a dense trapezoid integral of the activity curve;
        exactly 1 at age 0 and exactly 0 from t_d onward.
        """
        grid, cum = self._cumulative()
        age = np.asarray(age_min, dtype=np.float64)
        frac = 1.0 - np.interp(age, grid, cum, left=0.0, right=1.0)
        frac = np.where(age >= self.t_d, 0.0, frac)
        return float(frac) if np.isscalar(age_min) else frac

    def _cumulative(self):
        cached = getattr(self, "_cum_cache", None)
        if cached is None:
            grid = np.linspace(0.0, self.t_d, int(self.t_d * 2) + 1)
            act = self.activity(grid)
            cum = np.concatenate(
                [[0.0], np.cumsum((act[1:] + act[:-1]) * 0.5 * np.diff(grid))]
            )
            cum /= cum[-1]
            object.__setattr__(self, "_cum_cache", (grid, cum))
            cached = (grid, cum)
        return cached


def activity(curve: ActivityCurve, t_min):
    return curve.activity(t_min)


INSULIN_CURVE = ActivityCurve(INSULIN_CURVE_PEAK_MIN, INSULIN_CURVE_DURATION_MIN)
CARB_CURVE = ActivityCurve(CARB_CURVE_PEAK_MIN, CARB_CURVE_DURATION_MIN)


def _dose_kernel(curve: ActivityCurve, dt_min: float = DT_MIN) -> np.ndarray:
    """kernel[u] = remaining fraction of a dose aged u steps (kernel[0] = 0).

    Index 0 is zeroed because on-board sums only count doses strictly
    before the current step.
    """
    n = int(math.ceil(curve.t_d / dt_min))
    ages = np.arange(n + 1) * dt_min
    kern = curve.remaining_fraction(ages)
    kern[0] = 0.0
    return kern


_INSULIN_KERNEL = _dose_kernel(INSULIN_CURVE)
_CARB_KERNEL = _dose_kernel(CARB_CURVE)


def iob(dose_history, curve: ActivityCurve = INSULIN_CURVE) -> float:
    """On-board sum over (dose, age_min) pairs.

    Each dose contributes dose * remaining_fraction(age); doses older
    than the curve duration contribute nothing.
    """
    total = 0.0
    for dose, age_min in dose_history:
        total += dose * curve.remaining_fraction(age_min)
    return total


def cob(carb_history, curve: ActivityCurve = CARB_CURVE) -> float:
    return iob(carb_history, curve)


def delivered_insulin_per_step(basal, bolus) -> np.ndarray:
    return np.asarray(basal, dtype=np.float64) * DT_MIN + np.asarray(
        bolus, dtype=np.float64
    )


def build_state(trajectory, index: int, params: PatientParams) -> np.ndarray:
    """21-vector for one sample; see module docstring for the layout."""
    return state_from_arrays(
        trajectory.glucose,
        trajectory.basal,
        trajectory.bolus,
        trajectory.carbs,
        index,
        params,
    )


def _onboard(doses: np.ndarray, index: int, kernel: np.ndarray) -> float:
    # doses[j] is the amount delivered at step j; ages are index - j steps.
    n_back = min(index, kernel.size - 1)
    if n_back == 0:
        return 0.0
    return float(np.dot(doses[index - n_back : index], kernel[n_back:0:-1]))


def state_from_arrays(
    glucose, basal, bolus, carbs, index: int, params: PatientParams
) -> np.ndarray:
    g = np.asarray(glucose, dtype=np.float64)
    if not 0 <= index < g.size:
        raise IndexError("state index out of range")
    basal = np.asarray(basal, dtype=np.float64)
    bolus = np.asarray(bolus, dtype=np.float64)
    carbs = np.asarray(carbs, dtype=np.float64)
    delivered = delivered_insulin_per_step(basal[:index], bolus[:index])

    out = np.empty(STATE_DIM)
    out[0] = g[index]

    for k in range(_N_WINDOWS):
        lo = index - _WINDOW_STEPS * (k + 1) + 1
        hi = index - _WINDOW_STEPS * k + 1
        window = g[max(lo, 0) : hi] if hi > 0 else g[:0]
        pad = _WINDOW_STEPS - window.size
        out[1 + k] = (window.sum() + pad * g[0]) / _WINDOW_STEPS

    for k in range(_N_WINDOWS):
        lo = index - _WINDOW_STEPS * (k + 1)
        hi = index - _WINDOW_STEPS * k
        window = delivered[max(lo, 0) : max(hi, 0)]
        out[9 + k] = window.sum() / _WINDOW_STEPS

    out[17] = _onboard(delivered, index, _INSULIN_KERNEL)
    out[18] = _onboard(carbs, index, _CARB_KERNEL)
    out[19] = params.weight_kg
    out[20] = float(np.mean(basal[:index])) if index > 0 else 0.0
    return out


def state_matrix(trajectory, params: PatientParams) -> np.ndarray:
    """Vectorized featurization of every sample in a trajectory."""
    g = np.asarray(trajectory.glucose, dtype=np.float64)
    basal = np.asarray(trajectory.basal, dtype=np.float64)
    bolus = np.asarray(trajectory.bolus, dtype=np.float64)
    carbs = np.asarray(trajectory.carbs, dtype=np.float64)
    n = g.size
    out = np.empty((n, STATE_DIM))

    out[:, 0] = g

    padded = np.concatenate([np.full(_HIST_STEPS, g[0]), g])
    cs = np.concatenate([[0.0], np.cumsum(padded)])
    idx = np.arange(n) + _HIST_STEPS
    for k in range(_N_WINDOWS):
        hi = idx - _WINDOW_STEPS * k + 1
        lo = idx - _WINDOW_STEPS * (k + 1) + 1
        out[:, 1 + k] = (cs[hi] - cs[lo]) / _WINDOW_STEPS

    delivered = delivered_insulin_per_step(basal, bolus)
    d_hist = np.concatenate([[0.0], delivered[:-1]])  # dose one step ago at [i]
    padded_d = np.concatenate([np.zeros(_HIST_STEPS), d_hist])
    cs_d = np.concatenate([[0.0], np.cumsum(padded_d)])
    for k in range(_N_WINDOWS):
        hi = idx - _WINDOW_STEPS * k + 1
        lo = idx - _WINDOW_STEPS * (k + 1) + 1
        out[:, 9 + k] = (cs_d[hi] - cs_d[lo]) / _WINDOW_STEPS

    out[:, 17] = np.convolve(delivered, _INSULIN_KERNEL)[:n]
    out[:, 18] = np.convolve(carbs, _CARB_KERNEL)[:n]
    out[:, 19] = params.weight_kg
    cs_b = np.concatenate([[0.0], np.cumsum(basal)])
    counts = np.arange(n, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_basal = np.where(counts > 0, cs_b[:-1] / np.maximum(counts, 1.0), 0.0)
    out[:, 20] = mean_basal
    return out


def fit_normalization(states: np.ndarray) -> NormalizationRecord:
    return NormalizationRecord.fit(states)
