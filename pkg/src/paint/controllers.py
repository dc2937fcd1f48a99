"""Demonstrator dosing policies: PID basal control and a bolus calculator.

The PID controller acts on CGM error with all three terms oriented so
that glucose above target increases insulin. Per-episode Gaussian
perturbation of the gains plus Ornstein-Uhlenbeck action noise provide
the behavioural diversity the offline datasets need. The bolus
calculator covers announced meals and adds a correction dose when no
carbohydrates were logged recently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simulator import DT_MIN, PatientParams


@dataclass
class PidConfig:
    k_p: float
    k_i: float
    k_d: float
    g_targ_mgdl: float
    max_basal_u_per_min: float
    param_noise_std: float = 0.05
    action_ou_theta: float = 0.15
    action_ou_sigma_frac: float = 0.02  # fraction of max_basal
    integral_clamp: float = 30000.0  # mg/dL * steps

    def __post_init__(self):
        if not 100.0 <= self.g_targ_mgdl <= 200.0:
            raise ValueError("g_targ must lie in [100, 200] mg/dL")
        if self.max_basal_u_per_min <= 0:
            raise ValueError("max_basal must be positive")

    @classmethod
    def for_patient(
        cls, params: PatientParams, gains: dict | None = None, **overrides
    ) -> "PidConfig":
        from .config import pid_gains

        g = dict(gains or pid_gains(params.id))
        g.update(overrides)
        return cls(
            k_p=g["k_p"],
            k_i=g["k_i"],
            k_d=g["k_d"],
            g_targ_mgdl=g.get("g_targ_mgdl", 130.0),
            max_basal_u_per_min=params.max_basal_u_per_min,
            param_noise_std=g.get("param_noise_std", 0.05),
            action_ou_theta=g.get("action_ou_theta", 0.15),
            action_ou_sigma_frac=g.get("action_ou_sigma_frac", 0.02),
            integral_clamp=g.get("integral_clamp", 30000.0),
        )


class PidController:
    """Stateful PID over the glucose reading history.

    a_t = k_p (g_t - g_targ) + k_i * clamp(sum(g - g_targ)) + k_d (g_t - g_{t-1})

    Gains are perturbed once per episode by multiplicative Gaussian
    noise; an OU process adds slowly-varying action noise. With both
    noise sources disabled the controller is a pure function of the
    glucose history.
    """

    def __init__(self, config: PidConfig):
        self.config = config
        self._kp = config.k_p
        self._ki = config.k_i
        self._kd = config.k_d
        self._integral = 0.0
        self._ou = 0.0
        self._rng: np.random.Generator | None = None

    def reset(self, rng: np.random.Generator | None = None):
        cfg = self.config
        self._integral = 0.0
        self._ou = 0.0
        self._rng = rng
        if rng is not None and cfg.param_noise_std > 0.0:
            factors = 1.0 + cfg.param_noise_std * rng.standard_normal(3)
            factors = np.clip(factors, 0.1, None)
            self._kp = cfg.k_p * factors[0]
            self._ki = cfg.k_i * factors[1]
            self._kd = cfg.k_d * factors[2]
        else:
            self._kp, self._ki, self._kd = cfg.k_p, cfg.k_i, cfg.k_d

    def __call__(self, ctx) -> float:
        return self.action(ctx.glucose)

    def action(self, glucose_history: np.ndarray) -> float:
        g = np.asarray(glucose_history, dtype=np.float64)
        if g.size < 1:
            raise ValueError("PID needs at least one glucose reading")
        cfg = self.config
        err = g[-1] - cfg.g_targ_mgdl
        self._integral = min(
            max(self._integral + err, -cfg.integral_clamp), cfg.integral_clamp
        )
        deriv = g[-1] - g[-2] if g.size >= 2 else 0.0

        a = self._kp * err + self._ki * self._integral + self._kd * deriv

        if self._rng is not None and cfg.action_ou_sigma_frac > 0.0:
            sigma = cfg.action_ou_sigma_frac * cfg.max_basal_u_per_min
            self._ou += -cfg.action_ou_theta * self._ou + sigma * float(
                self._rng.standard_normal()
            )
            a += self._ou

        return min(max(a, 0.0), cfg.max_basal_u_per_min)


def pid_action(
    glucose_history, config: PidConfig, rng: np.random.Generator | None = None
) -> float:
    """One-shot PID evaluation (fresh integral state)."""
    ctrl = PidController(config)
    ctrl.reset(rng)
    return ctrl.action(glucose_history)


@dataclass
class BolusConfig:
    cr_g_per_u: float
    cf_mgdl_per_u: float
    g_targ_mgdl: float = 130.0
    carb_lookback_steps: int = 60  # 3 hours at 3-min steps
    carb_estimate_error_frac: float = 0.2

    def __post_init__(self):
        if self.cr_g_per_u <= 0 or self.cf_mgdl_per_u <= 0:
            raise ValueError("CR and CF must be positive")
        if not 0.0 <= self.carb_estimate_error_frac <= 0.5:
            raise ValueError("carb estimate error fraction must be in [0, 0.5]")


class BolusCalculator:
    """Mealtime dose: carbs over CR, plus a correction when no recent carbs.

    B = c_hat / CR + [no carbs in last N steps] * (g - g_targ) / CF
    with c_hat = carbs * (1 + u), u ~ Uniform(-e, +e). Clamped at zero.
    """

    def __init__(self, config: BolusConfig):
        self.config = config

    @classmethod
    def for_patient(cls, params: PatientParams, **overrides) -> "BolusCalculator":
        cfg = BolusConfig(
            cr_g_per_u=params.cr_g_per_u,
            cf_mgdl_per_u=params.cf_mgdl_per_u,
            **overrides,
        )
        return cls(cfg)

    def reset(self):
        pass

    def bolus(
        self,
        carbs_g: float,
        g_mgdl: float,
        recent_carbs,
        rng: np.random.Generator | None = None,
    ) -> float:
        if carbs_g < 0:
            raise ValueError("carbs must be non-negative")
        cfg = self.config
        c_hat = carbs_g
        if rng is not None and cfg.carb_estimate_error_frac > 0.0:
            u = rng.uniform(-cfg.carb_estimate_error_frac, cfg.carb_estimate_error_frac)
            c_hat = carbs_g * (1.0 + u)

        recent = np.asarray(recent_carbs, dtype=np.float64)
        window = recent[-cfg.carb_lookback_steps :] if recent.size else recent
        no_recent_carbs = not np.any(window > 0.0)

        dose = c_hat / cfg.cr_g_per_u
        if no_recent_carbs:
            dose += (g_mgdl - cfg.g_targ_mgdl) / cfg.cf_mgdl_per_u
        return max(dose, 0.0)


def bolus(carbs_g, g_mgdl, recent_carbs, config: BolusConfig, rng=None) -> float:
    return BolusCalculator(config).bolus(carbs_g, g_mgdl, recent_carbs, rng=rng)


class ConstantRateController:
    """Fixed basal rate; the zero-rate variant drives termination tests."""

    def __init__(self, rate_u_per_min: float):
        if rate_u_per_min < 0:
            raise ValueError("rate must be non-negative")
        self.rate = rate_u_per_min

    def reset(self, rng=None):
        pass

    def __call__(self, ctx) -> float:
        return self.rate
