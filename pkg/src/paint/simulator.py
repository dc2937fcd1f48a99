"""Compartmental glucose-insulin patient simulator.

A minimal-model core (glucose kinetics driven by a remote insulin
action state) fed by two-compartment subcutaneous insulin absorption and
two-compartment gut carbohydrate absorption. Small enough to integrate
with fixed-step RK4 at 1-minute substeps, yet it reproduces the delays
that make closed-loop insulin dosing hard: subcutaneous insulin acts
over hours, meals peak after 60-120 minutes, and withholding all
insulin sends glucose climbing without bound.

Sensor effects (AR(1) noise, compression-low artifacts) live on the CGM
reading only and never feed back into the physiological state, so two
runs with the same seed have identical true-glucose series regardless
of fault injection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

# Global control timestep (min). The offline datasets, the feature
# windows and the reward-label grid all assume this resolution.
DT_MIN = 3.0
STEPS_PER_DAY = int(round(24 * 60 / DT_MIN))

# Plasma insulin elimination rate (1/min), shared across patients.
INSULIN_CLEARANCE_PER_MIN = 0.138

GLUCOSE_TERMINATION_LO = 10.0
GLUCOSE_TERMINATION_HI = 1000.0

_RK4_SUBSTEP_MIN = 1.0


class SimulationFault(RuntimeError):
    """Raised when the integrator produces a non-finite state."""


@dataclass(frozen=True)
class PatientParams:
    """One virtual patient.

    Rate constants are per minute; distribution volumes are per kg of
    body weight (insulin in L/kg, glucose in dL/kg). CR (g/U) and CF
    (mg/dL per U) parameterize the patient's bolus calculator.
    """

    id: str
    weight_kg: float
    basal_equilibrium_u_per_min: float
    fasting_glucose_mgdl: float
    insulin_sensitivity: float
    glucose_effectiveness: float
    insulin_action_rate: float
    t_max_insulin_min: float
    t_max_meal_min: float
    carb_bioavailability: float
    cr_g_per_u: float
    cf_mgdl_per_u: float
    distribution_volume_glucose: float = 1.6
    distribution_volume_insulin: float = 0.12

    def __post_init__(self):
        positives = {
            "weight_kg": self.weight_kg,
            "basal_equilibrium_u_per_min": self.basal_equilibrium_u_per_min,
            "fasting_glucose_mgdl": self.fasting_glucose_mgdl,
            "insulin_sensitivity": self.insulin_sensitivity,
            "glucose_effectiveness": self.glucose_effectiveness,
            "insulin_action_rate": self.insulin_action_rate,
            "t_max_insulin_min": self.t_max_insulin_min,
            "t_max_meal_min": self.t_max_meal_min,
            "cr_g_per_u": self.cr_g_per_u,
            "cf_mgdl_per_u": self.cf_mgdl_per_u,
            "distribution_volume_glucose": self.distribution_volume_glucose,
            "distribution_volume_insulin": self.distribution_volume_insulin,
        }
        for name, value in positives.items():
            if not value > 0.0:
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if not 0.0 < self.carb_bioavailability <= 1.0:
            raise ValueError("carb_bioavailability must be in (0, 1]")

    @property
    def basal_plasma_insulin_mu_per_l(self) -> float:
        # Plasma insulin at the basal-rate fixed point.
        return (
            self.basal_equilibrium_u_per_min
            * 1000.0
            / (
                INSULIN_CLEARANCE_PER_MIN
                * self.distribution_volume_insulin
                * self.weight_kg
            )
        )

    @property
    def max_basal_u_per_min(self) -> float:
        # Pump safety cap: five times the equilibrium basal rate.
        return 5.0 * self.basal_equilibrium_u_per_min


@dataclass
class SimState:
    plasma_glucose_mgdl: float
    remote_insulin_action: float
    sc_insulin_1: float
    sc_insulin_2: float
    plasma_insulin: float
    gut_carb_1: float
    gut_carb_2: float
    clock_min: float

    @classmethod
    def equilibrium(cls, params: PatientParams, glucose: float | None = None):
        s_eq = params.basal_equilibrium_u_per_min * params.t_max_insulin_min
        return cls(
            plasma_glucose_mgdl=(
                params.fasting_glucose_mgdl if glucose is None else glucose
            ),
            remote_insulin_action=0.0,
            sc_insulin_1=s_eq,
            sc_insulin_2=s_eq,
            plasma_insulin=params.basal_plasma_insulin_mu_per_l,
            gut_carb_1=0.0,
            gut_carb_2=0.0,
            clock_min=0.0,
        )


def _derivs(y, params: PatientParams, basal_u_per_min: float):
    g, x, s1, s2, i, q1, q2 = y
    t_i = params.t_max_insulin_min
    t_g = params.t_max_meal_min
    vi = params.distribution_volume_insulin * params.weight_kg
    vg = params.distribution_volume_glucose * params.weight_kg
    i_b = params.basal_plasma_insulin_mu_per_l

    ds1 = basal_u_per_min - s1 / t_i
    ds2 = (s1 - s2) / t_i
    di = (s2 / t_i) * 1000.0 / vi - INSULIN_CLEARANCE_PER_MIN * i
    dx = params.insulin_action_rate * (params.insulin_sensitivity * (i - i_b) - x)
    dq1 = -q1 / t_g
    dq2 = (q1 - q2) / t_g
    ra = (q2 / t_g) * 1000.0 / vg
    dg = (
        -params.glucose_effectiveness * (g - params.fasting_glucose_mgdl)
        - x * g
        + ra
    )
    return (dg, dx, ds1, ds2, di, dq1, dq2)


def step(
    state: SimState,
    params: PatientParams,
    basal_u_per_min: float,
    bolus_u: float = 0.0,
    carbs_g: float = 0.0,
    dt_min: float = DT_MIN,
) -> SimState:
    """Advance the patient one control step with fixed-step RK4.

    Bolus insulin and carbohydrates enter as impulses at the start of
    the step (into the first subcutaneous and gut compartments); the
    basal rate is held constant across the step.
    """
    if basal_u_per_min < 0 or bolus_u < 0 or carbs_g < 0 or dt_min <= 0:
        raise ValueError("simulator inputs must be non-negative, dt positive")

    y = [
        state.plasma_glucose_mgdl,
        state.remote_insulin_action,
        state.sc_insulin_1 + bolus_u,
        state.sc_insulin_2,
        state.plasma_insulin,
        state.gut_carb_1 + carbs_g * params.carb_bioavailability,
        state.gut_carb_2,
    ]

    n_sub = max(1, int(math.ceil(dt_min / _RK4_SUBSTEP_MIN)))
    h = dt_min / n_sub
    for _ in range(n_sub):
        k1 = _derivs(y, params, basal_u_per_min)
        y2 = [y[j] + 0.5 * h * k1[j] for j in range(7)]
        k2 = _derivs(y2, params, basal_u_per_min)
        y3 = [y[j] + 0.5 * h * k2[j] for j in range(7)]
        k3 = _derivs(y3, params, basal_u_per_min)
        y4 = [y[j] + h * k3[j] for j in range(7)]
        k4 = _derivs(y4, params, basal_u_per_min)
        for j in range(7):
            y[j] += (h / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])

    if not all(math.isfinite(v) for v in y):
        raise SimulationFault(
            f"non-finite simulator state at clock {state.clock_min:.0f} min"
        )

    return SimState(
        plasma_glucose_mgdl=y[0],
        remote_insulin_action=y[1],
        sc_insulin_1=max(y[2], 0.0),
        sc_insulin_2=max(y[3], 0.0),
        plasma_insulin=max(y[4], 0.0),
        gut_carb_1=max(y[5], 0.0),
        gut_carb_2=max(y[6], 0.0),
        clock_min=state.clock_min + dt_min,
    )


@dataclass(frozen=True)
class MealEvent:
    step_index: int
    carbs_g: float
    slot: int  # index into the schedule entries (0 = first meal of the day)


@dataclass
class MealSchedule:
    """Daily meal slots: (mean time-of-day min, std min, mean carbs g, std carbs g)."""

    entries: list[tuple[float, float, float, float]]

    def __post_init__(self):
        for mean_t, _, _, _ in self.entries:
            if not 0.0 <= mean_t < 1440.0:
                raise ValueError("meal times must lie in [0, 1440) minutes")

    @classmethod
    def default(cls) -> "MealSchedule":
        return cls(
            entries=[
                (8 * 60.0, 20.0, 50.0, 10.0),
                (12 * 60.0 + 30.0, 20.0, 60.0, 15.0),
                (18 * 60.0 + 30.0, 30.0, 70.0, 15.0),
            ]
        )

    def realize(self, days: int, rng: np.random.Generator) -> list[MealEvent]:
        """Jitter times/amounts per day; carbs clamped at zero."""
        events = []
        for day in range(days):
            for slot, (mean_t, std_t, mean_c, std_c) in enumerate(self.entries):
                t = mean_t + std_t * rng.standard_normal()
                t = min(max(t, 0.0), 1439.0)
                carbs = max(mean_c + std_c * rng.standard_normal(), 0.0)
                step_index = int((day * 1440.0 + t) / DT_MIN)
                events.append(MealEvent(step_index, carbs, slot))
        return sorted(events, key=lambda e: e.step_index)


@dataclass(frozen=True)
class FaultInjector:
    """Compression-low artifact model for the CGM channel.

    One potential event per night: with probability ``nightly_probability``
    an onset time is drawn inside the night window, the reading ramps
    down by a sampled depth over the drop duration and recovers over the
    rebound duration. Ranges are (lo, hi) bounds sampled per event.
    """

    mode: str = "none"  # "none" | "compression_low"
    nightly_probability: float = 0.3
    drop_depth_mgdl: tuple[float, float] = (30.0, 50.0)
    drop_duration_min: tuple[float, float] = (20.0, 40.0)
    rebound_duration_min: tuple[float, float] = (20.0, 40.0)
    night_window_min: tuple[float, float] = (0.0, 360.0)  # clock minutes

    def __post_init__(self):
        if self.mode not in ("none", "compression_low"):
            raise ValueError(f"unknown fault mode {self.mode!r}")

    def schedule_events(self, days: int, rng: np.random.Generator):
        """Returns [(onset_min, depth, drop_min, rebound_min), ...].

        The RNG is consumed identically whether or not events fire, and
        independently of anything the controller does, so paired runs
        stay aligned.
        """
        events = []
        for day in range(days):
            u = rng.uniform()
            onset_frac = rng.uniform()
            depth = rng.uniform(*self.drop_depth_mgdl)
            drop = rng.uniform(*self.drop_duration_min)
            rebound = rng.uniform(*self.rebound_duration_min)
            if self.mode != "compression_low" or u >= self.nightly_probability:
                continue
            lo, hi = self.night_window_min
            onset = day * 1440.0 + lo + onset_frac * (hi - lo)
            events.append((onset, depth, drop, rebound))
        return events

    @staticmethod
    def offset_at(events, t_min: float) -> float:
        """Signed CGM offset (<= 0) from any active event at time t."""
        total = 0.0
        for onset, depth, drop, rebound in events:
            if t_min < onset:
                continue
            u = t_min - onset
            if u <= drop:
                total -= depth * (u / drop)
            elif u <= drop + rebound:
                total -= depth * (1.0 - (u - drop) / rebound)
        return total


@dataclass
class CgmSensor:
    """AR(1)-noise CGM with optional compression-low events."""

    noise_std_mgdl: float = 2.0
    noise_corr: float = 0.7
    fault_injector: FaultInjector = field(default_factory=FaultInjector)
    _error: float = 0.0
    _events: list = field(default_factory=list)

    def start_episode(self, days: int, rng: np.random.Generator):
        self._error = 0.0
        self._events = self.fault_injector.schedule_events(days, rng)

    @property
    def events(self):
        return list(self._events)

    def read(self, state: SimState, rng: np.random.Generator) -> float:
        rho = self.noise_corr
        innovation = math.sqrt(max(1.0 - rho * rho, 0.0)) * self.noise_std_mgdl
        self._error = rho * self._error + innovation * rng.standard_normal()
        reading = (
            state.plasma_glucose_mgdl
            + self._error
            + FaultInjector.offset_at(self._events, state.clock_min)
        )
        return min(max(reading, 1.0), 1000.0)


def read_cgm(state: SimState, sensor: CgmSensor, rng: np.random.Generator) -> float:
    return sensor.read(state, rng)


class StepContext:
    """What a controller sees at each step: read-only history views."""

    __slots__ = ("index", "t_min", "clock_min", "glucose", "basal", "bolus", "carbs")

    def __init__(self, index, t_min, clock_min, glucose, basal, bolus, carbs):
        self.index = index
        self.t_min = t_min
        self.clock_min = clock_min
        self.glucose = glucose  # readings up to and including this step
        self.basal = basal  # past basal actions (length == index)
        self.bolus = bolus
        self.carbs = carbs


def run_episode(
    params: PatientParams,
    controller,
    schedule: MealSchedule | None = None,
    fault_injector: FaultInjector | None = None,
    days: int = 10,
    seed: int = 0,
    bolus_calculator=None,
    noise_std_mgdl: float = 2.0,
    noise_corr: float = 0.7,
    episode_id: str | None = None,
    patient_start_glucose: float | None = None,
):
    """Simulate one closed-loop episode and return a Trajectory.

    ``controller`` maps a StepContext to a basal rate (U/min); meal
    boluses come from ``bolus_calculator`` (defaults to the patient's
    calculator). Four independent RNG streams (init, meals, sensor,
    controller) are spawned from the seed so that sensor noise and meal
    patterns are identical across controllers under the same seed.
    """
    from .controllers import BolusCalculator
    from .datastore import Trajectory

    if days < 1:
        raise ValueError("days must be >= 1")
    schedule = schedule or MealSchedule.default()
    injector = fault_injector or FaultInjector()

    ss = np.random.SeedSequence(seed)
    init_rng, meal_rng, sensor_rng, ctrl_rng = [
        np.random.default_rng(child) for child in ss.spawn(4)
    ]

    if patient_start_glucose is None:
        start_g = params.fasting_glucose_mgdl + init_rng.uniform(-20.0, 20.0)
    else:
        start_g = patient_start_glucose
    state = SimState.equilibrium(params, glucose=start_g)

    sensor = CgmSensor(
        noise_std_mgdl=noise_std_mgdl,
        noise_corr=noise_corr,
        fault_injector=injector,
    )
    sensor.start_episode(days, sensor_rng)

    meals = {e.step_index: e for e in schedule.realize(days, meal_rng)}
    bolus_calc = bolus_calculator
    if bolus_calc is None:
        bolus_calc = BolusCalculator.for_patient(params)

    if hasattr(controller, "reset"):
        controller.reset(ctrl_rng)
    bolus_calc.reset()

    n_steps = days * STEPS_PER_DAY
    t = np.empty(n_steps)
    glucose = np.empty(n_steps)
    true_glucose = np.empty(n_steps)
    basal = np.empty(n_steps)
    bolus = np.empty(n_steps)
    carbs = np.empty(n_steps)

    terminated = False
    n_done = 0
    for i in range(n_steps):
        reading = sensor.read(state, sensor_rng)
        t[i] = i * DT_MIN
        glucose[i] = reading
        true_glucose[i] = state.plasma_glucose_mgdl

        ctx = StepContext(
            index=i,
            t_min=i * DT_MIN,
            clock_min=state.clock_min % 1440.0,
            glucose=glucose[: i + 1],
            basal=basal[:i],
            bolus=bolus[:i],
            carbs=carbs[:i],
        )
        a = float(controller(ctx))
        a = min(max(a, 0.0), params.max_basal_u_per_min)

        meal = meals.get(i)
        carbs_now = meal.carbs_g if meal is not None else 0.0
        bolus_now = 0.0
        if carbs_now > 0.0:
            bolus_now = bolus_calc.bolus(
                carbs_now, reading, carbs[:i], rng=ctrl_rng
            )

        basal[i] = a
        bolus[i] = bolus_now
        carbs[i] = carbs_now

        state = step(state, params, a, bolus_now, carbs_now)
        n_done = i + 1
        if not (
            GLUCOSE_TERMINATION_LO
            <= state.plasma_glucose_mgdl
            <= GLUCOSE_TERMINATION_HI
        ):
            terminated = True
            break

    fault_onsets = [int(onset / DT_MIN) for onset, *_ in sensor.events]
    return Trajectory(
        patient_id=params.id,
        episode_id=episode_id or f"{params.id}-{seed}",
        seed=seed,
        start_clock_min=0.0,
        t=t[:n_done].copy(),
        glucose=glucose[:n_done].copy(),
        basal=basal[:n_done].copy(),
        bolus=bolus[:n_done].copy(),
        carbs=carbs[:n_done].copy(),
        true_glucose=true_glucose[:n_done].copy(),
        terminated=terminated,
        fault_onsets_step=[s for s in fault_onsets if s < n_done],
        meal_slots={
            e.step_index: e.slot for e in meals.values() if e.step_index < n_done
        },
    )
