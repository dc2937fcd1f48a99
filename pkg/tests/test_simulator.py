"""Patient model behavior: equilibria, meals, sensor, episodes."""

import numpy as np
import pytest

from paint.config import load_patient, meal_schedule, patient_ids
from paint.controllers import ConstantRateController
from paint.simulator import (
    DT_MIN,
    CgmSensor,
    FaultInjector,
    MealSchedule,
    SimState,
    run_episode,
    step,
)


@pytest.fixture(params=patient_ids())
def params(request):
    return load_patient(request.param)


@pytest.fixture
def adult():
    return load_patient("adult")


class TestStep:
    def test_steady_state_drift_under_2mgdl_48h(self, params):
        s = SimState.equilibrium(params)
        g0 = s.plasma_glucose_mgdl
        for _ in range(2 * 480):
            s = step(s, params, params.basal_equilibrium_u_per_min)
        assert abs(s.plasma_glucose_mgdl - g0) < 2.0

    def test_basal_rate_holding_fasting_is_unique(self, adult):
        # neighbouring rates drift visibly within 48 h
        for factor in (0.9, 1.1):
            s = SimState.equilibrium(adult)
            g0 = s.plasma_glucose_mgdl
            for _ in range(2 * 480):
                s = step(s, adult, factor * adult.basal_equilibrium_u_per_min)
            assert abs(s.plasma_glucose_mgdl - g0) >= 2.0, f"factor {factor}"

    def test_decay_toward_fasting_from_above(self, params):
        s = SimState.equilibrium(params, glucose=params.fasting_glucose_mgdl + 60.0)
        prev = s.plasma_glucose_mgdl
        for _ in range(480):
            s = step(s, params, params.basal_equilibrium_u_per_min)
            assert s.plasma_glucose_mgdl <= prev + 1e-9
            prev = s.plasma_glucose_mgdl
        assert prev < params.fasting_glucose_mgdl + 10.0

    def test_meal_peak_window(self, params):
        s = SimState.equilibrium(params)
        g0 = s.plasma_glucose_mgdl
        s = step(s, params, params.basal_equilibrium_u_per_min, carbs_g=50.0)
        trace = [s.plasma_glucose_mgdl]
        for _ in range(120):
            s = step(s, params, params.basal_equilibrium_u_per_min)
            trace.append(s.plasma_glucose_mgdl)
        trace = np.array(trace)
        peak = int(np.argmax(trace))
        rise = trace[peak] - g0
        t_peak = (peak + 1) * DT_MIN
        assert 60.0 <= rise <= 160.0, f"{params.id}: rise {rise:.0f}"
        assert 60.0 <= t_peak <= 120.0, f"{params.id}: peak at {t_peak:.0f} min"

    def test_mass_nonnegativity(self, adult):
        rng = np.random.default_rng(0)
        s = SimState.equilibrium(adult)
        for _ in range(500):
            s = step(
                s,
                adult,
                rng.uniform(0, adult.max_basal_u_per_min),
                bolus_u=rng.uniform(0, 2.0) if rng.uniform() < 0.05 else 0.0,
                carbs_g=rng.uniform(0, 60.0) if rng.uniform() < 0.05 else 0.0,
            )
            for mass in (
                s.sc_insulin_1,
                s.sc_insulin_2,
                s.plasma_insulin,
                s.gut_carb_1,
                s.gut_carb_2,
            ):
                assert mass >= 0.0
            assert s.plasma_glucose_mgdl > 0.0

    def test_more_insulin_weakly_lower_glucose(self, params):
        sa = SimState.equilibrium(params)
        sb = SimState.equilibrium(params)
        sb = step(sb, params, params.basal_equilibrium_u_per_min, bolus_u=1.0)
        sa = step(sa, params, params.basal_equilibrium_u_per_min)
        for _ in range(480):
            sa = step(sa, params, params.basal_equilibrium_u_per_min)
            sb = step(sb, params, params.basal_equilibrium_u_per_min)
            assert sb.plasma_glucose_mgdl <= sa.plasma_glucose_mgdl + 1e-9

    def test_invalid_inputs_rejected(self, adult):
        s = SimState.equilibrium(adult)
        with pytest.raises(ValueError):
            step(s, adult, -0.01)
        with pytest.raises(ValueError):
            step(s, adult, 0.0, bolus_u=-1.0)


class TestCgm:
    def test_noise_free_reads_true_glucose(self, adult):
        sensor = CgmSensor(noise_std_mgdl=0.0)
        sensor.start_episode(1, np.random.default_rng(0))
        s = SimState.equilibrium(adult, glucose=142.0)
        assert sensor.read(s, np.random.default_rng(1)) == 142.0

    def test_active_compression_full_depth(self, adult):
        sensor = CgmSensor(noise_std_mgdl=0.0)
        # one event at full depth: onset 0, depth 40, drop 30, rebound 30
        sensor._events = [(0.0, 40.0, 30.0, 30.0)]
        s = SimState.equilibrium(adult, glucose=140.0)
        s.clock_min = 30.0  # exactly at the bottom of the ramp
        assert sensor.read(s, np.random.default_rng(0)) == pytest.approx(100.0)

    def test_compression_event_fires_delta_trigger(self, adult):
        # |g_t - g_{t-5 steps}| > 15 mg/dL somewhere during the drop
        sensor = CgmSensor(noise_std_mgdl=0.0)
        sensor._events = [(30.0, 40.0, 20.0, 30.0)]
        s = SimState.equilibrium(adult, glucose=140.0)
        readings = []
        rng = np.random.default_rng(0)
        for i in range(40):
            s.clock_min = i * DT_MIN
            readings.append(sensor.read(s, rng))
        readings = np.array(readings)
        deltas = np.abs(readings[5:] - readings[:-5])
        assert np.max(deltas) > 15.0

    def test_reading_clamped(self, adult):
        sensor = CgmSensor(noise_std_mgdl=0.0)
        sensor._events = [(0.0, 500.0, 10.0, 10.0)]
        s = SimState.equilibrium(adult, glucose=30.0)
        s.clock_min = 10.0
        assert sensor.read(s, np.random.default_rng(0)) == 1.0


class TestRunEpisode:
    def test_ten_day_run_has_4800_samples(self, adult):
        traj = run_episode(
            adult,
            ConstantRateController(adult.basal_equilibrium_u_per_min),
            days=10,
            seed=4,
        )
        assert len(traj) == 4800
        assert not traj.terminated

    def test_zero_insulin_terminates_high(self, adult):
        traj = run_episode(adult, ConstantRateController(0.0), days=10, seed=4)
        assert traj.terminated
        assert len(traj) < 4800
        assert traj.true_glucose[-1] > 500.0

    def test_same_seed_bit_identical(self, adult):
        mk = lambda: run_episode(
            adult,
            ConstantRateController(adult.basal_equilibrium_u_per_min),
            days=3,
            seed=77,
        )
        a, b = mk(), mk()
        for field in ("t", "glucose", "basal", "bolus", "carbs", "true_glucose"):
            assert np.array_equal(getattr(a, field), getattr(b, field)), field

    def test_fault_injection_leaves_true_glucose_unchanged(self, adult):
        mk = lambda mode: run_episode(
            adult,
            ConstantRateController(adult.basal_equilibrium_u_per_min),
            fault_injector=FaultInjector(mode=mode, nightly_probability=1.0),
            days=3,
            seed=5,
        )
        clean, faulty = mk("none"), mk("compression_low")
        assert np.array_equal(clean.true_glucose, faulty.true_glucose)
        assert faulty.fault_onsets_step, "expected at least one nightly event"
        assert not np.array_equal(clean.glucose, faulty.glucose)

    def test_termination_uses_true_glucose_not_cgm(self, adult):
        # huge sensor dropout must not terminate the episode
        traj = run_episode(
            adult,
            ConstantRateController(adult.basal_equilibrium_u_per_min),
            fault_injector=FaultInjector(
                mode="compression_low",
                nightly_probability=1.0,
                drop_depth_mgdl=(200.0, 200.0),
            ),
            days=2,
            seed=6,
        )
        assert not traj.terminated

    def test_days_validation(self, adult):
        with pytest.raises(ValueError):
            run_episode(adult, ConstantRateController(0.0), days=0, seed=0)


class TestMealSchedule:
    def test_realize_is_seeded_and_clamped(self):
        sched = MealSchedule(entries=[(480.0, 30.0, 5.0, 20.0)])
        a = sched.realize(30, np.random.default_rng(9))
        b = sched.realize(30, np.random.default_rng(9))
        assert [(e.step_index, e.carbs_g) for e in a] == [
            (e.step_index, e.carbs_g) for e in b
        ]
        assert all(e.carbs_g >= 0.0 for e in a)

    def test_bad_time_rejected(self):
        with pytest.raises(ValueError):
            MealSchedule(entries=[(1500.0, 1.0, 10.0, 1.0)])

    def test_patient_schedules_load(self):
        for pid in patient_ids():
            sched = meal_schedule(pid)
            assert len(sched.entries) == 3
