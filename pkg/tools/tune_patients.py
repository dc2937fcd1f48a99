#!/usr/bin/env python3
"""Fix the virtual-patient cohort parameters and PID gains offline.

For each cohort member this script:
  1. scales insulin sensitivity until a 1 U bolus from equilibrium
     drops glucose by the cohort's correction factor (CF),
  2. scales carbohydrate bioavailability until a 50 g unbolused meal
     peaks around +105 mg/dL (inside the +60..160 window, 60-120 min),
  3. picks the carb ratio (CR) whose meal bolus minimizes post-meal
     Magni risk without dipping below 75 mg/dL,
  4. grid-searches PID gains minimizing mean Magni risk over a
     noise-free ten-day closed-loop run,
then re-verifies the behavioural invariants and rewrites
src/paint/patients.yaml. Run from the repository root:

    python3 tools/tune_patients.py
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from paint.controllers import BolusCalculator, BolusConfig, PidConfig, PidController
from paint.metrics import magni_risk
from paint.simulator import DT_MIN, MealSchedule, PatientParams, SimState, step, run_episode

OUT_PATH = Path(__file__).resolve().parents[1] / "src" / "paint" / "patients.yaml"

# Structural starting points per cohort. Sensitivity and bioavailability
# are overwritten by the calibration below.
BASE = {
    "adult": dict(
        weight_kg=70.0,
        basal_equilibrium_u_per_min=0.015,
        fasting_glucose_mgdl=120.0,
        insulin_sensitivity=4.0e-4,
        glucose_effectiveness=0.003,
        insulin_action_rate=0.02,
        t_max_insulin_min=55.0,
        t_max_meal_min=25.0,
        carb_bioavailability=0.45,
        cr_g_per_u=15.0,
        cf_mgdl_per_u=45.0,
    ),
    "adolescent": dict(
        weight_kg=50.0,
        basal_equilibrium_u_per_min=0.012,
        fasting_glucose_mgdl=130.0,
        insulin_sensitivity=4.0e-4,
        glucose_effectiveness=0.003,
        insulin_action_rate=0.02,
        t_max_insulin_min=50.0,
        t_max_meal_min=24.0,
        carb_bioavailability=0.4,
        cr_g_per_u=12.0,
        cf_mgdl_per_u=55.0,
    ),
    "child": dict(
        weight_kg=30.0,
        basal_equilibrium_u_per_min=0.008,
        fasting_glucose_mgdl=140.0,
        insulin_sensitivity=5.0e-4,
        glucose_effectiveness=0.003,
        insulin_action_rate=0.02,
        t_max_insulin_min=45.0,
        t_max_meal_min=22.0,
        carb_bioavailability=0.3,
        cr_g_per_u=22.0,
        cf_mgdl_per_u=90.0,
    ),
}

TARGET_CF = {"adult": 45.0, "adolescent": 55.0, "child": 90.0}
TARGET_MEAL_PEAK = 105.0
PID_TARGET_MGDL = 120.0  # commercial-controller style setpoint

# Daily meals: (mean clock min, std min, mean carbs g, std carbs g).
# Youth cohorts eat less but far less regularly.
MEALS = {
    "adult": [(480.0, 20.0, 50.0, 10.0), (750.0, 20.0, 60.0, 15.0), (1110.0, 30.0, 70.0, 15.0)],
    "adolescent": [(480.0, 40.0, 45.0, 15.0), (750.0, 40.0, 55.0, 16.0), (1110.0, 45.0, 60.0, 18.0)],
    "child": [(480.0, 35.0, 30.0, 10.0), (750.0, 35.0, 40.0, 12.0), (1110.0, 40.0, 45.0, 12.0)],
}


def simulate_open_loop(params, hours, bolus_u=0.0, carbs_g=0.0):
    s = SimState.equilibrium(params)
    g = [s.plasma_glucose_mgdl]
    s = step(s, params, params.basal_equilibrium_u_per_min, bolus_u, carbs_g)
    g.append(s.plasma_glucose_mgdl)
    for _ in range(int(hours * 60 / DT_MIN) - 1):
        s = step(s, params, params.basal_equilibrium_u_per_min)
        g.append(s.plasma_glucose_mgdl)
    return np.array(g)


def measured_cf(params) -> float:
    g = simulate_open_loop(params, hours=8, bolus_u=1.0)
    return float(g[0] - g.min())


def meal_response(params, carbs=50.0):
    g = simulate_open_loop(params, hours=6, carbs_g=carbs)
    peak = int(np.argmax(g))
    return float(g[peak] - g[0]), peak * DT_MIN


def calibrate(pid_space, patient_id, base) -> tuple[dict, dict]:
    vals = dict(base)

    for _ in range(6):
        params = PatientParams(id=patient_id, **vals)
        cf = measured_cf(params)
        vals["insulin_sensitivity"] *= TARGET_CF[patient_id] / cf
    params = PatientParams(id=patient_id, **vals)
    vals["cf_mgdl_per_u"] = round(measured_cf(params), 1)

    for _ in range(6):
        params = PatientParams(id=patient_id, **vals)
        rise, _ = meal_response(params)
        vals["carb_bioavailability"] = min(
            vals["carb_bioavailability"] * TARGET_MEAL_PEAK / rise, 1.0
        )
    vals["carb_bioavailability"] = round(vals["carb_bioavailability"], 4)
    vals["insulin_sensitivity"] = float(f"{vals['insulin_sensitivity']:.5g}")

    params = PatientParams(id=patient_id, **vals)
    rise, t_peak = meal_response(params)
    print(f"  CF={vals['cf_mgdl_per_u']} meal peak +{rise:.0f} @ {t_peak:.0f} min")
    assert 60.0 <= rise <= 160.0, rise
    assert 60.0 <= t_peak <= 120.0, t_peak

    vals["cr_g_per_u"] = tune_cr(params, MEALS[patient_id][1][2])
    params = PatientParams(id=patient_id, **vals)
    gains = tune_pid(params, pid_space)
    return vals, gains


def tune_cr(params, meal_carbs: float) -> float:
    best_cr, best_cost = None, np.inf
    for cr in np.arange(4.0, 80.0, 1.0):
        s = SimState.equilibrium(params)
        bolus = meal_carbs / cr
        s = step(s, params, params.basal_equilibrium_u_per_min, bolus, meal_carbs)
        g = []
        for _ in range(int(8 * 60 / DT_MIN)):
            s = step(s, params, params.basal_equilibrium_u_per_min)
            g.append(s.plasma_glucose_mgdl)
        g = np.array(g)
        if g.min() < 75.0:
            continue
        cost = magni_risk(g).mean()
        if cost < best_cost:
            best_cr, best_cost = float(cr), cost
    assert best_cr is not None
    return best_cr


def closed_loop_risk(params, gains, seed=1234, days=10):
    schedule = MealSchedule(entries=[tuple(e) for e in MEALS[params.id]])
    pid = PidController(
        PidConfig(
            k_p=gains["k_p"],
            k_i=gains["k_i"],
            k_d=gains["k_d"],
            g_targ_mgdl=gains["g_targ_mgdl"],
            max_basal_u_per_min=params.max_basal_u_per_min,
            param_noise_std=0.0,
            action_ou_sigma_frac=0.0,
        )
    )
    traj = run_episode(
        params,
        pid,
        schedule=schedule,
        days=days,
        seed=seed,
        noise_std_mgdl=0.0,
        patient_start_glucose=params.fasting_glucose_mgdl,
    )
    if traj.terminated:
        return np.inf, traj
    return float(magni_risk(traj.glucose).mean()), traj


def tune_pid(params, space) -> dict:
    """Lowest-risk gains among those that actually track the setpoint.

    Tracking (mean glucose within 5 mg/dL of target) is required first;
    a benchmark controller that ignores its own setpoint is useless for
    the target-sweep experiments.
    """
    best, best_cost, best_err = None, np.inf, np.inf
    for k_p in space["k_p"]:
        for k_i in space["k_i"]:
            for k_d in space["k_d"]:
                gains = {
                    "k_p": k_p,
                    "k_i": k_i,
                    "k_d": k_d,
                    "g_targ_mgdl": PID_TARGET_MGDL,
                }
                cost, traj = closed_loop_risk(params, gains)
                if not np.isfinite(cost):
                    continue
                err = abs(float(np.mean(traj.glucose)) - PID_TARGET_MGDL)
                tracked = err <= 5.0
                if tracked and cost < best_cost:
                    best, best_cost, best_err = gains, cost, err
                elif best is None or (not np.isfinite(best_cost) and err < best_err):
                    if best is None or err < best_err:
                        best, best_err = gains, err
    cost, traj = closed_loop_risk(params, best)
    g = np.asarray(traj.glucose)
    tir = 100.0 * np.mean((g >= 70) & (g <= 180))
    tbr = 100.0 * np.mean(g < 70)
    print(
        f"  PID kp={best['k_p']:.2e} ki={best['k_i']:.2e} kd={best['k_d']:.2e}"
        f" risk={cost:.2f} mean_g={np.mean(g):.0f} TIR={tir:.1f}% TBR={tbr:.2f}%"
    )
    return best


def pick_demo_target(patient_id, params, gains) -> float:
    """Lower the demonstrator setpoint until the noisy closed loop shows
    clinically typical mild hypoglycemia exposure (median TBR 0.5-4 %)."""
    schedule = MealSchedule(entries=[tuple(e) for e in MEALS[patient_id]])
    for targ in np.arange(PID_TARGET_MGDL, 99.0, -2.5):
        tbrs = []
        ok = True
        for seed in range(3):
            pid = PidController(
                PidConfig(
                    k_p=gains["k_p"],
                    k_i=gains["k_i"],
                    k_d=gains["k_d"],
                    g_targ_mgdl=float(targ),
                    max_basal_u_per_min=params.max_basal_u_per_min,
                )
            )
            traj = run_episode(params, pid, schedule=schedule, days=10, seed=seed)
            if traj.terminated:
                ok = False
                break
            g = np.asarray(traj.glucose)
            tbrs.append(100.0 * np.mean(g < 70.0))
        if ok and 0.5 <= float(np.median(tbrs)) <= 4.0:
            return float(targ)
    return PID_TARGET_MGDL


def verify(patient_id, vals, gains):
    params = PatientParams(id=patient_id, **vals)

    g = simulate_open_loop(params, hours=48)
    assert abs(g[-1] - g[0]) < 2.0, "fasting equilibrium drift"

    s = SimState.equilibrium(params)
    hit = False
    for _ in range(10 * 480):
        s = step(s, params, 0.0)
        if s.plasma_glucose_mgdl > 1000.0:
            hit = True
            break
    assert hit, "zero insulin must exceed 1000 mg/dL within 10 days"

    # demonstrator with noise should stay alive and show a little TBR
    pid = PidController(
        PidConfig(
            k_p=gains["k_p"],
            k_i=gains["k_i"],
            k_d=gains["k_d"],
            g_targ_mgdl=gains["g_targ_mgdl"],
            max_basal_u_per_min=params.max_basal_u_per_min,
        )
    )
    schedule = MealSchedule(entries=[tuple(e) for e in MEALS[patient_id]])
    tbrs, tirs = [], []
    for seed in range(3):
        traj = run_episode(params, pid, schedule=schedule, days=10, seed=seed)
        assert not traj.terminated, f"noisy demonstrator terminated (seed {seed})"
        g = np.asarray(traj.glucose)
        tirs.append(100.0 * np.mean((g >= 70) & (g <= 180)))
        tbrs.append(100.0 * np.mean(g < 70))
    print(
        f"  demonstrator: TIR {np.median(tirs):.1f}% TBR {np.median(tbrs):.2f}%"
    )


def emit(all_vals, all_gains):
    import yaml

    doc = {"version": 1, "patients": {}}
    for pid_name, vals in all_vals.items():
        entry = {k: v for k, v in vals.items()}
        entry["meals"] = [list(e) for e in MEALS[pid_name]]
        entry["pid"] = dict(all_gains[pid_name])
        doc["patients"][pid_name] = entry
    header = (
        "# Virtual patient cohort: median-by-weight adult, adolescent and child.\n"
        "# Values were fixed offline by tools/tune_patients.py so that each patient\n"
        "# (a) holds fasting glucose at the stated basal rate, (b) shows a 50 g meal\n"
        "# peak of +60..160 mg/dL at 60-120 min, (c) climbs past 1000 mg/dL without\n"
        "# insulin, and (d) has PID gains minimizing mean Magni risk over a\n"
        "# noise-free ten-day run subject to tracking the setpoint. Do not edit by\n"
        "# hand; regenerate with the script.\n"
    )
    OUT_PATH.write_text(header + yaml.safe_dump(doc, sort_keys=False))
    print(f"wrote {OUT_PATH}")


def main():
    pid_space = {
        "k_p": [5e-5, 1e-4, 2e-4, 4e-4, 8e-4],
        "k_i": [0.0, 1e-7, 5e-7, 2e-6],
        "k_d": [0.0, 1e-3, 4e-3, 1.6e-2],
    }
    all_vals, all_gains = {}, {}
    for patient_id, base in BASE.items():
        print(f"[{patient_id}]")
        vals, gains = calibrate(pid_space, patient_id, base)
        params = PatientParams(id=patient_id, **vals)
        gains["g_targ_mgdl"] = pick_demo_target(patient_id, params, gains)
        print(f"  demonstrator setpoint: {gains['g_targ_mgdl']}")
        verify(patient_id, vals, gains)
        all_vals[patient_id] = vals
        all_gains[patient_id] = gains
    emit(all_vals, all_gains)


if __name__ == "__main__":
    main()
