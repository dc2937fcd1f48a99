"""Acceptance suite: one test per criterion, desk scale.

Heavy artifacts (datasets, anchor policies, reward models, tuned
bundles) come from the session workspace cache; see conftest. Criteria
print a PASS/FAIL line each (visible with ``pytest -s`` or on failure).

Criteria A1-A14 cover the primary component; B1-B2 exercise the
sketching service contract end to end.
"""

import json

import numpy as np
import pytest

import paint.config as cfgmod
from paint.experiments import (
    GOALS,
    PairedReports,
    Scale,
    Workspace,
    demonstrator,
)
from paint.metrics import magni_risk
from paint.nn import Mlp
from paint.reward_learning import stratified_batches, stratum_of
from paint.safe_orl import action_to_norm, tune
from paint.simulator import run_episode

PATIENTS = ("adult", "adolescent", "child")
TARGET_LAMBDA = 5.0  # preference-strength dial used for target following
COMMON_GOAL_LAMBDA = {"raise_tir": 2.5, "lower_tbr": 2.5, "lower_cov": 1.0}


def _check(name: str, ok: bool, detail: str):
    print(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{name}: {detail}"


def _median_delta(ws, patient, pref, attr, seeds, lam=None, **tuned_kwargs):
    deltas = []
    for seed in seeds:
        bundle = ws.tuned(patient, pref, seed, lam=lam, **tuned_kwargs)
        rep = ws.evaluate(bundle, fault=tuned_kwargs.get("fault", "none"))
        deltas.append(
            PairedReports.median(rep.tuned, attr)
            - PairedReports.median(rep.priori, attr)
        )
    return float(np.median(deltas))


class TestA01MagniGeometry:
    def test_a01(self):
        from scipy.optimize import brentq

        from tests.test_metrics import MAGNI_ORACLE

        def deriv(g, h=1e-4):
            return (magni_risk(g + h) - magni_risk(g - h)) / (2 * h)

        g_star = brentq(deriv, 100.0, 200.0, xtol=1e-10)
        in_window = 135.0 <= g_star <= 143.0
        worst = max(
            abs(magni_risk(g) - expected) / expected for g, expected in MAGNI_ORACLE
        )
        _check(
            "A1",
            in_window and worst < 1e-9,
            f"minimum at {g_star:.3f} mg/dL, max rel err {worst:.2e} over 20 points",
        )


class TestA02GradientChecks:
    def test_a02(self):
        from tests.test_nn import finite_difference_check, mse_loss_and_grad

        rng = np.random.default_rng(17)
        worst = 0.0
        for dims, acts in (
            ([21, 256, 256, 1], ["relu", "relu", "tanh"]),
            ([22, 256, 256, 1], ["relu", "relu", "linear"]),
            ([22, 256, 256, 256, 1], ["relu", "relu", "relu", "linear"]),
        ):
            mlp = Mlp.create(dims, acts, seed=23)
            x = rng.normal(size=(8, dims[0]))
            y = rng.normal(size=(8, 1))
            worst = max(
                worst,
                finite_difference_check(mlp, x, mse_loss_and_grad(mlp, x, y), samples=10),
            )
        _check("A2", worst < 1e-4, f"max relative gradient error {worst:.2e}")


class TestA03ActivityCurves:
    def test_a03(self):
        from paint.features import CARB_CURVE, INSULIN_CURVE, activity

        ok = True
        details = []
        for curve, t_p in ((INSULIN_CURVE, 55.0), (CARB_CURVE, 40.0)):
            endpoint_zero = activity(curve, 0.0) == 0.0 and abs(
                activity(curve, curve.t_d)
            ) < 1e-15
            grid = np.arange(0.0, curve.t_d + 1.0)
            argmax = float(grid[int(np.argmax(activity(curve, grid)))])
            ok = ok and endpoint_zero and abs(argmax - t_p) <= 5.0
            details.append(f"peak {argmax:.0f} (want {t_p:.0f} +-5)")
        _check("A3", ok, "; ".join(details))


@pytest.mark.slow
class TestA04SafetyFloor:
    def test_a04(self, workspace):
        ws = workspace
        ds = ws.dataset("adult")
        priori = ws.priori("adult", 0)
        # adversarial model: maximal reward for maximal insulin
        ds.pref_reward = action_to_norm(ds.actions, ds.params.max_basal_u_per_min)
        try:
            result = tune(ds, priori.priori, 0.0, ws.td3, seed=0, norm=priori.norm)
        finally:
            ds.pref_reward = None
        rng = np.random.default_rng(0)
        idx = rng.choice(ds.n_samples, size=1000, replace=False)
        states = priori.norm.normalize(ds.states[idx])
        dev_norm = np.max(
            np.abs(result.actor.forward(states) - priori.priori.forward(states))
        )
        dev = dev_norm * ds.params.max_basal_u_per_min / 2.0
        _check("A4", dev < 1e-3, f"max action deviation {dev:.2e} U/min on 1000 states")


@pytest.mark.slow
class TestA05PrioriCompetitiveness:
    def test_a05(self, workspace):
        ws = workspace
        details = []
        ok = True
        for patient in PATIENTS:
            ratios = []
            for seed in ws.scale.seeds:
                bundle = ws.priori(patient, seed)
                rep = ws.evaluate(bundle, include_pid=True)
                priori_risk = float(np.mean([r.risk_total for r in rep.priori]))
                pid_risk = float(np.mean([r.risk_total for r in rep.pid]))
                ratios.append(priori_risk / pid_risk)
            ratio = float(np.median(ratios))
            ok = ok and ratio <= 1.1
            details.append(f"{patient}: {ratio:.3f}")
        _check("A5", ok, "risk ratio vs noise-free PID " + "; ".join(details))


@pytest.mark.slow
class TestA06TargetFollowing:
    def test_a06(self, workspace):
        ws = workspace
        medians = {}
        for target in (120.0, 160.0):
            means = []
            for seed in ws.scale.seeds:
                bundle = ws.tuned(
                    "adult", f"target:{target:g}", seed, lam=TARGET_LAMBDA
                )
                rep = ws.evaluate(bundle)
                means.append(PairedReports.median(rep.tuned, "mean_glucose"))
            medians[target] = float(np.median(means))
        ordered = medians[120.0] < medians[160.0]
        close = all(abs(medians[t] - t) <= 10.0 for t in (120.0, 160.0))
        _check(
            "A6",
            ordered and close,
            f"mean glucose 120-run {medians[120.0]:.1f}, 160-run {medians[160.0]:.1f}",
        )


@pytest.mark.slow
class TestA07CommonGoals:
    def test_a07(self, workspace):
        ws = workspace
        ok = True
        details = []
        for goal, (pref, attr, direction) in GOALS.items():
            wins = 0
            per_patient = []
            for patient in PATIENTS:
                delta = _median_delta(
                    ws, patient, pref, attr, ws.scale.seeds,
                    lam=COMMON_GOAL_LAMBDA[goal],
                )
                if delta * direction > 0.0:
                    wins += 1
                per_patient.append(f"{patient} {delta:+.2f}")
            ok = ok and wins >= 2
            details.append(f"{goal}[{pref}]: {wins}/3 ({', '.join(per_patient)})")
        _check("A7", ok, " | ".join(details))


@pytest.mark.slow
class TestA08MealtimeCaseStudy:
    def test_a08(self, workspace):
        delta = _median_delta(
            workspace, "adult", "mealtime", "post_meal_tir_4h", workspace.scale.seeds
        )
        _check("A8", delta >= 2.0, f"median post-meal 4h TIR change {delta:+.2f} points")


@pytest.mark.slow
class TestA09CompressionCaseStudy:
    def test_a09(self, workspace):
        ws = workspace
        basal_delta = _median_delta(
            ws, "adult", "compression", "post_event_basal_1h", ws.scale.seeds,
            fault="compression_low",
        )
        cov_delta = _median_delta(
            ws, "adult", "compression", "post_event_cov_8h", ws.scale.seeds,
            fault="compression_low",
        )
        _check(
            "A9",
            basal_delta > 0.0 and cov_delta <= -0.5,
            f"post-event basal {basal_delta:+.4f} U/min, 8h CoV {cov_delta:+.2f} points",
        )


@pytest.mark.slow
class TestA10SampleEfficiency:
    def test_a10(self, workspace):
        delta = _median_delta(
            workspace, "adult", "tir2", "tir_pct", workspace.scale.seeds, n_labels=1000
        )
        _check("A10", delta > 0.0, f"TIR change with 1000 labels {delta:+.2f} points")


@pytest.mark.slow
class TestA11CorruptionRobustness:
    def test_a11(self, workspace):
        ws = workspace
        ratios = []
        for seed in ws.scale.seeds:
            bundle = ws.tuned("adult", "tir2", seed, corrupt_fraction=0.8)
            rep = ws.evaluate(bundle)
            tuned = PairedReports.median(rep.tuned, "risk_total")
            priori = PairedReports.median(rep.priori, "risk_total")
            ratios.append(tuned / priori)
        ratio = float(np.median(ratios))
        _check(
            "A11",
            abs(ratio - 1.0) <= 0.2,
            f"risk ratio tuned/priori at 80% corruption {ratio:.3f}",
        )


@pytest.mark.slow
class TestA12LabelNoiseRobustness:
    def test_a12(self, workspace):
        ws = workspace
        ok = True
        details = []
        for goal, (pref, attr, direction) in GOALS.items():
            delta = _median_delta(
                ws, "adult", pref, attr, ws.scale.seeds,
                lam=COMMON_GOAL_LAMBDA[goal], noise_sigma_multiple=3.0,
            )
            good = delta * direction > 0.0
            ok = ok and good
            details.append(f"3s {pref}: {delta:+.2f}")
        ratios = []
        for seed in ws.scale.seeds:
            bundle = ws.tuned("adult", "tir2", seed, noise_sigma_multiple=10.0)
            rep = ws.evaluate(bundle)
            ratios.append(
                PairedReports.median(rep.tuned, "risk_total")
                / PairedReports.median(rep.priori, "risk_total")
            )
        ratio = float(np.median(ratios))
        ok = ok and abs(ratio - 1.0) <= 0.2
        details.append(f"10s risk ratio {ratio:.3f}")
        _check("A12", ok, " | ".join(details))


@pytest.mark.slow
class TestA13Determinism:
    def test_a13(self, tmp_path):
        from paint.reward_learning import RewardModelConfig
        from paint.safe_orl import Td3bcConfig

        def pipeline(root):
            ws = Workspace(
                root,
                scale=Scale(
                    episodes_per_patient=1,
                    n_labels=300,
                    seeds=(0,),
                    eval_repeats=1,
                    eval_days=2,
                ),
                td3_config=Td3bcConfig(epochs_pretrain=2, epochs_tune=2),
                reward_config=RewardModelConfig(max_epochs=3, min_labels=50, patience=3),
            )
            bundle = ws.tuned("adult", "tir2", 0)
            rep = ws.evaluate(bundle)
            rows = [
                {
                    "policy": name,
                    "reward": PairedReports.median(reports, "magni_total"),
                    "tir": PairedReports.median(reports, "tir_pct"),
                    "mean_g": PairedReports.median(reports, "mean_glucose"),
                }
                for name, reports in (("tuned", rep.tuned), ("priori", rep.priori))
            ]
            return ws.write_results("determinism", rows).read_bytes()

        a = pipeline(tmp_path / "run1")
        b = pipeline(tmp_path / "run2")
        _check("A13", a == b, f"result tables identical across reruns ({len(a)} bytes)")


class TestA14StratifiedSampler:
    def test_a14(self):
        rng = np.random.default_rng(3)
        rewards = np.concatenate(
            [
                rng.uniform(-1.0, -0.5, size=6000),
                rng.uniform(-0.1, 0.1, size=120),
                rng.uniform(0.8, 1.0, size=40),
            ]
        )
        k, batch_size = 10, 128
        strata = stratum_of(rewards, k)
        nonempty = np.unique(strata)
        gen = stratified_batches(rewards, k, batch_size, np.random.default_rng(5))

        counts_ok = True
        totals = np.zeros(k)
        n_batches = 10_000
        for _ in range(n_batches):
            counts = np.bincount(strata[next(gen)], minlength=k)
            if counts[nonempty].max() - counts[nonempty].min() > 1:
                counts_ok = False
            totals += counts
        share = totals[nonempty] / totals.sum()
        expected = 1.0 / nonempty.size
        freq_dev = float(np.max(np.abs(share - expected)) / expected)
        _check(
            "A14",
            counts_ok and freq_dev < 0.02,
            f"per-batch counts equal +-1; population-share deviation {freq_dev:.3%}",
        )


class TestB1SketchRoundTrip:
    def test_b1(self, micro_workspace):
        from fastapi.testclient import TestClient

        from paint.service import create_app

        ws = micro_workspace
        ws.dataset("adult")  # materialize episodes
        app = create_app(
            ws.root, patient_id="adult", scale=ws.scale,
            td3_config=ws.td3, reward_config=ws.reward_cfg,
        )
        client = TestClient(app)
        episode = client.get("/episodes").json()[0]["id"]

        # programmatic drag: piecewise-linear curve sampled on the 3-min grid
        steps = np.arange(100, 180)
        curve = np.clip(np.linspace(-1.0, 1.0, steps.size), -1.0, 1.0)
        batch = [
            {"episode_id": episode, "t": int(t), "reward": float(v)}
            for t, v in zip(steps, curve)
        ]
        assert client.post("/labels", json={"labels": batch}).status_code == 200
        stored = {
            (l["episode_id"], l["t"]): l["reward"]
            for l in client.get("/labels").json()
        }
        worst = max(
            abs(stored[(episode, int(t))] - float(v)) for t, v in zip(steps, curve)
        )
        _check("B1", worst < 1e-6, f"GET-after-POST max deviation {worst:.2e}")


class TestB2EndToEndParity:
    def test_b2(self, micro_workspace):
        from fastapi.testclient import TestClient

        from paint.reward_learning import read_labels, relabel, train_reward_model
        from paint.service import create_app

        ws = micro_workspace
        ds = ws.dataset("adult")
        app = create_app(
            ws.root, patient_id="adult", scale=ws.scale,
            td3_config=ws.td3, reward_config=ws.reward_cfg,
        )
        client = TestClient(app)
        episode = ds.trajectories[0].episode_id

        rng = np.random.default_rng(0)
        steps = np.arange(0, 400)
        curve = np.round(np.clip(np.sin(steps / 25.0), -1.0, 1.0), 6)
        batch = [
            {"episode_id": episode, "t": int(t), "reward": float(v)}
            for t, v in zip(steps, curve)
        ]
        assert client.post("/labels", json={"labels": batch}).status_code == 200
        job = client.post("/jobs/train-reward", json={"seed": 0}).json()
        app.state.service_state["jobs"].wait_idle()
        tune_job = client.post("/jobs/tune", json={"lambda": 2.5, "seed": 0}).json()
        app.state.service_state["jobs"].wait_idle()
        status = client.get(f"/jobs/{tune_job['job_id']}").json()
        assert status["status"] == "done", status
        service_report = client.get(f"/reports/{status['result']['bundle']}").json()

        # CLI-equivalent path: same labels file, same primitives, same seeds
        labels = read_labels(ws.root / "labels" / "service.jsonl")
        priori = ws.priori("adult", 0)
        model = train_reward_model(ds, labels, ws.reward_cfg, seed=0, norm=priori.norm)
        relabel(ds, model)
        result = tune(ds, priori.priori, 2.5, ws.td3, seed=0, norm=priori.norm)
        from paint.safe_orl import PolicyBundle

        bundle = PolicyBundle(
            priori=priori.priori,
            norm=priori.norm,
            max_basal_u_per_min=ds.params.max_basal_u_per_min,
            patient_id="adult",
            tuned=result.actor,
            lam=2.5,
        )
        rep = ws.evaluate(bundle)
        cli_tuned = {
            "tir_pct": PairedReports.median(rep.tuned, "tir_pct"),
            "mean_glucose": PairedReports.median(rep.tuned, "mean_glucose"),
            "risk_total": PairedReports.median(rep.tuned, "risk_total"),
        }
        worst = max(
            abs(service_report["tuned"][k] - v) for k, v in cli_tuned.items()
        )
        _check(
            "B2",
            worst < 1e-9,
            f"service vs library path metric deviation {worst:.2e}",
        )
