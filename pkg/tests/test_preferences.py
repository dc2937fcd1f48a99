"""Preference strategy formulas and label simulation."""

import numpy as np
import pytest

from paint.config import load_patient
from paint.datastore import Dataset, Trajectory
from paint.metrics import magni_risk
from paint.preferences import (
    SampleBatch,
    auto_label,
    build_sample_batch,
    contiguous_label_indices,
    evaluate_raw,
    normalize_labels,
    preference_names,
)


def simple_batch(glucose, action=None, d30=None, d15=None, clock=None, windows=()):
    g = np.asarray(glucose, dtype=float)
    z = np.zeros_like(g)
    return SampleBatch(
        glucose=g,
        action=np.asarray(action, dtype=float) if action is not None else z.copy(),
        delta_g_30min=np.asarray(d30, dtype=float) if d30 is not None else z.copy(),
        delta_g_15min=np.asarray(d15, dtype=float) if d15 is not None else z.copy(),
        clock_min=np.asarray(clock, dtype=float) if clock is not None else z.copy(),
        mean_glucose=float(g.mean()),
        meal_windows=list(windows),
    )


class TestFormulas:
    def test_tir2_range_indicator(self):
        vals = evaluate_raw("tir2", simple_batch([100.0, 200.0, 70.0, 71.0, 179.0]))
        assert vals.tolist() == [1.0, 0.0, 0.0, 1.0, 1.0]

    def test_tir1_peak_at_125(self):
        vals = evaluate_raw("tir1", simple_batch([125.0, 120.0, 130.0]))
        assert vals[0] == 0.0
        assert vals[0] == max(vals)
        assert vals[1] == -(5.0**4)

    def test_tir3_is_action(self):
        vals = evaluate_raw("tir3", simple_batch([120.0, 120.0], action=[0.01, 0.05]))
        assert vals.tolist() == [0.01, 0.05]
        assert vals[1] > vals[0]  # increasing in the action

    def test_tbr1_squared_risk_penalty(self):
        g = np.array([50.0, 120.0])
        vals = evaluate_raw("tbr1", simple_batch(g))
        assert vals[0] == pytest.approx(-magni_risk(50.0) ** 2)
        assert vals[0] < vals[1] <= 0.0

    def test_tbr2_threshold(self):
        vals = evaluate_raw("tbr2", simple_batch([69.0, 70.0, 71.0]))
        assert vals.tolist() == [0.0, 0.0, 1.0]

    def test_tbr3_decreasing_in_action(self):
        vals = evaluate_raw("tbr3", simple_batch([120.0, 120.0], action=[0.01, 0.05]))
        assert vals[1] < vals[0]

    def test_cov1_unimodal_at_144(self):
        g = np.linspace(100.0, 190.0, 91)
        vals = evaluate_raw("cov1", simple_batch(g))
        peak = g[int(np.argmax(vals))]
        assert peak == pytest.approx(144.0)
        assert np.all(np.diff(vals[g < 144.0]) > 0)
        assert np.all(np.diff(vals[g > 144.0]) < 0)

    def test_cov2_piecewise_with_hypo_floor(self):
        batch = simple_batch([140.0, 100.0, 60.0, 180.0])
        vals = evaluate_raw("cov2", batch)
        gbar = batch.mean_glucose
        dev_sq_max = max((np.array([140, 100, 60, 180.0]) - gbar) ** 2)
        assert vals[0] == pytest.approx(-((140.0 - gbar) ** 2))
        assert vals[2] == pytest.approx(-dev_sq_max)  # hypo gets the worst value

    def test_cov3_symmetric_in_delta(self):
        vals = evaluate_raw("cov3", simple_batch([120.0] * 3, d30=[0.0, -20.0, 20.0]))
        assert vals[0] == 0.0
        assert vals[1] == vals[2] == -20.0

    def test_mealtime_zero_outside_windows(self):
        batch = simple_batch(
            [120.0] * 4,
            action=[0.05] * 4,
            clock=[100.0, 360.0, 400.0, 800.0],
            windows=[(360.0, 480.0)],
        )
        vals = evaluate_raw("mealtime", batch)
        assert vals[0] == 0.0 and vals[3] == 0.0
        assert vals[1] == pytest.approx(0.05**2)
        assert vals[2] == pytest.approx(0.05**2)

    def test_compression_trigger_threshold(self):
        batch = simple_batch(
            [120.0] * 3, action=[0.1, 0.1, 0.1], d15=[0.0, -16.0, 14.0]
        )
        vals = evaluate_raw("compression", batch)
        assert vals.tolist() == [0.0, pytest.approx(0.01), 0.0]

    def test_target_strategy_parameterized(self):
        vals = evaluate_raw("target:160", simple_batch([160.0, 120.0]))
        assert vals[0] == 0.0
        assert vals[1] == -40.0

    def test_unknown_name_rejected(self):
        with pytest.raises(KeyError, match="unknown preference"):
            evaluate_raw("nope", simple_batch([120.0]))

    def test_registry_lists_names(self):
        names = preference_names()
        for expected in ("tir1", "tbr3", "cov2", "mealtime", "compression"):
            assert expected in names


class TestNormalization:
    def test_maps_to_closed_interval(self):
        raw = np.array([-3.0, 0.0, 9.0])
        out = normalize_labels(raw)
        assert out.min() == -1.0 and out.max() == 1.0

    def test_affine_preserves_argmax_sets(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(size=200)
        out = normalize_labels(raw)
        assert np.array_equal(np.argsort(raw), np.argsort(out))

    def test_constant_maps_to_zeros(self):
        assert np.all(normalize_labels(np.full(5, 3.3)) == 0.0)


@pytest.fixture(scope="module")
def small_dataset():
    from paint.controllers import PidConfig, PidController

    params = load_patient("adult")
    from paint.config import meal_schedule, pid_gains
    from paint.simulator import run_episode

    gains = pid_gains("adult")
    trajs = []
    for ep in range(2):
        pid = PidController(PidConfig.for_patient(params, gains=gains))
        trajs.append(
            run_episode(
                params,
                pid,
                schedule=meal_schedule("adult"),
                days=3,
                seed=50 + ep,
                episode_id=f"p{ep}",
            )
        )
    return Dataset(trajs, params)


class TestAutoLabel:
    def test_exact_count_and_range(self, small_dataset):
        labels = auto_label(small_dataset, "tir2", 500, seed=1)
        assert len(labels) == 500
        assert all(-1.0 <= l.reward <= 1.0 for l in labels)

    def test_contiguous_segments(self, small_dataset):
        rng = np.random.default_rng(2)
        idx = contiguous_label_indices(small_dataset, 700, rng)
        assert idx.size == 700
        jumps = np.flatnonzero(np.diff(np.sort(idx)) > 1)
        assert jumps.size <= 1  # at most one gap between the two episode segments

    def test_deterministic_per_seed(self, small_dataset):
        a = auto_label(small_dataset, "cov1", 300, seed=9)
        b = auto_label(small_dataset, "cov1", 300, seed=9)
        assert [(l.episode_id, l.step, l.reward) for l in a] == [
            (l.episode_id, l.step, l.reward) for l in b
        ]

    def test_corruption_negates(self, small_dataset):
        clean = auto_label(small_dataset, "tir2", 400, seed=3)
        bad = auto_label(small_dataset, "tir2", 400, seed=3, corrupt_fraction=1.0)
        for c, b in zip(clean, bad):
            assert b.reward == pytest.approx(-c.reward)

    def test_noise_clamped(self, small_dataset):
        noisy = auto_label(
            small_dataset, "tir2", 400, seed=3, noise_sigma_multiple=10.0
        )
        assert all(-1.0 <= l.reward <= 1.0 for l in noisy)

    def test_too_many_labels_rejected(self, small_dataset):
        with pytest.raises(ValueError):
            auto_label(small_dataset, "tir2", 10**6, seed=0)

    def test_mealtime_windows_from_subset(self, small_dataset):
        idx = np.arange(small_dataset.n_samples)
        batch = build_sample_batch(small_dataset, idx)
        assert len(batch.meal_windows) == 3  # one per meal slot
        for lo, hi in batch.meal_windows:
            width = (hi - lo) % 1440.0
            assert width == pytest.approx(120.0)
