"""Experiment harness: dataset generation, training phases, paired evaluation.

A Workspace owns a data directory and lazily builds / caches the heavy
artifacts (datasets, anchor policies, reward models, tuned bundles) so
that every experiment and the acceptance suite share work. All heavy
steps are pure functions of (config, seeds); rerunning an experiment
reproduces its result table.

Evaluation discipline: a tuned policy is never scored without scoring
its own anchor under identical evaluation seeds, and the PID
demonstrator is scored under those same seeds when requested, so every
comparison is paired.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .controllers import PidConfig, PidController
from .datastore import Dataset, load_dataset, read_trajectory, write_trajectory
from .metrics import EpisodeReport, score
from .nn import load_checkpoint, save_checkpoint
from .preferences import auto_label
from .reward_learning import (
    LabelSet,
    RewardModel,
    RewardModelConfig,
    read_labels,
    relabel,
    train_reward_model,
    write_labels,
)
from .safe_orl import PolicyBundle, RlPolicy, Td3bcConfig, train_priori, tune
from .simulator import FaultInjector, PatientParams, run_episode

GOALS = {
    "raise_tir": ("tir2", "tir_pct", +1.0),
    "lower_tbr": ("tbr2", "tbr_pct", -1.0),
    "lower_cov": ("cov1", "cov_pct", -1.0),
}

DATASET_SEED_BASE = {"none": 1000, "compression_low": 5000}
EVAL_SEED_BASE = 9000


@dataclass(frozen=True)
class Scale:
    """Experiment sizing. Desk scale keeps everything laptop-friendly."""

    episodes_per_patient: int = 4  # 10-day episodes, ~20k samples nominal
    n_labels: int = 2000
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_repeats: int = 3
    eval_days: int = 10
    lambda_default: float = 2.5

    @classmethod
    def paper(cls) -> "Scale":
        return cls(
            episodes_per_patient=21,
            n_labels=10000,
            seeds=(0, 1, 2),
            eval_repeats=5,
        )


def make_fault_injector(mode: str) -> FaultInjector:
    return FaultInjector(mode=mode)


def demonstrator(params: PatientParams, noise: bool = True) -> PidController:
    gains = cfgmod.pid_gains(params.id)
    overrides = {} if noise else {"param_noise_std": 0.0, "action_ou_sigma_frac": 0.0}
    return PidController(PidConfig.for_patient(params, gains=gains, **overrides))


def pid_with_target(params: PatientParams, target: float, noise: bool = False) -> PidController:
    overrides = {"g_targ_mgdl": target}
    if not noise:
        overrides.update({"param_noise_std": 0.0, "action_ou_sigma_frac": 0.0})
    return PidController(PidConfig.for_patient(params, **overrides))


@dataclass
class PairedReports:
    tuned: list[EpisodeReport]
    priori: list[EpisodeReport]
    pid: list[EpisodeReport] | None = None

    @staticmethod
    def median(reports: list[EpisodeReport], attr: str) -> float:
        return float(np.median([getattr(r, attr) for r in reports]))


class Workspace:
    def __init__(self, root, scale: Scale | None = None, td3_config: Td3bcConfig | None = None,
                 reward_config: RewardModelConfig | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.scale = scale or Scale()
        self.td3 = td3_config or Td3bcConfig()
        self.reward_cfg = reward_config or RewardModelConfig()
        self._datasets: dict[tuple, Dataset] = {}

    # ---------------- datasets ----------------

    def dataset_dir(self, patient_id: str, fault: str = "none") -> Path:
        suffix = "" if fault == "none" else f"-{fault}"
        return self.root / "datasets" / f"{patient_id}{suffix}"

    def dataset(self, patient_id: str, fault: str = "none") -> Dataset:
        key = (patient_id, fault)
        if key in self._datasets:
            return self._datasets[key]
        params = cfgmod.load_patient(patient_id)
        directory = self.dataset_dir(patient_id, fault)
        want = self.scale.episodes_per_patient
        have = sorted(directory.glob("*.traj"))
        if len(have) < want:
            directory.mkdir(parents=True, exist_ok=True)
            self.generate_dataset(patient_id, fault, directory)
        ds = load_dataset(directory, params)
        self._datasets[key] = ds
        return ds

    def generate_dataset(self, patient_id: str, fault: str, directory: Path):
        params = cfgmod.load_patient(patient_id)
        schedule = cfgmod.meal_schedule(patient_id)
        injector = make_fault_injector(fault)
        base = DATASET_SEED_BASE[fault]
        for ep in range(self.scale.episodes_per_patient):
            seed = base + ep
            traj = run_episode(
                params,
                demonstrator(params),
                schedule=schedule,
                fault_injector=injector,
                days=10,
                seed=seed,
                episode_id=f"{patient_id}-{fault}-{ep:03d}",
            )
            write_trajectory(directory / f"ep{ep:03d}.traj", traj)

    # ---------------- phase 1 ----------------

    def priori_dir(self, patient_id: str, seed: int, fault: str = "none") -> Path:
        suffix = "" if fault == "none" else f"-{fault}"
        return self.root / "bundles" / f"priori-{patient_id}{suffix}-s{seed}"

    def priori(self, patient_id: str, seed: int, fault: str = "none") -> PolicyBundle:
        directory = self.priori_dir(patient_id, seed, fault)
        if (directory / "meta.json").exists():
            return PolicyBundle.load(directory)
        ds = self.dataset(patient_id, fault)
        result, norm = train_priori(ds, self.td3, seed=seed)
        bundle = PolicyBundle(
            priori=result.actor,
            norm=norm,
            max_basal_u_per_min=ds.params.max_basal_u_per_min,
            patient_id=patient_id,
            meta={
                "seed": seed,
                "fault": fault,
                "dataset_hash": ds.content_hash(),
                "diagnostics": {
                    k: v for k, v in result.diagnostics.items() if np.isscalar(v)
                },
            },
        )
        bundle.save(directory)
        return bundle

    # ---------------- labels + reward model ----------------

    def labels_path(self, tag: str) -> Path:
        return self.root / "labels" / f"{tag}.jsonl"

    def labels(
        self,
        patient_id: str,
        preference: str,
        seed: int,
        fault: str = "none",
        n_labels: int | None = None,
        corrupt_fraction: float = 0.0,
        noise_sigma_multiple: float = 0.0,
    ) -> LabelSet:
        n = n_labels if n_labels is not None else self.scale.n_labels
        tag = _slug(
            "lab", patient_id, fault, preference, n, seed, corrupt_fraction, noise_sigma_multiple
        )
        path = self.labels_path(tag)
        if path.exists():
            return read_labels(path)
        ds = self.dataset(patient_id, fault)
        labels = LabelSet(
            auto_label(
                ds,
                preference,
                n,
                seed=seed,
                corrupt_fraction=corrupt_fraction,
                noise_sigma_multiple=noise_sigma_multiple,
            )
        )
        path.parent.mkdir(parents=True, exist_ok=True)
        write_labels(path, labels)
        return labels

    def reward_model(
        self,
        patient_id: str,
        preference: str,
        seed: int,
        fault: str = "none",
        n_labels: int | None = None,
        corrupt_fraction: float = 0.0,
        noise_sigma_multiple: float = 0.0,
    ) -> RewardModel:
        ds = self.dataset(patient_id, fault)
        tag = _slug(
            "rew", patient_id, fault, preference,
            n_labels if n_labels is not None else self.scale.n_labels,
            seed, corrupt_fraction, noise_sigma_multiple,
        )
        path = self.root / "rewards" / f"{tag}.ckpt"
        priori = self.priori(patient_id, seed, fault)  # shares the frozen norm
        if path.exists():
            mlp, norm, meta = load_checkpoint(path)
            return RewardModel(
                mlp=mlp,
                norm=norm,
                max_basal_u_per_min=ds.params.max_basal_u_per_min,
                meta=meta,
            )
        labels = self.labels(
            patient_id, preference, seed, fault, n_labels,
            corrupt_fraction, noise_sigma_multiple,
        )
        model = train_reward_model(
            ds, labels, self.reward_cfg, seed=seed, norm=priori.norm
        )
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(
            path, model.mlp, model.norm,
            {k: v for k, v in model.meta.items() if np.isscalar(v) or isinstance(v, (int, float, str))},
        )
        return model

    # ---------------- phase 2 ----------------

    def tuned(
        self,
        patient_id: str,
        preference: str,
        seed: int,
        lam: float | None = None,
        fault: str = "none",
        n_labels: int | None = None,
        corrupt_fraction: float = 0.0,
        noise_sigma_multiple: float = 0.0,
    ) -> PolicyBundle:
        lam = self.scale.lambda_default if lam is None else lam
        tag = _slug(
            "tuned", patient_id, fault, preference,
            n_labels if n_labels is not None else self.scale.n_labels,
            seed, corrupt_fraction, noise_sigma_multiple, lam,
        )
        directory = self.root / "bundles" / tag
        if (directory / "meta.json").exists():
            return PolicyBundle.load(directory)

        ds = self.dataset(patient_id, fault)
        priori = self.priori(patient_id, seed, fault)
        model = self.reward_model(
            patient_id, preference, seed, fault, n_labels,
            corrupt_fraction, noise_sigma_multiple,
        )
        relabel(ds, model)
        result = tune(ds, priori.priori, lam, self.td3, seed=seed, norm=priori.norm)
        bundle = PolicyBundle(
            priori=priori.priori,
            norm=priori.norm,
            max_basal_u_per_min=ds.params.max_basal_u_per_min,
            patient_id=patient_id,
            tuned=result.actor,
            reward_mlp=model.mlp,
            lam=lam,
            meta={
                "seed": seed,
                "fault": fault,
                "preference": preference,
                "dataset_hash": ds.content_hash(),
            },
        )
        bundle.save(directory)
        return bundle

    # ---------------- evaluation ----------------

    def evaluate(
        self,
        bundle: PolicyBundle,
        fault: str = "none",
        include_pid: bool = False,
        eval_seeds: tuple[int, ...] | None = None,
    ) -> PairedReports:
        params = cfgmod.load_patient(bundle.patient_id)
        schedule = cfgmod.meal_schedule(bundle.patient_id)
        injector = make_fault_injector(fault)
        seeds = eval_seeds or tuple(
            EVAL_SEED_BASE + r for r in range(self.scale.eval_repeats)
        )

        def run(policy):
            reports = []
            for s in seeds:
                traj = run_episode(
                    params,
                    policy,
                    schedule=schedule,
                    fault_injector=injector,
                    days=self.scale.eval_days,
                    seed=s,
                )
                reports.append(score(traj))
            return reports

        tuned_reports = run(RlPolicy(bundle, params, use_tuned=True))
        priori_reports = run(RlPolicy(bundle, params, use_tuned=False))
        pid_reports = run(demonstrator(params, noise=False)) if include_pid else None
        return PairedReports(tuned=tuned_reports, priori=priori_reports, pid=pid_reports)

    # ---------------- result output ----------------

    def write_results(self, name: str, rows: list[dict]) -> Path:
        directory = self.root / "results"
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{name}.jsonl"
        with open(path, "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        (directory / f"{name}.txt").write_text(format_table(rows))
        return path


def _slug(*parts) -> str:
    toks = []
    for p in parts:
        if isinstance(p, float):
            toks.append(f"{p:g}".replace(".", "p"))
        else:
            toks.append(str(p))
    return "-".join(toks)


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(no results)\n"
    cols = list(rows[0].keys())
    widths = {
        c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in cols
    }
    head = "  ".join(c.ljust(widths[c]) for c in cols)
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append("  ".join(_fmt(r.get(c)).ljust(widths[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


# ---------------- experiment protocols ----------------


def experiment_common_goals(
    ws: Workspace, patients=("adult", "adolescent", "child"), include_pid_sweep=False
) -> list[dict]:
    """Goal adaptation: tune each common goal and compare paired metrics.

    A goal row is achieved when the median metric change across
    (patient, seed) runs moves in the goal direction; when the PID
    target sweep is included, the change must also exceed the best the
    sweep achieved for that goal.
    """
    rows = []
    for goal, (pref, attr, direction) in GOALS.items():
        deltas, tuned_risk, priori_risk = [], [], []
        for patient in patients:
            for seed in ws.scale.seeds:
                bundle = ws.tuned(patient, pref, seed)
                rep = ws.evaluate(bundle)
                delta = PairedReports.median(rep.tuned, attr) - PairedReports.median(
                    rep.priori, attr
                )
                deltas.append(delta)
                tuned_risk.append(PairedReports.median(rep.tuned, "magni_total"))
                priori_risk.append(PairedReports.median(rep.priori, "magni_total"))
        median_delta = float(np.median(deltas))
        row = {
            "goal": goal,
            "preference": pref,
            "metric": attr,
            "median_change": median_delta,
            "tuned_reward": float(np.median(tuned_risk)),
            "priori_reward": float(np.median(priori_risk)),
            "goal_achieved": bool(median_delta * direction > 0.0),
        }
        if include_pid_sweep:
            pid_change = _pid_sweep_best_change(ws, patients, attr, direction)
            row["pid_benchmark_change"] = pid_change
            row["goal_achieved"] = bool(
                median_delta * direction > 0.0
                and median_delta * direction > pid_change * direction
            )
        rows.append(row)
    ws.write_results("common-goals", rows)
    return rows


def _pid_sweep_best_change(ws: Workspace, patients, attr: str, direction: float) -> float:
    """Best goal-metric change a PID target sweep achieves over its default.

    Sweeps 100..200 mg/dL in 5 mg/dL graduations, discards targets whose
    median reward falls below -35,000, and reports the change (best vs
    the demonstrator's own target) in the goal direction.
    """
    changes = []
    for patient in patients:
        params = cfgmod.load_patient(patient)
        schedule = cfgmod.meal_schedule(patient)
        base_gains = cfgmod.pid_gains(patient)
        seeds = tuple(EVAL_SEED_BASE + r for r in range(ws.scale.eval_repeats))

        def median_metrics(target):
            reports = []
            for s in seeds:
                traj = run_episode(
                    params,
                    pid_with_target(params, target),
                    schedule=schedule,
                    days=ws.scale.eval_days,
                    seed=s,
                )
                reports.append(score(traj))
            return (
                PairedReports.median(reports, attr),
                PairedReports.median(reports, "magni_total"),
            )

        base_val, _ = median_metrics(base_gains["g_targ_mgdl"])
        best = None
        for target in np.arange(100.0, 200.1, 5.0):
            val, reward = median_metrics(float(target))
            if reward < -35000.0:
                continue
            if best is None or (val - base_val) * direction > (best - base_val) * direction:
                best = val
        changes.append((best - base_val) if best is not None else 0.0)
    return float(np.median(changes))


def experiment_bg_targets(
    ws: Workspace, targets=(120.0, 160.0), patient="adult", lam: float = 10.0
) -> list[dict]:
    """Target following: preference pins glucose to a setpoint; compare to PID."""
    rows = []
    for target in targets:
        pref = f"target:{target:g}"
        means, rl_rewards, pid_rewards = [], [], []
        for seed in ws.scale.seeds:
            bundle = ws.tuned(patient, pref, seed, lam=lam)
            rep = ws.evaluate(bundle)
            means.append(PairedReports.median(rep.tuned, "mean_glucose"))
            rl_rewards.append(PairedReports.median(rep.tuned, "magni_total"))

        params = cfgmod.load_patient(patient)
        schedule = cfgmod.meal_schedule(patient)
        seeds = tuple(EVAL_SEED_BASE + r for r in range(ws.scale.eval_repeats))
        pid_reports = [
            score(
                run_episode(
                    params,
                    pid_with_target(params, target),
                    schedule=schedule,
                    days=ws.scale.eval_days,
                    seed=s,
                )
            )
            for s in seeds
        ]
        rows.append(
            {
                "target_mgdl": target,
                "rl_mean_glucose": float(np.median(means)),
                "rl_reward": float(np.median(rl_rewards)),
                "pid_mean_glucose": PairedReports.median(pid_reports, "mean_glucose"),
                "pid_reward": PairedReports.median(pid_reports, "magni_total"),
                "target_achieved": bool(abs(float(np.median(means)) - target) <= 10.0),
            }
        )
    ws.write_results("bg-targets", rows)
    return rows


def experiment_mealtimes(ws: Workspace, patients=("adult",)) -> list[dict]:
    """Pre-meal dosing case study: post-meal 4 h TIR and basal shifts."""
    rows = []
    for patient in patients:
        for seed in ws.scale.seeds:
            bundle = ws.tuned(patient, "mealtime", seed)
            rep = ws.evaluate(bundle)
            rows.append(
                {
                    "patient": patient,
                    "seed": seed,
                    "tuned_post_meal_tir": PairedReports.median(rep.tuned, "post_meal_tir_4h"),
                    "priori_post_meal_tir": PairedReports.median(rep.priori, "post_meal_tir_4h"),
                    "tuned_pre_meal_basal": PairedReports.median(rep.tuned, "pre_meal_basal_2h"),
                    "priori_pre_meal_basal": PairedReports.median(rep.priori, "pre_meal_basal_2h"),
                    "tuned_reward": PairedReports.median(rep.tuned, "magni_total"),
                    "priori_reward": PairedReports.median(rep.priori, "magni_total"),
                }
            )
    ws.write_results("mealtimes", rows)
    return rows


def experiment_compression(ws: Workspace, patients=("adult",)) -> list[dict]:
    """Compression-low case study on the fault-injected dataset."""
    rows = []
    for patient in patients:
        for seed in ws.scale.seeds:
            bundle = ws.tuned(patient, "compression", seed, fault="compression_low")
            rep = ws.evaluate(bundle, fault="compression_low")
            rows.append(
                {
                    "patient": patient,
                    "seed": seed,
                    "tuned_post_event_basal": PairedReports.median(rep.tuned, "post_event_basal_1h"),
                    "priori_post_event_basal": PairedReports.median(rep.priori, "post_event_basal_1h"),
                    "tuned_post_event_cov": PairedReports.median(rep.tuned, "post_event_cov_8h"),
                    "priori_post_event_cov": PairedReports.median(rep.priori, "post_event_cov_8h"),
                    "tuned_reward": PairedReports.median(rep.tuned, "magni_total"),
                    "priori_reward": PairedReports.median(rep.priori, "magni_total"),
                }
            )
    ws.write_results("compression", rows)
    return rows


def experiment_sample_efficiency(
    ws: Workspace, counts=(250, 1000, 2000), patient="adult", preference="tir2"
) -> list[dict]:
    rows = []
    for n in counts:
        deltas, rewards = [], []
        for seed in ws.scale.seeds:
            bundle = ws.tuned(patient, preference, seed, n_labels=n)
            rep = ws.evaluate(bundle)
            deltas.append(
                PairedReports.median(rep.tuned, "tir_pct")
                - PairedReports.median(rep.priori, "tir_pct")
            )
            rewards.append(PairedReports.median(rep.tuned, "magni_total"))
        rows.append(
            {
                "n_labels": n,
                "median_tir_change": float(np.median(deltas)),
                "median_reward": float(np.median(rewards)),
            }
        )
    ws.write_results("sample-efficiency", rows)
    return rows


def experiment_corrupt_labels(
    ws: Workspace, fractions=(0.2, 0.8, 1.0), patient="adult", preference="tir2"
) -> list[dict]:
    rows = []
    for frac in fractions:
        rewards, priori_rewards = [], []
        for seed in ws.scale.seeds:
            bundle = ws.tuned(patient, preference, seed, corrupt_fraction=frac)
            rep = ws.evaluate(bundle)
            rewards.append(PairedReports.median(rep.tuned, "magni_total"))
            priori_rewards.append(PairedReports.median(rep.priori, "magni_total"))
        rows.append(
            {
                "corrupt_fraction": frac,
                "median_reward": float(np.median(rewards)),
                "priori_reward": float(np.median(priori_rewards)),
            }
        )
    ws.write_results("corrupt-labels", rows)
    return rows


def experiment_label_noise(
    ws: Workspace, multiples=(1.0, 3.0, 10.0), patient="adult", preference="tir2"
) -> list[dict]:
    rows = []
    for mult in multiples:
        deltas, rewards, priori_rewards = [], [], []
        for seed in ws.scale.seeds:
            bundle = ws.tuned(patient, preference, seed, noise_sigma_multiple=mult)
            rep = ws.evaluate(bundle)
            deltas.append(
                PairedReports.median(rep.tuned, "tir_pct")
                - PairedReports.median(rep.priori, "tir_pct")
            )
            rewards.append(PairedReports.median(rep.tuned, "magni_total"))
            priori_rewards.append(PairedReports.median(rep.priori, "magni_total"))
        rows.append(
            {
                "noise_sigma_multiple": mult,
                "median_tir_change": float(np.median(deltas)),
                "median_reward": float(np.median(rewards)),
                "priori_reward": float(np.median(priori_rewards)),
            }
        )
    ws.write_results("label-noise", rows)
    return rows


def experiment_diverse_strategies(
    ws: Workspace, patient="adult", seeds: tuple[int, ...] | None = None
) -> list[dict]:
    strategy_metric = {
        "tir1": ("tir_pct", +1), "tir2": ("tir_pct", +1), "tir3": ("tir_pct", +1),
        "tbr1": ("tbr_pct", -1), "tbr2": ("tbr_pct", -1), "tbr3": ("tbr_pct", -1),
        "cov1": ("cov_pct", -1), "cov2": ("cov_pct", -1), "cov3": ("cov_pct", -1),
    }
    seeds = seeds or ws.scale.seeds
    rows = []
    for strategy, (attr, direction) in strategy_metric.items():
        deltas, rewards = [], []
        for seed in seeds:
            bundle = ws.tuned(patient, strategy, seed)
            rep = ws.evaluate(bundle)
            deltas.append(
                PairedReports.median(rep.tuned, attr)
                - PairedReports.median(rep.priori, attr)
            )
            rewards.append(PairedReports.median(rep.tuned, "magni_total"))
        rows.append(
            {
                "strategy": strategy,
                "metric": attr,
                "median_change": float(np.median(deltas)),
                "median_reward": float(np.median(rewards)),
                "intended_direction": bool(float(np.median(deltas)) * direction > 0),
            }
        )
    ws.write_results("diverse-strategies", rows)
    return rows


EXPERIMENTS = {
    "bg-targets": experiment_bg_targets,
    "common-goals": experiment_common_goals,
    "mealtimes": experiment_mealtimes,
    "compression": experiment_compression,
    "sample-efficiency": experiment_sample_efficiency,
    "corrupt-labels": experiment_corrupt_labels,
    "label-noise": experiment_label_noise,
    "diverse-strategies": experiment_diverse_strategies,
}
