"""HTTP API for the sketchpad front end.

Serves episode traces for display, accepts sketched label batches,
queues reward-model and tuning jobs (one training job runs at a time),
and reports paired before/after metrics for finished bundles. All
computation happens through the same Workspace primitives the CLI
uses, so a sketch submitted here and a label file fed to the CLI
produce identical artifacts given identical seeds.
"""

from __future__ import annotations

import itertools
import json
import queue
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .experiments import PairedReports, Scale, Workspace
from .nn import save_checkpoint
from .reward_learning import (
    ConflictingLabel,
    InsufficientLabels,
    LabelSet,
    SketchLabel,
    relabel,
    train_reward_model,
    write_labels,
)
from .safe_orl import PolicyBundle, Td3bcConfig, tune


class LabelRecord(BaseModel):
    episode_id: str
    t: int = Field(ge=0)
    reward: float


class LabelBatch(BaseModel):
    labels: list[LabelRecord]


class TuneRequest(BaseModel):
    lam: float = Field(default=2.5, alias="lambda", ge=0.0)
    seed: int = 0
    name: str | None = None

    model_config = {"populate_by_name": True}


class TrainRewardRequest(BaseModel):
    seed: int = 0


class JobRegistry:
    """Serialized job execution: one worker, FIFO queue."""

    def __init__(self):
        self._jobs: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._queue: queue.Queue = queue.Queue()
        self._counter = itertools.count(1)
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def submit(self, kind: str, fn) -> str:
        job_id = f"job-{next(self._counter)}"
        with self._lock:
            self._jobs[job_id] = {"id": job_id, "kind": kind, "status": "queued"}
        self._queue.put((job_id, fn))
        return job_id

    def get(self, job_id: str) -> dict:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise KeyError(job_id)
            return dict(job)

    def _run(self):
        while True:
            job_id, fn = self._queue.get()
            with self._lock:
                self._jobs[job_id]["status"] = "running"
            try:
                result = fn()
                with self._lock:
                    self._jobs[job_id].update({"status": "done", "result": result})
            except Exception as exc:  # noqa: BLE001 - job boundary
                with self._lock:
                    self._jobs[job_id].update(
                        {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
                    )

    def wait_idle(self, timeout: float = 300.0):
        # test helper: block until the queue drains
        import time

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                busy = any(
                    j["status"] in ("queued", "running") for j in self._jobs.values()
                )
            if not busy and self._queue.empty():
                return
            time.sleep(0.02)
        raise TimeoutError("jobs did not finish in time")


def create_app(
    data_dir,
    patient_id: str = "adult",
    scale: Scale | None = None,
    td3_config: Td3bcConfig | None = None,
    reward_config=None,
) -> FastAPI:
    ws = Workspace(data_dir, scale=scale, td3_config=td3_config, reward_config=reward_config)
    app = FastAPI(title="sketchpad service")
    state = {
        "labels": LabelSet(),
        "reward_model": None,
        "jobs": JobRegistry(),
        "patient_id": patient_id,
    }
    app.state.workspace = ws
    app.state.service_state = state

    def dataset():
        return ws.dataset(patient_id)

    @app.get("/episodes")
    def list_episodes():
        ds = dataset()
        return [
            {
                "id": tr.episode_id,
                "patient_id": tr.patient_id,
                "n_samples": len(tr),
                "terminated": bool(tr.terminated),
                "seed": tr.seed,
            }
            for tr in ds.trajectories
        ]

    @app.get("/episodes/{episode_id}")
    def get_episode(episode_id: str, points: int | None = None):
        ds = dataset()
        for tr in ds.trajectories:
            if tr.episode_id == episode_id:
                n = len(tr)
                if points is None or points >= n:
                    idx = np.arange(n)
                else:
                    if points < 2:
                        raise HTTPException(400, "points must be >= 2")
                    idx = np.unique(np.linspace(0, n - 1, points).round().astype(int))
                return {
                    "id": tr.episode_id,
                    "n_native": n,
                    "step_index": idx.tolist(),
                    "t_min": tr.t[idx].tolist(),
                    "glucose": tr.glucose[idx].tolist(),
                    "basal": tr.basal[idx].tolist(),
                    "bolus": tr.bolus[idx].tolist(),
                    "carbs": tr.carbs[idx].tolist(),
                    "meal_steps": tr.meal_steps(),
                }
        raise HTTPException(404, f"unknown episode {episode_id!r}")

    @app.get("/labels")
    def get_labels():
        return [
            {"episode_id": lab.episode_id, "t": lab.step, "reward": lab.reward}
            for lab in state["labels"].items()
        ]

    @app.post("/labels")
    def post_labels(batch: LabelBatch):
        ds = dataset()
        for rec in batch.labels:
            if not -1.0 <= rec.reward <= 1.0:
                raise HTTPException(400, f"label reward {rec.reward} outside [-1, 1]")
            try:
                ds.global_index(rec.episode_id, rec.t)
            except (KeyError, IndexError) as exc:
                raise HTTPException(400, str(exc)) from None
        try:
            for rec in batch.labels:
                state["labels"].add(SketchLabel(rec.episode_id, rec.t, rec.reward))
        except ConflictingLabel as exc:
            raise HTTPException(409, str(exc)) from None
        path = ws.root / "labels" / "service.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_labels(path, state["labels"])
        return {"accepted": len(batch.labels), "total": len(state["labels"])}

    @app.post("/jobs/train-reward")
    def job_train_reward(req: TrainRewardRequest):
        labels = state["labels"]
        if len(labels) < ws.reward_cfg.min_labels:
            raise HTTPException(
                400, f"insufficient labels: have {len(labels)}, need {ws.reward_cfg.min_labels}"
            )

        def work():
            ds = dataset()
            priori = ws.priori(patient_id, req.seed)
            model = train_reward_model(
                ds, labels, ws.reward_cfg, seed=req.seed, norm=priori.norm
            )
            state["reward_model"] = model
            out = ws.root / "rewards" / "service.ckpt"
            out.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(out, model.mlp, model.norm, {"val_loss": model.meta["val_loss"]})
            return {"val_loss": model.meta["val_loss"], "checkpoint": str(out)}

        return {"job_id": state["jobs"].submit("train-reward", work)}

    @app.post("/jobs/tune")
    def job_tune(req: TuneRequest):
        if state["reward_model"] is None:
            raise HTTPException(400, "no trained reward model; run train-reward first")

        def work():
            ds = dataset()
            priori = ws.priori(patient_id, req.seed)
            relabel(ds, state["reward_model"])
            result = tune(
                ds, priori.priori, req.lam, ws.td3, seed=req.seed, norm=priori.norm
            )
            name = req.name or f"ui-tuned-{patient_id}-s{req.seed}-lam{req.lam:g}"
            bundle = PolicyBundle(
                priori=priori.priori,
                norm=priori.norm,
                max_basal_u_per_min=ds.params.max_basal_u_per_min,
                patient_id=patient_id,
                tuned=result.actor,
                reward_mlp=state["reward_model"].mlp,
                lam=req.lam,
                meta={"seed": req.seed, "source": "service"},
            )
            bundle_dir = ws.root / "bundles" / name
            bundle.save(bundle_dir)
            report = _paired_report(ws, bundle)
            (bundle_dir / "reports.json").write_text(json.dumps(report, sort_keys=True))
            return {"bundle": name, "report": report}

        return {"job_id": state["jobs"].submit("tune", work)}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        try:
            return state["jobs"].get(job_id)
        except KeyError:
            raise HTTPException(404, f"unknown job {job_id!r}") from None

    @app.get("/reports/{bundle_name}")
    def get_report(bundle_name: str):
        path = ws.root / "bundles" / bundle_name / "reports.json"
        if path.exists():
            return json.loads(path.read_text())
        bundle_dir = ws.root / "bundles" / bundle_name
        if not (bundle_dir / "meta.json").exists():
            raise HTTPException(404, f"unknown bundle {bundle_name!r}")
        bundle = PolicyBundle.load(bundle_dir)
        report = _paired_report(ws, bundle)
        (bundle_dir / "reports.json").write_text(json.dumps(report, sort_keys=True))
        return report

    return app


_REPORT_ATTRS = (
    "mean_glucose",
    "magni_total",
    "risk_total",
    "tir_pct",
    "tbr_pct",
    "cov_pct",
    "post_meal_tir_4h",
)


def _nan_to_none(value: float):
    return None if not np.isfinite(value) else value


def _paired_report(ws: Workspace, bundle: PolicyBundle) -> dict:
    rep = ws.evaluate(bundle)
    out = {"bundle_lambda": bundle.lam, "patient_id": bundle.patient_id}
    for name, reports in (("tuned", rep.tuned), ("priori", rep.priori)):
        out[name] = {
            attr: _nan_to_none(PairedReports.median(reports, attr))
            for attr in _REPORT_ATTRS
        }
    out["delta"] = {
        attr: (
            out["tuned"][attr] - out["priori"][attr]
            if out["tuned"][attr] is not None and out["priori"][attr] is not None
            else None
        )
        for attr in _REPORT_ATTRS
    }
    return out
