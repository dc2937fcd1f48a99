"""Patient parameter registry.

Parameters live in ``patients.yaml`` next to this module: a versioned,
human-readable file with one block per cohort patient (adult,
adolescent, child) and the PID gains found for each by offline grid
search. A custom file can be supplied via path for experiments.
"""

from __future__ import annotations

import functools
from importlib import resources
from pathlib import Path

import yaml

from .simulator import MealSchedule, PatientParams

SUPPORTED_VERSIONS = (1,)


def _read(path: str | Path | None) -> dict:
    if path is None:
        text = resources.files("paint").joinpath("patients.yaml").read_text()
    else:
        text = Path(path).read_text()
    doc = yaml.safe_load(text)
    version = doc.get("version")
    if version not in SUPPORTED_VERSIONS:
        raise ValueError(f"unsupported patients file version: {version!r}")
    return doc


@functools.lru_cache(maxsize=8)
def _load(path_key: str | None) -> dict:
    return _read(path_key)


def patient_ids(path: str | Path | None = None) -> list[str]:
    doc = _load(str(path) if path else None)
    return sorted(doc["patients"].keys())


def load_patient(patient_id: str, path: str | Path | None = None) -> PatientParams:
    doc = _load(str(path) if path else None)
    try:
        raw = doc["patients"][patient_id]
    except KeyError:
        known = ", ".join(sorted(doc["patients"]))
        raise KeyError(f"unknown patient {patient_id!r} (have: {known})") from None
    fields = {k: v for k, v in raw.items() if k not in ("pid", "meals")}
    return PatientParams(id=patient_id, **fields)


def meal_schedule(patient_id: str, path: str | Path | None = None) -> MealSchedule:
    doc = _load(str(path) if path else None)
    raw = doc["patients"][patient_id]
    if "meals" not in raw:
        return MealSchedule.default()
    return MealSchedule(entries=[tuple(e) for e in raw["meals"]])


def pid_gains(patient_id: str, path: str | Path | None = None) -> dict:
    doc = _load(str(path) if path else None)
    raw = doc["patients"][patient_id]
    if "pid" not in raw:
        raise KeyError(f"patient {patient_id!r} has no tuned PID gains")
    return dict(raw["pid"])
