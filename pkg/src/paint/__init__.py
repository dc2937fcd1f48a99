"""Preference-adaptable insulin dosing toolkit.

Pipeline: simulate a virtual T1D patient under a PID demonstrator,
collect offline dosing datasets, sketch scalar reward labels over the
history, train a reward model, and tune a safety-anchored offline RL
policy whose preference strength is a single dial.
"""

from .config import load_patient, patient_ids, pid_gains
from .metrics import EpisodeReport, magni_risk, score
from .nn import Mlp, NormalizationRecord
from .simulator import (
    DT_MIN,
    FaultInjector,
    MealSchedule,
    PatientParams,
    SimState,
    run_episode,
    step,
)

__version__ = "0.1.0"

__all__ = [
    "DT_MIN",
    "EpisodeReport",
    "FaultInjector",
    "MealSchedule",
    "Mlp",
    "NormalizationRecord",
    "PatientParams",
    "SimState",
    "load_patient",
    "magni_risk",
    "patient_ids",
    "pid_gains",
    "run_episode",
    "score",
    "step",
    "__version__",
]
