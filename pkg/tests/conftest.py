"""Shared fixtures.

The desk-scale acceptance suite trains real bundles (minutes each). A
session Workspace caches them under ``.paint-test-cache`` next to the
repository (override with $PAINT_TEST_CACHE) so repeated runs reuse
artifacts; delete the directory to force a from-scratch rebuild. All
artifacts are pure functions of seeds, so the cache never changes
results, only wall-clock time.
"""

import os
from pathlib import Path

import pytest

from paint.experiments import Scale, Workspace


def _cache_root() -> Path:
    env = os.environ.get("PAINT_TEST_CACHE")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[1] / ".paint-test-cache"


@pytest.fixture(scope="session")
def workspace() -> Workspace:
    return Workspace(_cache_root(), scale=Scale())


@pytest.fixture(scope="session")
def micro_workspace(tmp_path_factory) -> Workspace:
    """Tiny-config workspace for fast plumbing tests (not cached)."""
    from paint.reward_learning import RewardModelConfig
    from paint.safe_orl import Td3bcConfig

    return Workspace(
        tmp_path_factory.mktemp("micro-ws"),
        scale=Scale(
            episodes_per_patient=1,
            n_labels=300,
            seeds=(0,),
            eval_repeats=1,
            eval_days=2,
        ),
        td3_config=Td3bcConfig(epochs_pretrain=3, epochs_tune=3),
        reward_config=RewardModelConfig(max_epochs=5, min_labels=50, patience=5),
    )
