from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from flchallenge.harness.config import build_config
from flchallenge.synthdata import default_site_specs, generate_federation

FIXTURES = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def federation():
    return generate_federation(default_site_specs(seed=0))


@pytest.fixture(scope="session")
def small_federation():
    """Three training sites with about 40 train images each, no external site."""
    specs = default_site_specs(seed=3, d=6, scale=0.002, include_external=False)
    return generate_federation(specs, d=6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config(tmp_path):
    def make(**extra):
        raw = {"seed": 0, "output_dir": str(tmp_path / "out"),
               "rounds": {"n_rounds": 3},
               "leaderboard": {"n_trials": 50}}
        for key, value in extra.items():
            raw[key] = value
        return build_config(raw)
    return make
