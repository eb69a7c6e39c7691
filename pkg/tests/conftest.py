"""Shared fixtures. The expensive ones (39-bus studies and oracle runs) are session scoped."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from modalfreq import (GenTrip, LoadStep, builtin_case_path, load_case, modal_study, predict,
                       run_oracle, scale_inertia)
from modalfreq.grid import Branch, Bus, Exciter, Generator, Governor, GridCase

DATA = Path(__file__).parent / "data"

CASE1 = LoadStep(15, 20.0)
CASE2 = GenTrip(1)


def smib_case(pload: float = 0.0, qload: float = 0.0, h: float = 3.0, d: float = 0.0,
              load_model: str = "impedance") -> GridCase:
    """One slack machine feeding a load over a single line."""
    return GridCase(
        buses=(Bus(1, "slack", 1.0), Bus(2, "PQ", 1.0, pload, qload)),
        branches=(Branch(1, 2, 0.0, 0.1),),
        generators=(Generator(1, 1, 100.0, 0.0, h, d=d),),
        exciters=(Exciter(1),),
        governors=(Governor(1),),
        load_model=load_model,
    )


@pytest.fixture(scope="session")
def base39():
    return load_case(builtin_case_path("ieee39"))


@pytest.fixture(scope="session")
def ieee39(base39):
    """The study fixture: 39-bus system at half inertia."""
    return scale_inertia(base39, 0.5)


@pytest.fixture(scope="session")
def study1(ieee39):
    return modal_study(ieee39, CASE1)


@pytest.fixture(scope="session")
def study2(ieee39):
    return modal_study(ieee39, CASE2)


@pytest.fixture(scope="session")
def prediction1(study1, ieee39):
    return predict(study1, ieee39, CASE1)


@pytest.fixture(scope="session")
def prediction2(study2, ieee39):
    return predict(study2, ieee39, CASE2)


@pytest.fixture(scope="session")
def oracle1(ieee39):
    return run_oracle(ieee39, CASE1, 30.0, 0.01)


@pytest.fixture(scope="session")
def oracle2(ieee39):
    return run_oracle(ieee39, CASE2, 30.0, 0.01)


@pytest.fixture(scope="session")
def wscc9():
    return load_case(DATA / "wscc9.toml")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
