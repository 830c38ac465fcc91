import numpy as np
import pytest

from aicmet.model import AICMET, ModelConfig
from aicmet.ou import PriorConfig
from aicmet.simulate import SimulationConfig, generate_study, study_rng


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sim():
    return SimulationConfig(prior=PriorConfig(n_individuals=(4, 6)))


@pytest.fixture(scope="session")
def studies(small_sim):
    return [generate_study(small_sim, study_rng(7, i), f"s{i}") for i in range(3)]


@pytest.fixture
def tiny_model():
    return AICMET(ModelConfig(H=16, Z_d=4, heads=2, layers=1, init_seed=3))
