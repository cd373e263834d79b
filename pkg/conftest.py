from pathlib import Path

import numpy as np
import pytest

from generators import GenSpec, generate
from model import example_one_instance
from settings_manager import ConicSettings, SolveSettings

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def example1():
    return example_one_instance()


@pytest.fixture
def small_mv():
    return generate(GenSpec(family="mv", n=5, K=2, dominance="zero", seed=42))


@pytest.fixture
def small_ssp():
    return generate(GenSpec(family="ssp", n=5, K=2, seed=7))


@pytest.fixture
def sectioned_mv():
    return generate(GenSpec(family="mv", n=6, sections=2, dominance="minus", seed=3))


@pytest.fixture
def conic_settings():
    return ConicSettings()


@pytest.fixture
def exact_settings():
    """Branch until the tree is exhausted so objectives can be compared tightly."""
    return SolveSettings(rel_gap=1e-9)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
