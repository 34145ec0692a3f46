import os
from pathlib import Path

import hypothesis
import numpy as np
import pytest

from aim_merge.core.calibration import CalibrationSet
from aim_merge.core.models import Activation, LayerSpec, ModelSpec
from aim_merge.core.runtime import random_params
from aim_merge.core.tensors import Checkpoint

hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def toy_spec() -> ModelSpec:
    return ModelSpec(layers=[
        LayerSpec(name="l1", in_dim=4, out_dim=5, has_bias=True, activation=Activation.TANH),
        LayerSpec(name="l2", in_dim=5, out_dim=3, has_bias=True, activation=Activation.IDENTITY),
    ])


@pytest.fixture
def identity_spec() -> ModelSpec:
    return ModelSpec(layers=[LayerSpec(name="proj", in_dim=3, out_dim=2)])


@pytest.fixture
def toy_base(toy_spec) -> Checkpoint:
    return random_params(toy_spec, seed=0)


@pytest.fixture
def toy_experts(toy_spec, toy_base):
    """Two experts that differ from the base by small seeded perturbations."""
    experts = []
    for seed in (1, 2):
        noise = random_params(toy_spec, seed=seed, scale=0.1)
        experts.append(Checkpoint({n: toy_base[n] + noise[n] for n in toy_base.names}, {"expert": str(seed)}))
    return experts


@pytest.fixture
def toy_calib(toy_spec) -> CalibrationSet:
    samples = np.random.default_rng(7).normal(size=(16, toy_spec.input_dim))
    return CalibrationSet(samples, "toy")
