import numpy as np
import pytest
import torch

from crisscross_eeg.core.model import ModelConfig
from crisscross_eeg.core.params import init_parameters
from crisscross_eeg.core.recordings import SampleSet
from crisscross_eeg.core.synthetic import SyntheticSpec, generate_synthetic


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig.tiny()


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_parameters(tiny_cfg, seed=0)


@pytest.fixture
def tiny_samples() -> SampleSet:
    """Labelled 4-channel set sized for the tiny model (4 patches of 16 points)."""
    spec = SyntheticSpec(
        n_channels=4,
        duration_s=0.64,
        sample_rate=100.0,
        class_count=2,
        samples_per_class=12,
        rng_seed=3,
    )
    return generate_synthetic(spec)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(previous)
