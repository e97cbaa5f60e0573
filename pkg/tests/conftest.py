import numpy as np
import pytest
import torch

from mtaffect.model import ModelConfig, build_model


@pytest.fixture
def tiny_config():
    return ModelConfig(
        backbone_variant="tiny", pyramid_channels=8, input_size=(32, 32), seed=7
    )


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, precision="double")


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def random_images(rng, n, size=32, dtype=torch.float64):
    return torch.tensor(
        rng.random((n, 3, size, size)), dtype=dtype
    )
