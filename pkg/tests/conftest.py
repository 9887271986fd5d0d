"""
Shared fixtures for the sparsegen test suite.
"""

import numpy as np
import pytest

from sparsegen.generator import GeneratorParams
from sparsegen.learning import train
from sparsegen.models import DeconvSpec, GeneratorConfig, TrainConfig
from sparsegen.sources.toy import make_toy_corpus
from sparsegen.tensor_ops import get_dtype, set_precision


@pytest.fixture(autouse=True)
def float64_precision():
    """Every test computes in float64 unless it switches; restored afterwards."""
    previous = str(get_dtype())
    set_precision("float64")
    yield
    set_precision(previous)


@pytest.fixture
def default_config():
    return GeneratorConfig()


@pytest.fixture
def tiny_config():
    """d = 2, a 2x2x3 FC map and one deconv layer producing a 5x5 grayscale image."""
    return GeneratorConfig(
        d=2,
        fc_shape=(2, 2, 3),
        layers=[DeconvSpec(kernel=3, stride=2, pad=0, out_channels=1)],
        t_k=[5],
        sigma=0.5,
    )


@pytest.fixture
def small_config():
    """Two deconv layers, small enough for desk-scale training in a test."""
    return GeneratorConfig(
        d=4,
        fc_shape=(2, 2, 4),
        layers=[
            DeconvSpec(kernel=4, stride=2, pad=1, out_channels=6),
            DeconvSpec(kernel=4, stride=2, pad=1, out_channels=3),
        ],
        t_k=[4, 12],
        sigma=0.3,
    )


def random_params(
    config: GeneratorConfig,
    seed: int,
    weight_std: float = 0.3,
    bias_std: float = 0.1,
) -> GeneratorParams:
    """Parameters at a larger scale than init_params, with non-zero biases."""
    rng = np.random.default_rng(seed)
    shapes = config.feature_shapes()
    fc_len = int(np.prod(config.fc_shape))
    kernels, biases = [], []
    for i, spec in enumerate(config.layers):
        c_in, c_out = shapes[i][2], shapes[i + 1][2]
        std = weight_std / np.sqrt(c_in)
        shape = (c_in, spec.kernel, spec.kernel, c_out)
        kernels.append(rng.normal(0.0, std, size=shape))
        biases.append(rng.normal(0.0, bias_std, size=c_out))
    return GeneratorParams(
        W_fc=rng.normal(0.0, weight_std, size=(config.d, fc_len)),
        b_fc=rng.normal(0.0, bias_std, size=fc_len),
        kernels=kernels,
        biases=biases,
    )


@pytest.fixture
def make_params():
    return random_params


@pytest.fixture(scope="session")
def desk_trained():
    """The default generator after 100 epochs on 200 toy images, once per session."""
    set_precision("float64")
    dataset = make_toy_corpus(200, size=16, seed=0)
    return train(dataset, GeneratorConfig(), TrainConfig(epochs=100), seed=0)
