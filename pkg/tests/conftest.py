from __future__ import annotations

import pytest

from rgir import generator as G

WEIGHTS_SEED = 7


@pytest.fixture(scope="session")
def weights64():
    return G.generate_weights(G.GeneratorConfig(), WEIGHTS_SEED)


@pytest.fixture(scope="session")
def weights16():
    cfg = G.GeneratorConfig(resolution=16, num_layers=4)
    return G.generate_weights(cfg, WEIGHTS_SEED)


@pytest.fixture(scope="session")
def mean64(weights64):
    return G.mean_latent(weights64)


@pytest.fixture(scope="session")
def mean16(weights16):
    return G.mean_latent(weights16)
