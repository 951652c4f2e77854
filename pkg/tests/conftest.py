import numpy as np
import pytest

from condnets.architectures import toy_routed_net
from condnets.trainer import init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_net():
    arch = toy_routed_net(3, 2, routes=2)
    return arch, init_params(arch, seed=3)
