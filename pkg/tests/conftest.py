import numpy as np
import pytest
import torch

from corrseg.phantom import PhantomConfig, generate_phantom


@pytest.fixture
def double_precision():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(scope="session")
def small_phantoms():
    return generate_phantom(PhantomConfig(seed=11, shape=(16, 16, 16), n_cases=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
