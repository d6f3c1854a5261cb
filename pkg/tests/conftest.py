import numpy as np
import pytest

from gscodec.model import GaussianCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cloud():
    return GaussianCloud.random(100, seed=7)
