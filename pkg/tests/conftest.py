import numpy as np
import pytest

from gtadapt.core import make_rng


@pytest.fixture
def rng():
    return make_rng(1234, 0, "test")


def sigma3(p, n):
    """Three binomial standard errors for a proportion p over n draws."""
    return 3.0 * np.sqrt(p * (1 - p) / n)
