import numpy as np
import pytest

from beliefpic.model import scalar_model


@pytest.fixture
def quad_model():
    """q(x) = phi(x) = x^2 with lam = R_a = R_o = T = 1."""
    return scalar_model(q=(2.0, 0.0, 0.0), phi=(2.0, 0.0, 0.0))


def random_spd(rng, n, floor=0.2):
    M = rng.standard_normal((n, n))
    return M @ M.T + floor * np.eye(n)
