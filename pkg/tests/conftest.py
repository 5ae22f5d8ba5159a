import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dc(rng, c=None):
    """Admissible DC parameters with moderate decay."""
    from volterra_krm import DcParams
    return DcParams(1.0 if c is None else c, float(rng.uniform(0.05, 1.0)), float(rng.uniform(0.0, 1.0)))
