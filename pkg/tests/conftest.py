import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from f3.events import EventStream, SensorGeometry

settings.register_profile("f3", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("f3")


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


def random_stream(rng, n=1000, width=32, height=24, t_max=50_000):
    return EventStream.from_arrays(np.sort(rng.integers(0, t_max, n)), rng.integers(0, width, n),
                                   rng.integers(0, height, n), rng.choice([-1, 1], n),
                                   SensorGeometry(width, height))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
