import numpy as np
import pytest

from pullsim import validate_config


@pytest.fixture(scope="session")
def two_pool_cfg():
    """The heterogeneous two-pool reference system (unbounded buffers)."""
    return validate_config(
        pool_fractions=(0.5, 0.5),
        service_rates=(1.0, 2.0),
        arrival_rate=1.0,
        num_servers=100,
        num_routers=3,
        buffer_sizes=(None, None),
    )


@pytest.fixture(scope="session")
def two_pool_unit_cfg():
    """Same system with unit buffers everywhere."""
    return validate_config(
        pool_fractions=(0.5, 0.5),
        service_rates=(1.0, 2.0),
        arrival_rate=1.0,
        num_servers=100,
        num_routers=3,
        buffer_sizes=(1, 1),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260811)
