import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'backend'))

from config import RunConfig  # noqa: E402
from simulate import default_demand, desk_network, generate_trips, generate_truth  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs, enabled with RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def desk_net():
    return desk_network()


@pytest.fixture
def small_cfg():
    return RunConfig(n_intervals=4, rank=2, burn_in=3, samples=12, seed=11, log_every=1000,
                     predictive_draws=12, m0_policy="nominal")


@pytest.fixture(scope="session")
def small_dataset(desk_net):
    """Desk network, T=4 and R=2 ground truth, a few trips per (O-D, interval)"""
    cfg = RunConfig(n_intervals=4, rank=2, seed=5)
    rng = np.random.default_rng(2024)
    truth = generate_truth(desk_net, 4, 2, cfg, rng)
    demand = default_demand(desk_net.path_table, 4, multi_path=3, single_path=1)
    trips = generate_trips(truth, desk_net, demand, rng)
    return desk_net, truth, trips
