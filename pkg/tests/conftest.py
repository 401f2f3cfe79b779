import numpy as np
import pytest

from msbm.control_net import Architecture, ControlFunction
from msbm.msbm_train import MsbmConfig
from msbm.reference_bridge import ReferenceProcess
from msbm.time_grid import MarginalDataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def brownian():
    return ReferenceProcess(sigma=1.0)


@pytest.fixture
def three_times(rng):
    """1-D marginals at t = 0, 1, 2 with unequal sample counts."""
    return MarginalDataset.from_arrays(
        [0.0, 1.0, 2.0],
        [rng.normal(0, 0.1, (40, 1)), rng.normal(2, 0.1, (55, 1)), rng.normal(0, 0.1, (30, 1))],
    )


@pytest.fixture
def small_net(rng):
    return ControlFunction(Architecture(dim=2, hidden=8, depth=1, embedding=4), role="forward", rng=rng)


@pytest.fixture
def quick_config():
    return MsbmConfig(
        outer_iterations=2,
        inner_steps=5,
        batch_size=32,
        sigma=0.5,
        learning_rate=1e-3,
        steps_per_interval=5,
        hidden=8,
        depth=1,
        embedding=4,
        ema_decay=0.9,
        metric_samples=30,
    )
