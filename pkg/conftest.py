import numpy as np
import pytest

from models import (
    AnchorSet,
    CameraIntrinsics,
    FilterConfig,
    InitialConfig,
    MarkerSet,
    ModuleParams,
    NoiseConfig,
    Scenario,
    TargetConfig,
)
from onboard.estimator import EstimatorState


@pytest.fixture
def params():
    return ModuleParams()


@pytest.fixture
def anchors():
    return AnchorSet()


@pytest.fixture
def fcfg():
    return FilterConfig()


@pytest.fixture
def markers():
    return MarkerSet()


@pytest.fixture
def intr():
    return CameraIntrinsics()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def settled_est():
    """Estimator at (1.0, 1.5) at rest with a tight covariance."""
    return EstimatorState(zeta=np.array([1.0, 1.5, 0.0, 0.0]), P=np.diag([1e-4, 1e-4, 1e-4, 1e-4]))


@pytest.fixture
def make_scenario():
    """Builder for short scenarios; keyword overrides replace top-level fields."""

    def _make(**overrides):
        base = dict(
            name="test",
            mission="waypoint",
            duration_s=2.0,
            seed=5,
            initial=InitialConfig(x_m=0.8, y_m=1.2, psi_rad=0.2),
            target=TargetConfig(x_m=1.5, y_m=1.5),
            noise=NoiseConfig(),
        )
        base.update(overrides)
        return Scenario(**base)

    return _make
