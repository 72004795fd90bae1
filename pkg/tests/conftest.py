import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scenario():
    """A 12 m corridor walk past four beacons, about 16 s long."""
    from riloc.frontend import Box
    from riloc.sensors import BeaconMap
    from riloc.simulator import Scenario, SensorNoiseSpec, TrajectorySpec, WorldSpec

    beacons = BeaconMap()
    for k, (x, y, z) in enumerate([(2, 3, 2.5), (6, -1, 0.5), (10, 3, 2.5), (14, -1, 0.5)]):
        beacons.add(f"b{k}", (x, y, z), 0.5)
    world = WorldSpec(Box((-2, -4, 0), (18, 6, 3)), beacons, floor_height=1.0)
    traj = TrajectorySpec(((1.0, 1.0, 1.0), (13.0, 1.0, 1.0)))
    return Scenario(traj, world, SensorNoiseSpec())
