import numpy as np
import pytest

from emsampling.forward import (CONTRAST_A, Ball, Bump, ContrastScene, Primitive, VolumeGrid,
                                assemble_far_field_data)
from emsampling.geometry import DEFAULT_POLARIZATION, antipodal_symmetrize, fibonacci_directions

K = 8.0


@pytest.fixture(scope="session")
def ball_scene():
    return ContrastScene((Primitive(Ball((0.1, -0.05, 0.2), 0.3), Bump(CONTRAST_A)),))


@pytest.fixture(scope="session")
def small_data(ball_scene):
    """Polarized data, 50 x 50 Fibonacci directions."""
    ds = fibonacci_directions(50)
    return assemble_far_field_data(ball_scene, ds, ds, DEFAULT_POLARIZATION, K)


@pytest.fixture(scope="session")
def full_data(ball_scene):
    """Full 3x3 matrices on an antipodally closed 50-direction set, coarse grid."""
    ds = antipodal_symmetrize(fibonacci_directions(25))
    grid = VolumeGrid.for_scene(ball_scene, K, cells=16)
    return assemble_far_field_data(ball_scene, ds, ds, DEFAULT_POLARIZATION, K, full=True,
                                   grid=grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
