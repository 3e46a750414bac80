import numpy as np
import pytest

from rangeseg.projection import ProjectionConfig
from rangeseg.synth import generate_scan, random_scene


@pytest.fixture(scope="session")
def small_proj():
    return ProjectionConfig(H=16, W=64)


@pytest.fixture(scope="session")
def synth_scans():
    """Four collision-free 64x256 synthetic scans."""
    return [generate_scan(random_scene(100 + i, beams=64, azimuth_steps=256)) for i in range(4)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
