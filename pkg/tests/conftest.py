import numpy as np
import pytest

from geoctrl.geometry import AnnularDamping, DriftMetric, MinkowskiMetric, PhotonSphereMetric, photon_sphere_radii
from geoctrl.trapping import sample_trapped_set


@pytest.fixture(scope="session")
def minkowski():
    return MinkowskiMetric()


@pytest.fixture(scope="session")
def photon():
    return PhotonSphereMetric()


@pytest.fixture(scope="session")
def drift():
    return DriftMetric()


@pytest.fixture(scope="session")
def bump_damping():
    return AnnularDamping()


@pytest.fixture(scope="session")
def r_star(photon):
    return photon_sphere_radii(photon)[0]


@pytest.fixture(scope="session")
def trapped32(photon):
    return sample_trapped_set(photon, 32, s_max=1000.0, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def circular_seed(metric, r, branch="plus"):
    """Tangential unit-momentum point on the characteristic set at radius r."""
    c = float(metric.speed(r))
    tau = c if branch == "plus" else -c
    return np.array([0.0, r, 0.0, 0.0, tau, 0.0, 1.0, 0.0])
