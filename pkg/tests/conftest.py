import numpy as np
import pytest

from dfmvr.bundle import make_bundle
from dfmvr.camera import CameraIntrinsics, ViewPose
from dfmvr.morphable_model import generate_toy_model


@pytest.fixture(scope="session")
def toy():
    return generate_toy_model(seed=0, V_target=1000)


@pytest.fixture(scope="session")
def small_bundle():
    return make_bundle(seed=3, V=600, size=48)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def front_pose(distance=1000.0, **kw):
    return ViewPose(tz=distance, **kw)


def small_camera(size=32):
    return CameraIntrinsics.default(size)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.max(np.abs(a)), floor))


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g
