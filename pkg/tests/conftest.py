import numpy as np
import pytest
from hypothesis import settings
from scipy.spatial.transform import Rotation

from pose4d.geometry import Intrinsics, Pose

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_pose(rng, max_angle=np.pi, max_shift=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    R = Rotation.from_rotvec(axis * angle).as_matrix()
    return Pose(R, rng.uniform(-max_shift, max_shift, 3))


def in_frustum_points(rng, pose, K, n, zmin=0.5, zmax=5.0):
    """World points whose projections land inside the image of ``K``."""
    u = rng.uniform(-0.5, K.width - 0.5, n)
    v = rng.uniform(-0.5, K.height - 0.5, n)
    z = rng.uniform(zmin, zmax, n)
    cam = np.column_stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])
    return (cam - pose.translation) @ pose.rotation, np.column_stack([u, v]), z


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def K100():
    return Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


@pytest.fixture
def K64():
    return Intrinsics.from_fov(64, 64, 1.0)


ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    """Remember an acceptance verdict for the end-of-run summary."""
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        ok, detail = ACCEPTANCE.get(n, (False, "not run to completion"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
