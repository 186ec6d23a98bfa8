import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from trackfeat.geometry import Camera, DepthMap
from trackfeat.scenegen import SceneParams, make_scene


def random_rotation(rng, max_angle=np.pi):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()


def intrinsics(f=100.0, cx=50.0, cy=50.0):
    return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])


def identity_camera(f=100.0, cx=50.0, cy=50.0):
    return Camera(intrinsics(f, cx, cy), np.eye(3), np.zeros(3))


def flat_depth(h, w, z):
    return DepthMap(np.full((h, w), float(z)), np.ones((h, w), dtype=bool))


@pytest.fixture(scope="session")
def planar_scenes():
    return [make_scene(SceneParams(), seed) for seed in range(6)]


@pytest.fixture(scope="session")
def bumpy_scenes():
    return [make_scene(SceneParams(surface="heightfield"), seed) for seed in range(4)]


def numeric_grad(f, x, eps=1e-4):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        hi = f(x)
        x[idx] = old - eps
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
