import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from roict.config import _spacing_for
from roict.geometry import Ball, Detector, SourceGeometry
from roict.inversion import VolumeGrid
from roict.phantom import gaussian_blob

settings.register_profile(
    "roict", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture]
)
settings.load_profile("roict")

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str):
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


# small, fast set-ups: a 16^3 grid of 4-unit voxels inside B of radius 32


SMALL_B = Ball((0.0, 0.0, 0.0), 32.0)


def small_detector(rows=24, sdd=240.0, dist=120.0, radius=32.0):
    return Detector(rows, rows, _spacing_for(rows, sdd, dist, radius), sdd)


@pytest.fixture(scope="session")
def small_grid():
    return VolumeGrid.inscribing(SMALL_B, 16)


@pytest.fixture(scope="session")
def small_circle():
    return SourceGeometry.circle(120.0, small_detector(), SMALL_B, n_views=36)


@pytest.fixture(scope="session")
def small_twin():
    return SourceGeometry.twin_circles(120.0, small_detector(), SMALL_B, n_views=36)


@pytest.fixture(scope="session")
def small_sphere():
    return SourceGeometry.sphere(120.0, small_detector(), SMALL_B, polar_step=30.0, azimuth_step=30.0)


@pytest.fixture(scope="session")
def small_blob(small_grid):
    return gaussian_blob(small_grid.n, small_grid.voxel_size, 8.0, (3.0, -2.0, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_l2(a, b):
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / np.linalg.norm(np.ravel(b)))


def rel_l1(a, b):
    return float(np.abs(np.ravel(a) - np.ravel(b)).sum() / np.abs(np.ravel(b)).sum())


SQRT3 = math.sqrt(3.0)
