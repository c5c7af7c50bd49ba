import numpy as np
import pytest

from tumorcal.grid import BinaryMask, Region, RegionLabels, build_grid, region_labels_from_masks
from tumorcal.phantom import PhantomSpec, make_brain_phantom


def ellipse_mask(nx, ny, h, shrink=0.45):
    x = (np.arange(nx) + 0.5) * h
    y = (np.arange(ny) + 0.5) * h
    X, Y = np.meshgrid(x, y)
    cx, cy = nx * h / 2, ny * h / 2
    return ((X - cx) / (shrink * nx * h)) ** 2 + ((Y - cy) / (shrink * ny * h)) ** 2 <= 1


def half_split_labels(grid, band=0.0):
    """GM on the left half, WM on the right half of the brain."""
    left = np.zeros(grid.shape, bool)
    left[:, : grid.nx // 2] = True
    gm = BinaryMask(grid, left)
    wm = BinaryMask(grid, ~left)
    return region_labels_from_masks(grid, gm, wm, band)


def uniform_labels(grid, region=Region.GM):
    lab = np.where(grid.brain_mask, int(region), 0)
    return RegionLabels(grid, lab)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_grid():
    return build_grid(16, 20, 0.5, 0.5, ellipse_mask(16, 20, 0.5))


@pytest.fixture(scope="session")
def small_phantom():
    """Coarse version of the default phantom (h = 0.5 mm)."""
    return make_brain_phantom(PhantomSpec(nx=21, ny=31, hx=0.5, hy=0.5, tumor_center=(4.25, 5.25)))


@pytest.fixture(scope="session")
def default_phantom():
    return make_brain_phantom(PhantomSpec())


ACCEPTANCE_LINES = []


def report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
