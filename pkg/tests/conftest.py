import numpy as np
import pytest

from geoflow.grid import GridSpec, ScalarField, VectorField
from geoflow.kernel import KernelSpec


def disc_image(grid, center, radius, edge=1.5):
    """Soft-edged disc with unit intensity."""
    x = grid.points()
    r = np.linalg.norm(x - np.asarray(center), axis=-1)
    return ScalarField(grid, 0.5 * (1.0 - np.tanh((r - radius) / edge)))


def random_momentum(grid, seed, scale=1.0, smooth_sigma=2.0):
    """Smooth random momentum field (Gaussian-filtered white noise)."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(*grid.dims, grid.ndim))
    vec = np.stack([gaussian_filter(raw[..., a], smooth_sigma) for a in range(grid.ndim)], axis=-1)
    return VectorField(grid, scale * vec)


@pytest.fixture
def grid32():
    return GridSpec.uniform((32, 32))


@pytest.fixture
def grid16():
    return GridSpec.uniform((16, 16))


@pytest.fixture
def kernel_small():
    return KernelSpec.from_sigmas([2.0, 4.0])


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
