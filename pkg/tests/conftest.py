"""Shared builders for the test suite.

The benchmark problem reused across files is a smooth conductivity bump
over a rotated anisotropic background with a linear boundary trace; it
has no degenerate set, so every recovery quantity has a clean truth to
compare against.
"""

import numpy as np
import pytest

from acdii.data import synthesize_triplet
from acdii.fields import Grid2D, ScalarField, TensorField2


def make_grid(n: int, lx: float = 1.0, ly: float = 1.0) -> Grid2D:
    return Grid2D(n, n, lx / (n - 1), ly / (n - 1))


def rotated_tensor(grid: Grid2D, angle: float, d1: float, d2: float) -> TensorField2:
    ct, st = np.cos(angle), np.sin(angle)
    return TensorField2.constant(
        grid,
        d1 * ct * ct + d2 * st * st,
        (d1 - d2) * st * ct,
        d1 * st * st + d2 * ct * ct,
    )


def bump_problem(n: int):
    """(grid, c, sigma0, f): gaussian conductivity bump, rotated diag(2,1)
    background, trace f = x."""
    grid = make_grid(n)
    xc, yc = grid.cell_centers()
    r2 = (xc - 0.5) ** 2 + (yc - 0.5) ** 2
    c = ScalarField(grid, 1.0 + 0.5 * np.exp(-r2 / (2.0 * 0.15**2)), location="cell")
    sigma0 = rotated_tensor(grid, np.pi / 6.0, 2.0, 1.0)
    x, _ = grid.node_coords()
    f = ScalarField(grid, x)
    return grid, c, sigma0, f


def bump_triplet(n: int):
    grid, c, sigma0, f = bump_problem(n)
    return synthesize_triplet(c, sigma0, f, grid)


@pytest.fixture(scope="session")
def bump33():
    return bump_triplet(33)


@pytest.fixture(scope="session")
def recon33(bump33):
    from acdii.inverse import TVProblem, reconstruct

    return reconstruct(TVProblem(bump33), algorithm="both")


_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.line(line)
