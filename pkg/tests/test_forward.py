"""Forward solver against an independent dense assembly oracle.

The oracle below re-derives the stiffness matrix with plain Python loops
and 2x2 Gauss quadrature of bilinear basis gradients, applies Dirichlet
elimination by hand, and solves densely.  It shares no code with the
package's assembly path, so agreement to 1e-10 pins both sides.
"""

import numpy as np
import pytest

from acdii.fields import Grid2D, GridError, ScalarField, TensorField2, gradient
from acdii.forward import (
    AssemblyError,
    ConvergenceError,
    InclusionSet,
    assemble,
    disk_cells,
    element_templates,
    energy,
    h1_seminorm_sq,
    rect_cells,
    solve_dirichlet,
    solve_inclusion_limit,
    solve_penalized,
)
from conftest import bump_problem, make_grid, rotated_tensor

_GAUSS = ((3.0 - np.sqrt(3.0)) / 6.0, (3.0 + np.sqrt(3.0)) / 6.0)


def _shape_grads(xi, eta, hx, hy):
    # local order (i,j), (i+1,j), (i,j+1), (i+1,j+1)
    return [
        (-(1.0 - eta) / hx, -(1.0 - xi) / hy),
        ((1.0 - eta) / hx, -xi / hy),
        (-eta / hx, (1.0 - xi) / hy),
        (eta / hx, xi / hy),
    ]


def dense_stiffness(grid, c_cells, s11, s12, s22):
    """Loop-assembled global stiffness matrix for sigma = c * sigma0."""
    n = grid.nx * grid.ny
    K = np.zeros((n, n))
    for j in range(grid.ny - 1):
        for i in range(grid.nx - 1):
            ids = [
                j * grid.nx + i,
                j * grid.nx + i + 1,
                (j + 1) * grid.nx + i,
                (j + 1) * grid.nx + i + 1,
            ]
            m = c_cells[j, i] * np.array(
                [[s11[j, i], s12[j, i]], [s12[j, i], s22[j, i]]]
            )
            for xi in _GAUSS:
                for eta in _GAUSS:
                    grads = _shape_grads(xi, eta, grid.hx, grid.hy)
                    w = 0.25 * grid.hx * grid.hy
                    for a in range(4):
                        ga = np.array(grads[a])
                        for b in range(4):
                            K[ids[a], ids[b]] += w * (m @ ga) @ np.array(grads[b])
    return K


def dense_solve(grid, c_cells, sigma0, f_nodes):
    K = dense_stiffness(grid, c_cells, sigma0.s11, sigma0.s12, sigma0.s22)
    nb = grid.boundary_ids
    inter = np.setdiff1d(np.arange(grid.nx * grid.ny), nb)
    fb = f_nodes.ravel()[nb]
    rhs = -K[np.ix_(inter, nb)] @ fb
    ui = np.linalg.solve(K[np.ix_(inter, inter)], rhs)
    out = np.empty(grid.nx * grid.ny)
    out[nb] = fb
    out[inter] = ui
    return out.reshape(grid.ny, grid.nx)


def test_oracle_single_cell_matches_analytic_matrix():
    # isotropic unit square element: diag 2/3, edge-adjacent -1/6, diagonal -1/3
    g = Grid2D(3, 3, 0.5, 0.5)
    K = dense_stiffness(g, np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2)), np.ones((2, 2)))
    ids = [0, 1, 3, 4]
    expect = (1.0 / 6.0) * np.array(
        [[4, -1, -1, -2], [-1, 4, -2, -1], [-1, -2, 4, -1], [-2, -1, -1, 4]]
    )
    sub = K[np.ix_(ids, ids)]
    # the shared cells add contributions; isolate cell (0,0) on a fresh grid
    g1 = Grid2D(3, 3, 1.0, 1.0)
    c = np.zeros((2, 2))
    c[0, 0] = 1.0
    K1 = dense_stiffness(g1, c, np.ones((2, 2)), np.zeros((2, 2)), np.ones((2, 2)))
    sub1 = K1[np.ix_([0, 1, 3, 4], [0, 1, 3, 4])]
    assert np.allclose(sub1, expect, atol=1e-14)
    assert np.allclose(sub, sub.T, atol=1e-14)


def test_element_templates_match_oracle_cellwise():
    hx, hy = 0.3, 0.7
    g = Grid2D(3, 3, hx, hy)
    c = np.zeros((2, 2))
    c[0, 0] = 1.0
    for s11, s12, s22 in [(1.0, 0.0, 1.0), (2.0, 0.6, 1.5)]:
        K = dense_stiffness(
            g, c, np.full((2, 2), s11), np.full((2, 2), s12), np.full((2, 2), s22)
        )
        kxx, kxy, kyy = element_templates(hx, hy)
        local = s11 * np.asarray(kxx) + s12 * np.asarray(kxy) + s22 * np.asarray(kyy)
        # counterclockwise local order: (i,j), (i+1,j), (i+1,j+1), (i,j+1)
        ids = [0, 1, 4, 3]
        ref = K[np.ix_(ids, ids)]
        assert np.allclose(local, ref, atol=1e-13)


def test_cg_matches_dense_direct_on_8x8():
    grid = Grid2D(8, 8, 1.0 / 7.0, 1.0 / 7.0)
    xc, yc = grid.cell_centers()
    c_cells = 1.0 + 0.5 * np.exp(-((xc - 0.5) ** 2 + (yc - 0.5) ** 2) / (2 * 0.15**2))
    sigma0 = rotated_tensor(grid, np.pi / 6.0, 2.0, 1.0)
    x, y = grid.node_coords()
    f = np.sin(np.pi * (x + 0.5 * y)) + 0.3 * x
    u_dense = dense_solve(grid, c_cells, sigma0, f)
    system = assemble(c_cells, sigma0, grid)
    u = solve_dirichlet(system, ScalarField(grid, f), tol=1e-13)
    rel = np.linalg.norm(u.values - u_dense) / np.linalg.norm(u_dense)
    assert rel <= 1e-10


def test_affine_solution_reproduced():
    grid = make_grid(9)
    sigma0 = rotated_tensor(grid, 0.4, 3.0, 1.0)
    x, y = grid.node_coords()
    f = 2.0 * x + 3.0 * y - 1.0
    system = assemble(1.7, sigma0, grid)
    u = solve_dirichlet(system, ScalarField(grid, f), tol=1e-12)
    assert np.max(np.abs(u.values - f)) <= 1e-9


def test_maximum_principle():
    grid, c, sigma0, f = bump_problem(17)
    system = assemble(c.values, sigma0, grid)
    u = solve_dirichlet(system, f)
    fb = f.values.ravel()[grid.boundary_ids]
    assert u.values.min() >= fb.min() - 1e-9
    assert u.values.max() <= fb.max() + 1e-9


def test_boundary_values_exact():
    grid, c, sigma0, f = bump_problem(9)
    u = solve_dirichlet(assemble(c.values, sigma0, grid), f)
    assert np.array_equal(
        u.values.ravel()[grid.boundary_ids], f.values.ravel()[grid.boundary_ids]
    )


def test_tied_component_is_exactly_constant():
    grid = make_grid(25)
    disk = disk_cells(grid, (0.5, 0.5), 0.2)
    incl = InclusionSet(grid, perfect=[disk])
    sigma0 = rotated_tensor(grid, 0.2, 2.0, 1.0)
    x, _ = grid.node_coords()
    u = solve_inclusion_limit(sigma0, ScalarField(grid, x), grid, incl)
    nodes = np.zeros((grid.ny, grid.nx), dtype=bool)
    jj, ii = np.nonzero(disk)
    for dj in (0, 1):
        for di in (0, 1):
            nodes[jj + dj, ii + di] = True
    vals = u.values[nodes]
    assert np.max(vals) - np.min(vals) == 0.0


def test_gradient_vanishes_on_tied_cells():
    grid = make_grid(25)
    disk = disk_cells(grid, (0.5, 0.5), 0.2)
    incl = InclusionSet(grid, perfect=[disk])
    x, _ = grid.node_coords()
    u = solve_inclusion_limit(TensorField2.constant(grid, 1.0, 0.0, 1.0),
                              ScalarField(grid, x), grid, incl)
    gr = gradient(u)
    assert np.max(np.abs(gr.v1[disk])) == 0.0
    assert np.max(np.abs(gr.v2[disk])) == 0.0


def test_insulating_interior_fill_is_finite():
    grid = make_grid(33)
    disk = disk_cells(grid, (0.5, 0.5), 0.22)
    incl = InclusionSet(grid, insulating=[disk])
    x, _ = grid.node_coords()
    u = solve_inclusion_limit(TensorField2.constant(grid, 1.0, 0.0, 1.0),
                              ScalarField(grid, x), grid, incl)
    assert np.all(np.isfinite(u.values))


def test_penalized_with_k_one_reproduces_plain_solve():
    grid = make_grid(17)
    disk = disk_cells(grid, (0.5, 0.5), 0.2)
    incl = InclusionSet(grid, perfect=[disk])
    sigma0 = rotated_tensor(grid, 0.1, 2.0, 1.0)
    x, _ = grid.node_coords()
    f = ScalarField(grid, x)
    up = solve_penalized(1.0, sigma0, sigma0, f, grid, incl)
    u0 = solve_dirichlet(assemble(1.0, sigma0, grid), f)
    assert np.array_equal(up.values, u0.values)


def test_penalized_approaches_tied_limit():
    grid = make_grid(17)
    disk = disk_cells(grid, (0.5, 0.5), 0.2)
    incl = InclusionSet(grid, perfect=[disk])
    sigma0 = TensorField2.constant(grid, 1.0, 0.0, 1.0)
    x, _ = grid.node_coords()
    f = ScalarField(grid, x)
    u0 = solve_inclusion_limit(sigma0, f, grid, incl)
    dists = []
    for k in (1e-1, 1e-2, 1e-3):
        uk = solve_penalized(k, sigma0, sigma0, f, grid, incl)
        dists.append(np.linalg.norm(uk.values - u0.values) / np.linalg.norm(u0.values))
    assert dists[0] > dists[1] > dists[2]
    assert dists[2] < 1e-3


def test_penalization_parameter_validated():
    grid = make_grid(9)
    incl = InclusionSet(grid, perfect=[rect_cells(grid, (0.3, 0.3), (0.6, 0.6))])
    sigma0 = TensorField2.constant(grid, 1.0, 0.0, 1.0)
    x, _ = grid.node_coords()
    with pytest.raises(AssemblyError):
        solve_penalized(0.0, sigma0, sigma0, ScalarField(grid, x), grid, incl)
    with pytest.raises(AssemblyError):
        solve_penalized(2.0, sigma0, sigma0, ScalarField(grid, x), grid, incl)


def test_assemble_rejects_nonpositive_c_on_contributing_cells():
    grid = make_grid(9)
    sigma0 = TensorField2.constant(grid, 1.0, 0.0, 1.0)
    c = np.ones(grid.cell_shape)
    c[3, 3] = 0.0
    with pytest.raises(AssemblyError):
        assemble(c, sigma0, grid)
    # but zero c on an excluded cell is fine
    excl = np.zeros(grid.cell_shape, dtype=bool)
    excl[3, 3] = True
    assemble(c, sigma0, grid, exclude_cells=excl)


def test_inclusion_set_validation():
    grid = make_grid(17)
    with pytest.raises(AssemblyError):
        InclusionSet(grid, perfect=[np.zeros(grid.cell_shape, dtype=bool)])
    touching = rect_cells(grid, (0.0, 0.3), (0.4, 0.6))
    with pytest.raises(AssemblyError):
        InclusionSet(grid, perfect=[touching])
    d1 = disk_cells(grid, (0.4, 0.4), 0.15)
    d2 = disk_cells(grid, (0.5, 0.5), 0.15)
    with pytest.raises(AssemblyError):
        InclusionSet(grid, perfect=[d1], insulating=[d2])  # closures intersect
    ring = disk_cells(grid, (0.5, 0.5), 0.3) & ~disk_cells(grid, (0.5, 0.5), 0.15)
    with pytest.raises(AssemblyError):
        InclusionSet(grid, perfect=[ring])  # not simply connected


def test_inclusion_labels_roundtrip():
    grid = make_grid(25)
    incl = InclusionSet(
        grid,
        perfect=[disk_cells(grid, (0.3, 0.3), 0.1)],
        insulating=[disk_cells(grid, (0.7, 0.7), 0.1)],
    )
    back = InclusionSet.from_labels(grid, incl.labels())
    assert np.array_equal(back.perfect_mask(), incl.perfect_mask())
    assert np.array_equal(back.insulating_mask(), incl.insulating_mask())


def test_convergence_error_carries_diagnostics():
    grid, c, sigma0, f = bump_problem(17)
    system = assemble(c.values, sigma0, grid)
    with pytest.raises(ConvergenceError) as exc:
        solve_dirichlet(system, f, tol=1e-15, max_iter=2)
    assert exc.value.iterations == 2
    assert exc.value.residual > 0.0


def test_warm_start_agrees_with_cold_start():
    grid, c, sigma0, f = bump_problem(17)
    system = assemble(c.values, sigma0, grid)
    cold = solve_dirichlet(system, f, tol=1e-12)
    rough = ScalarField(grid, f.values * 0.9 + 0.05)
    warm = solve_dirichlet(system, f, tol=1e-12, x0=rough.values)
    assert np.max(np.abs(cold.values - warm.values)) <= 1e-9


def test_energy_and_h1_seminorm_known_values():
    grid = make_grid(9)
    x, _ = grid.node_coords()
    u = ScalarField(grid, x)
    sigma = TensorField2.constant(grid, 1.0, 0.0, 1.0)
    assert energy(u, sigma) == pytest.approx(0.5, rel=1e-12)
    assert h1_seminorm_sq(u, grid) == pytest.approx(1.0, rel=1e-12)


def test_h1_seminorm_matches_oracle_quadratic_form():
    grid = Grid2D(7, 6, 1.0 / 6.0, 0.2)
    rng = np.random.default_rng(5)
    uv = rng.standard_normal((6, 7))
    K = dense_stiffness(
        grid,
        np.ones(grid.cell_shape),
        np.ones(grid.cell_shape),
        np.zeros(grid.cell_shape),
        np.ones(grid.cell_shape),
    )
    quad = float(uv.ravel() @ K @ uv.ravel())
    assert h1_seminorm_sq(ScalarField(grid, uv), grid) == pytest.approx(quad, rel=1e-12)


def test_disk_and_rect_cell_selectors():
    grid = make_grid(33)
    d = disk_cells(grid, (0.5, 0.5), 0.25)
    xc, yc = grid.cell_centers()
    inside = (xc - 0.5) ** 2 + (yc - 0.5) ** 2 < 0.25**2
    assert np.array_equal(d, inside)
    r = rect_cells(grid, (0.25, 0.25), (0.75, 0.75))
    assert np.array_equal(r, (xc > 0.25) & (xc < 0.75) & (yc > 0.25) & (yc < 0.75))
