"""Uniform node grids, staggered field containers, and 2x2 tensor algebra.

Layout convention: node (i, j) sits at (i*hx, j*hy) and arrays are stored
with shape (ny, nx), so values[j, i] is the node and the flattened
row-major id is j*nx + i.  Cells are the (ny-1, nx-1) squares spanned by
four adjacent nodes; vectors, tensors, and cell scalars are sampled at
cell centers.

The discrete gradient averages the two finite differences per direction
inside each cell, which is the bilinear-interpolant gradient at the cell
center and is exact for affine nodal data.  `divergence` is its exact
negative transpose, so the total-variation quadrature and the divergence
used by the primal-dual scheme are exact discrete duals:

    sum_cells (grad u . B) == - sum_nodes u * divergence(B)

All field values are float64 and frozen after construction.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class GridError(ValueError):
    """Raised when a grid, mask, or field container violates its contract."""


def _as_float64(values, shape, what):
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != shape:
        raise GridError(f"{what} has shape {arr.shape}, expected {shape}")
    return arr


class Grid2D:
    """Uniform rectangular grid of nx*ny nodes with spacing (hx, hy).

    `mask` marks nodes belonging to the closed computational domain.
    Boundary nodes are masked nodes with at least one unmasked or
    out-of-range 4-neighbor; their sorted row-major ids are kept in
    `boundary_ids`.  Interior nodes (mask true with all four neighbors
    masked) must form a single nonempty 4-connected component.
    """

    def __init__(self, nx: int, ny: int, hx: float, hy: float, mask=None):
        nx, ny = int(nx), int(ny)
        if nx < 3 or ny < 3:
            raise GridError(f"grid needs at least 3 nodes per direction, got {nx}x{ny}")
        if not (hx > 0.0 and hy > 0.0):
            raise GridError(f"grid spacings must be positive, got hx={hx}, hy={hy}")
        self.nx = nx
        self.ny = ny
        self.hx = float(hx)
        self.hy = float(hy)
        if mask is None:
            mask = np.ones((ny, nx), dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (ny, nx):
                raise GridError(f"mask has shape {mask.shape}, expected {(ny, nx)}")
        self.mask = mask.copy()
        self.mask.setflags(write=False)

        padded = np.pad(self.mask, 1, constant_values=False)
        neighbors_in = (
            padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
        )
        interior = self.mask & neighbors_in
        boundary = self.mask & ~neighbors_in
        self._interior = interior
        self._interior.setflags(write=False)
        self.boundary_ids = np.flatnonzero(boundary.ravel())
        self.boundary_ids.setflags(write=False)

        if not interior.any():
            raise GridError("grid mask has no interior nodes")
        _, ncomp = ndimage.label(interior, structure=_CROSS)
        if ncomp != 1:
            raise GridError(f"interior nodes split into {ncomp} components, expected 1")

        cells = (
            self.mask[:-1, :-1] & self.mask[:-1, 1:] & self.mask[1:, :-1] & self.mask[1:, 1:]
        )
        self._cells_in = cells
        self._cells_in.setflags(write=False)

    # -- shapes and coordinates -------------------------------------------

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def cell_shape(self):
        return (self.ny - 1, self.nx - 1)

    @property
    def n_nodes(self):
        return self.nx * self.ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    def interior_mask(self):
        return self._interior

    def cells_in_domain(self):
        """Boolean (ny-1, nx-1) mask of cells whose four corners are all masked in."""
        return self._cells_in

    def node_coords(self):
        x = np.arange(self.nx) * self.hx
        y = np.arange(self.ny) * self.hy
        return np.meshgrid(x, y)

    def cell_centers(self):
        x = (np.arange(self.nx - 1) + 0.5) * self.hx
        y = (np.arange(self.ny - 1) + 0.5) * self.hy
        return np.meshgrid(x, y)

    def same_layout(self, other) -> bool:
        return (
            self.nx == other.nx
            and self.ny == other.ny
            and self.hx == other.hx
            and self.hy == other.hy
            and np.array_equal(self.mask, other.mask)
        )


def _check_finite(values, where, what):
    bad = where & ~np.isfinite(values)
    if bad.any():
        j, i = np.argwhere(bad)[0]
        raise GridError(f"{what} has a non-finite value at index ({j}, {i}) inside the domain")


class ScalarField:
    """Float64 samples on grid nodes (location='node') or cells ('cell').

    Values must be finite wherever the location is inside the domain;
    NaN is allowed only on masked-out entries.
    """

    def __init__(self, grid: Grid2D, values, location: str = "node"):
        if location not in ("node", "cell"):
            raise GridError(f"unknown scalar location {location!r}")
        shape = grid.shape if location == "node" else grid.cell_shape
        arr = _as_float64(values, shape, f"{location} scalar field")
        where = grid.mask if location == "node" else grid.cells_in_domain()
        _check_finite(arr, where, f"{location} scalar field")
        self.grid = grid
        self.location = location
        self.values = arr.copy()
        self.values.setflags(write=False)

    def in_domain(self):
        return self.grid.mask if self.location == "node" else self.grid.cells_in_domain()


class VectorField2:
    """Cell-centered 2-vector field with components v1 (x) and v2 (y)."""

    def __init__(self, grid: Grid2D, v1, v2):
        shape = grid.cell_shape
        v1 = _as_float64(v1, shape, "vector component v1")
        v2 = _as_float64(v2, shape, "vector component v2")
        where = grid.cells_in_domain()
        _check_finite(v1, where, "vector component v1")
        _check_finite(v2, where, "vector component v2")
        self.grid = grid
        self.v1 = v1.copy()
        self.v2 = v2.copy()
        self.v1.setflags(write=False)
        self.v2.setflags(write=False)


class TensorField2:
    """Cell-centered symmetric positive definite 2x2 tensor field.

    Entries (s11, s12, s22) must make every in-domain cell SPD.  The
    uniform ellipticity constants are recorded at construction:
    `m` and `M` are the extreme eigenvalues over in-domain cells, so

        m^(1/2) |xi| <= |xi|_S <= M^(1/2) |xi|

    holds cellwise for the norms computed by `norm`.
    """

    def __init__(self, grid: Grid2D, s11, s12, s22):
        shape = grid.cell_shape
        s11 = _as_float64(s11, shape, "tensor entry s11")
        s12 = _as_float64(s12, shape, "tensor entry s12")
        s22 = _as_float64(s22, shape, "tensor entry s22")
        where = grid.cells_in_domain()
        for name, arr in (("s11", s11), ("s12", s12), ("s22", s22)):
            _check_finite(arr, where, f"tensor entry {name}")
        det = s11 * s22 - s12 * s12
        bad = where & ((s11 <= 0.0) | (det <= 0.0))
        if bad.any():
            j, i = np.argwhere(bad)[0]
            raise GridError(f"tensor field is not SPD at cell ({j}, {i})")
        half_tr = 0.5 * (s11 + s22)
        rad = np.sqrt((0.5 * (s11 - s22)) ** 2 + s12 * s12)
        self.m = float(np.min((half_tr - rad)[where]))
        self.M = float(np.max((half_tr + rad)[where]))
        self.grid = grid
        self.s11 = s11.copy()
        self.s12 = s12.copy()
        self.s22 = s22.copy()
        for arr in (self.s11, self.s12, self.s22):
            arr.setflags(write=False)

    @classmethod
    def constant(cls, grid: Grid2D, s11: float, s12: float, s22: float):
        shape = grid.cell_shape
        return cls(
            grid,
            np.full(shape, float(s11)),
            np.full(shape, float(s12)),
            np.full(shape, float(s22)),
        )

    @property
    def entries(self):
        return self.s11, self.s12, self.s22

    def det(self):
        return sym2_det(self.s11, self.s12, self.s22)

    def apply(self, x1, x2):
        return sym2_apply(self.s11, self.s12, self.s22, x1, x2)

    def norm(self, x1, x2):
        return sym2_norm(self.s11, self.s12, self.s22, x1, x2)

    def inv_norm(self, x1, x2):
        i11, i12, i22 = sym2_inv(self.s11, self.s12, self.s22)
        return sym2_norm(i11, i12, i22, x1, x2)


# -- dense 2x2 symmetric algebra, vectorized over trailing grids ----------


def sym2_apply(s11, s12, s22, x1, x2):
    return s11 * x1 + s12 * x2, s12 * x1 + s22 * x2


def sym2_det(s11, s12, s22):
    return s11 * s22 - s12 * s12


def sym2_inv(s11, s12, s22):
    det = sym2_det(s11, s12, s22)
    return s22 / det, -s12 / det, s11 / det


def sym2_norm(s11, s12, s22, x1, x2):
    w1, w2 = sym2_apply(s11, s12, s22, x1, x2)
    q = w1 * x1 + w2 * x2
    return np.sqrt(np.maximum(q, 0.0))


def sym2_sqrt(s11, s12, s22):
    """Symmetric square root of an SPD 2x2: (S + sqrt(det) I) / sqrt(tr + 2 sqrt(det))."""
    s = np.sqrt(sym2_det(s11, s12, s22))
    t = np.sqrt(s11 + s22 + 2.0 * s)
    return (s11 + s) / t, s12 / t, (s22 + s) / t


def tensor_apply(tensor: TensorField2, vec: VectorField2) -> VectorField2:
    """Apply a cell tensor field to a cell vector field: w = S xi per cell."""
    w1, w2 = tensor.apply(vec.v1, vec.v2)
    return VectorField2(tensor.grid, w1, w2)


# -- staggered calculus -----------------------------------------------------


def gradient(u: ScalarField) -> VectorField2:
    """Cell-centered gradient of a node scalar.

    Per cell, each component is the average of the two one-sided
    differences in that direction divided by the spacing; this equals
    the gradient of the bilinear interpolant at the cell center and is
    exact for affine nodal data.
    """
    if u.location != "node":
        raise GridError("gradient expects a node-located scalar field")
    g = u.grid
    vals = u.values
    v1 = ((vals[:-1, 1:] - vals[:-1, :-1]) + (vals[1:, 1:] - vals[1:, :-1])) / (2.0 * g.hx)
    v2 = ((vals[1:, :-1] - vals[:-1, :-1]) + (vals[1:, 1:] - vals[:-1, 1:])) / (2.0 * g.hy)
    out = g.cells_in_domain()
    if not out.all():
        v1 = np.where(out, v1, np.nan)
        v2 = np.where(out, v2, np.nan)
    return VectorField2(g, v1, v2)


def divergence(w: VectorField2) -> ScalarField:
    """Node divergence defined as the exact negative transpose of `gradient`.

    Out-of-domain cell values are treated as zero, which realizes the
    compact-support convention for dual fields.
    """
    g = w.grid
    cells = g.cells_in_domain()
    b1 = np.where(cells, w.v1, 0.0) / (2.0 * g.hx)
    b2 = np.where(cells, w.v2, 0.0) / (2.0 * g.hy)
    out = np.zeros(g.shape)
    out[:-1, :-1] += -b1 - b2
    out[:-1, 1:] += b1 - b2
    out[1:, :-1] += -b1 + b2
    out[1:, 1:] += b1 + b2
    return ScalarField(g, -out, location="node")


def cell_integral(grid: Grid2D, cell_values, cells=None) -> float:
    """Midpoint quadrature: sum of cell values times cell area over selected cells."""
    sel = grid.cells_in_domain() if cells is None else cells
    return float(np.sum(np.where(sel, cell_values, 0.0))) * grid.cell_area


def sample_cell_field(grid: Grid2D, cell_values, x, y):
    """Bilinear interpolation of cell-centered data at points (x, y).

    Cell centers form the interpolation lattice; query points are clamped
    to it, so the half-cell rim next to the boundary is held constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ncx, ncy = grid.nx - 1, grid.ny - 1
    fx = np.clip(x / grid.hx - 0.5, 0.0, ncx - 1.0)
    fy = np.clip(y / grid.hy - 0.5, 0.0, ncy - 1.0)
    i0 = np.minimum(fx.astype(np.int64), ncx - 2) if ncx > 1 else np.zeros_like(fx, np.int64)
    j0 = np.minimum(fy.astype(np.int64), ncy - 2) if ncy > 1 else np.zeros_like(fy, np.int64)
    tx = fx - i0
    ty = fy - j0
    i1 = np.minimum(i0 + 1, ncx - 1)
    j1 = np.minimum(j0 + 1, ncy - 1)
    v = np.asarray(cell_values, dtype=np.float64)
    return (
        v[j0, i0] * (1 - tx) * (1 - ty)
        + v[j0, i1] * tx * (1 - ty)
        + v[j1, i0] * (1 - tx) * ty
        + v[j1, i1] * tx * ty
    )
