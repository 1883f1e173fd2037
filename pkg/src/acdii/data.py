"""Interior data synthesis: currents, their weighted magnitude, noise,
and directory round-trips for admissible (f, sigma0, a) triplets.

The measured scalar is a = |J|_{sigma0^{-1}} with J = -c sigma0 grad u,
so on cells where Ohm's law holds a = c |grad u|_{sigma0}.  Inside a
perfectly conducting component the potential gradient vanishes while the
physical current does not; the synthesizer recovers that interior
current from the penalized problem, J = -(1/k) sigma1 grad u_k with a
small k, so the triplet carries positive data over such components.
On insulating components a is zero exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import Grid2D, ScalarField, TensorField2, VectorField2, gradient
from .forward import (
    InclusionSet,
    assemble,
    solve_dirichlet,
    solve_inclusion_limit,
    solve_penalized,
)
from .io import read_field_file, write_field_file


class DataError(ValueError):
    pass


@dataclass
class AdmissibleTriplet:
    """Boundary data f, background tensor sigma0, interior magnitude a.

    a is cell-located and nonnegative; it vanishes exactly on insulating
    cells.  `provenance` records how the triplet was made (true factor,
    true potential, noise, seed) when it came from synthesis.
    """

    f: ScalarField
    sigma0: TensorField2
    a: ScalarField
    grid: Grid2D
    inclusions: InclusionSet | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.a.location != "cell":
            raise DataError("a must be cell-located")
        cells = self.grid.cells_in_domain()
        avals = self.a.values
        if (cells & (avals < 0.0)).any():
            raise DataError("a must be nonnegative")
        if self.inclusions is not None:
            ins = self.inclusions.insulating_mask()
            if (cells & ins & (avals != 0.0)).any():
                raise DataError("a must vanish exactly on insulating cells")

    def zero_cells(self, tol: float = 0.0) -> np.ndarray:
        """In-domain cells where the measured magnitude is (numerically) zero."""
        return self.grid.cells_in_domain() & (self.a.values <= tol)


def compute_current(u: ScalarField, c, sigma0: TensorField2, inclusions=None) -> VectorField2:
    """J = -c sigma0 grad u per cell, zeroed on insulating cells."""
    if isinstance(c, ScalarField):
        c = c.values
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), u.grid.cell_shape)
    gr = gradient(u)
    w1, w2 = sigma0.apply(gr.v1, gr.v2)
    j1 = -c * w1
    j2 = -c * w2
    if inclusions is not None:
        ins = inclusions.insulating_mask()
        j1 = np.where(ins, 0.0, j1)
        j2 = np.where(ins, 0.0, j2)
    return VectorField2(u.grid, j1, j2)


def compute_a(current: VectorField2, sigma0: TensorField2) -> ScalarField:
    """a = (sigma0^{-1} J . J)^{1/2} per cell."""
    vals = sigma0.inv_norm(current.v1, current.v2)
    cells = current.grid.cells_in_domain()
    vals = np.where(cells, vals, np.nan)
    return ScalarField(current.grid, vals, location="cell")


def add_noise(a: ScalarField, level: float, seed: int) -> ScalarField:
    """Multiplicative noise a * (1 + level * zeta), clamped at zero.

    Exploratory instrumentation only: no claim in the analysis covers
    noisy data, so noise never changes any audit's pass criteria.
    """
    if level < 0.0:
        raise DataError(f"noise level must be nonnegative, got {level}")
    if level == 0.0:
        return a
    rng = np.random.default_rng(seed)
    zeta = rng.standard_normal(a.values.shape)
    vals = np.maximum(a.values * (1.0 + level * zeta), 0.0)
    return ScalarField(a.grid, vals, location=a.location)


def solve_truth(c_true, sigma0: TensorField2, f, grid: Grid2D, inclusions=None,
                penalized_k: float = 1e-6, tol: float = 1e-10):
    """Truth potential and current for the factor c_true.

    With inclusions present the tied/deleted limit problem provides the
    potential, so the gradient is exactly zero on perfect components; the
    current over them comes from a penalized solve at `penalized_k`,
    which is what the limiting current actually is there.  Returns
    (u, current) with the current zeroed on insulating cells.
    """
    if isinstance(c_true, ScalarField):
        c_arr = c_true.values
    else:
        c_arr = np.broadcast_to(np.asarray(c_true, dtype=np.float64), grid.cell_shape)
    f_field = f if isinstance(f, ScalarField) else ScalarField(grid, f, location="node")

    has_inclusions = inclusions is not None and (inclusions.perfect or inclusions.insulating)
    if has_inclusions:
        sigma = TensorField2(
            grid, c_arr * sigma0.s11, c_arr * sigma0.s12, c_arr * sigma0.s22
        )
        u = solve_inclusion_limit(sigma, f_field, grid, inclusions, tol=tol)
    else:
        system = assemble(c_arr, sigma0, grid)
        u = solve_dirichlet(system, f_field, tol=tol)

    current = compute_current(u, c_arr, sigma0, inclusions)
    if has_inclusions and inclusions.perfect:
        sigma = TensorField2(grid, c_arr * sigma0.s11, c_arr * sigma0.s12, c_arr * sigma0.s22)
        u_k = solve_penalized(penalized_k, sigma0, sigma, f_field, grid, inclusions, tol=tol)
        gr_k = gradient(u_k)
        w1, w2 = sigma0.apply(gr_k.v1, gr_k.v2)
        perf = inclusions.perfect_mask()
        j1 = np.where(perf, -w1 / penalized_k, current.v1)
        j2 = np.where(perf, -w2 / penalized_k, current.v2)
        current = VectorField2(grid, j1, j2)
    return u, current


def synthesize_triplet(c_true, sigma0: TensorField2, f, grid: Grid2D, inclusions=None,
                       noise_level: float = 0.0, seed: int = 0,
                       penalized_k: float = 1e-6, tol: float = 1e-10) -> AdmissibleTriplet:
    """Forward-solve and package an admissible triplet.

    The truth current (penalized fill over perfect components included)
    defines a; multiplicative noise (if any) is applied to a last.
    """
    if isinstance(c_true, ScalarField):
        c_arr = c_true.values
    else:
        c_arr = np.broadcast_to(np.asarray(c_true, dtype=np.float64), grid.cell_shape)
    f_field = f if isinstance(f, ScalarField) else ScalarField(grid, f, location="node")
    has_inclusions = inclusions is not None and (inclusions.perfect or inclusions.insulating)

    u, current = solve_truth(
        c_arr, sigma0, f_field, grid, inclusions, penalized_k=penalized_k, tol=tol
    )
    a = compute_a(current, sigma0)
    avals = a.values.copy()
    if has_inclusions and inclusions.insulating:
        avals[inclusions.insulating_mask()] = 0.0
    a = ScalarField(grid, avals, location="cell")
    if noise_level > 0.0:
        a = add_noise(a, noise_level, seed)

    provenance = {
        "inverse_crime": True,
        "c_true": np.asarray(c_arr, dtype=np.float64).copy(),
        "u_true": u.values.copy(),
        "noise_level": float(noise_level),
        "seed": int(seed),
        "penalized_k": float(penalized_k) if (has_inclusions and inclusions.perfect) else None,
    }
    return AdmissibleTriplet(
        f=f_field, sigma0=sigma0, a=a, grid=grid, inclusions=inclusions, provenance=provenance
    )


# -- directory round trip ------------------------------------------------------

TRIPLET_SCHEMA = "acdii-triplet/1"


def save_triplet(triplet: AdmissibleTriplet, directory) -> Path:
    """Write triplet.json plus one field file per payload; returns manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grid = triplet.grid
    files = {"sigma0": "sigma0.field", "a": "a.field", "f": "f.field"}
    write_field_file(triplet.sigma0, directory / files["sigma0"])
    write_field_file(triplet.a, directory / files["a"])
    write_field_file(triplet.f, directory / files["f"])
    if triplet.inclusions is not None:
        files["inclusions"] = "inclusions.field"
        labels = ScalarField(grid, triplet.inclusions.labels(), location="cell")
        write_field_file(labels, directory / files["inclusions"])
    prov = triplet.provenance
    if "c_true" in prov:
        files["c_true"] = "c_true.field"
        write_field_file(
            ScalarField(grid, prov["c_true"], location="cell"), directory / files["c_true"]
        )
    if "u_true" in prov:
        files["u_true"] = "u_true.field"
        write_field_file(
            ScalarField(grid, prov["u_true"], location="node"), directory / files["u_true"]
        )
    manifest = {
        "schema": TRIPLET_SCHEMA,
        "grid": {"nx": grid.nx, "ny": grid.ny, "hx": grid.hx, "hy": grid.hy},
        "files": files,
        "noise": {
            "level": float(prov.get("noise_level", 0.0)),
            "seed": int(prov.get("seed", 0)),
        },
        "provenance": {
            "inverse_crime": bool(prov.get("inverse_crime", False)),
            "penalized_k": prov.get("penalized_k"),
        },
    }
    path = directory / "triplet.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_triplet(directory) -> AdmissibleTriplet:
    directory = Path(directory)
    mpath = directory / "triplet.json"
    if not mpath.exists():
        raise DataError(f"missing manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema") != TRIPLET_SCHEMA:
        raise DataError(f"unsupported triplet schema {manifest.get('schema')!r}")
    g = manifest["grid"]
    grid = Grid2D(g["nx"], g["ny"], g["hx"], g["hy"])
    files = manifest["files"]

    def load(name):
        if name not in files:
            return None
        path = directory / files[name]
        if not path.exists():
            raise DataError(f"missing field: {name}")
        return read_field_file(path)

    sigma0_raw = load("sigma0")
    a_raw = load("a")
    f_raw = load("f")
    for name, raw in (("sigma0", sigma0_raw), ("a", a_raw), ("f", f_raw)):
        if raw is None:
            raise DataError(f"missing field: {name}")
    if sigma0_raw.grid.cell_shape != grid.cell_shape:
        raise DataError("sigma0 plane does not match the manifest grid")
    sigma0 = TensorField2(grid, sigma0_raw.s11, sigma0_raw.s12, sigma0_raw.s22)
    if a_raw.values.shape != grid.cell_shape:
        raise DataError("a plane does not match the manifest grid")
    a = ScalarField(grid, a_raw.values, location="cell")
    if f_raw.values.shape != grid.shape:
        raise DataError("f plane does not match the manifest grid")
    f = ScalarField(grid, f_raw.values, location="node")

    inclusions = None
    inc_raw = load("inclusions")
    if inc_raw is not None:
        inclusions = InclusionSet.from_labels(grid, inc_raw.values)

    provenance = {
        "inverse_crime": manifest.get("provenance", {}).get("inverse_crime", False),
        "penalized_k": manifest.get("provenance", {}).get("penalized_k"),
        "noise_level": manifest.get("noise", {}).get("level", 0.0),
        "seed": manifest.get("noise", {}).get("seed", 0),
    }
    c_raw = load("c_true")
    if c_raw is not None:
        provenance["c_true"] = c_raw.values.copy()
    u_raw = load("u_true")
    if u_raw is not None:
        provenance["u_true"] = u_raw.values.copy()
    return AdmissibleTriplet(
        f=f, sigma0=sigma0, a=a, grid=grid, inclusions=inclusions, provenance=provenance
    )
