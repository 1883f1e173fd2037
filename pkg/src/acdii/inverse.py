"""Weighted total-variation recovery of the conformal conductivity factor.

Given an admissible triplet (f, sigma0, a), the potential is the unique
minimizer over boundary data f of

    F[v] = integral of a (sigma0 grad v . grad v)^(1/2),

and the factor follows pointwise as c = a / |grad u*|_{sigma0}.  Two
independent minimizers are provided and kept separate on purpose:

- a lagged-diffusivity fixed point with an eps-continuation schedule,
  each step solving div(c_eff sigma0 grad u) = 0 with
  c_eff = a / (|grad u_prev|^2_{sigma0} + eps^2)^(1/2);
- a primal-dual (Chambolle-Pock type) saddle-point scheme on
  min_u max_B <grad u, B> over the dual ball |B|_{sigma0^{-1}} <= a,
  with a closed-form per-cell projection realized by radial scaling in
  the sigma0^{-1} norm (a sigma0^(1/2) change of variables makes that
  scaling the exact Euclidean projection).

Both routes normalize a by its maximum internally.  The minimizer is
invariant under a -> alpha a, and with the default schedule the
iterations are identical bit for bit, so the functional value scales
exactly and the argmin does not move.

Cells where a vanishes are excluded from the solves (a natural Neumann
wall, matching the deleted-cell treatment of insulating regions); the
recovered factor is masked wherever the data or the gradient is too
small to divide.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import AdmissibleTriplet
from .fields import (
    _CROSS,
    Grid2D,
    ScalarField,
    TensorField2,
    VectorField2,
    gradient,
    sym2_sqrt,
)
from .forward import _nodes_of_cells, assemble, solve_dirichlet
from .geometry import extract_level_set, weighted_perimeter


class TVConfigError(ValueError):
    pass


@dataclass
class TVProblem:
    """Configuration for the TV minimizers.

    eps0 is the starting smoothing of the fixed-point scheme, in units of
    |grad u|_{sigma0} (so it is invariant under rescaling a); when None
    it defaults to 0.1 / sqrt(m) with m the recorded lower ellipticity
    bound of sigma0.  delta_grad and delta_a are the degeneracy cutoffs
    of the pointwise recovery; when None, delta_grad defaults to three
    times the final smoothing of the eps schedule and delta_a to 1e-8
    times max(a).
    """

    triplet: AdmissibleTriplet
    eps0: float | None = None
    eps_ratio: float = 0.5
    eps_stages: int = 8
    fp_tol: float = 1e-8
    max_inner: int = 50
    cg_tol: float = 1e-10
    pd_tau: float | None = None
    pd_sigma: float | None = None
    pd_iterations: int | None = None
    delta_grad: float | None = None
    delta_a: float | None = None
    void_floor: float = 0.0

    def __post_init__(self):
        if self.eps0 is not None and not self.eps0 > 0.0:
            raise TVConfigError(f"eps0 must be positive, got {self.eps0}")
        if not 0.0 < self.eps_ratio < 1.0:
            raise TVConfigError(f"eps_ratio must lie in (0, 1), got {self.eps_ratio}")
        if self.eps_stages < 1:
            raise TVConfigError("eps_stages must be at least 1")
        if not self.fp_tol > 0.0:
            raise TVConfigError("fp_tol must be positive")
        if self.max_inner < 1:
            raise TVConfigError("max_inner must be at least 1")
        for name in ("pd_tau", "pd_sigma", "delta_grad", "delta_a"):
            v = getattr(self, name)
            if v is not None and not v > 0.0:
                raise TVConfigError(f"{name} must be positive when given, got {v}")
        if self.pd_iterations is not None and self.pd_iterations < 1:
            raise TVConfigError("pd_iterations must be at least 1")
        if self.void_floor < 0.0:
            raise TVConfigError("void_floor must be nonnegative")


# -- the functional -----------------------------------------------------------


def weighted_tv(v: ScalarField, a: ScalarField, sigma0: TensorField2) -> float:
    """Midpoint quadrature of integral a |grad v|_{sigma0} over in-domain cells."""
    grid = v.grid
    gr = gradient(v)
    nrm = sigma0.norm(gr.v1, gr.v2)
    cells = grid.cells_in_domain()
    terms = np.where(cells, a.values * nrm, 0.0)
    return float(np.sum(terms)) * grid.cell_area


def _smoothed_tv(grid, avals, sigma0, uvals, eps) -> float:
    gr = _grad_arrays(grid, uvals)
    w1, w2 = sigma0.apply(gr[0], gr[1])
    q = np.maximum(w1 * gr[0] + w2 * gr[1], 0.0)
    cells = grid.cells_in_domain()
    terms = np.where(cells, avals * np.sqrt(q + eps * eps), 0.0)
    return float(np.sum(terms)) * grid.cell_area


def dual_feasibility(B: VectorField2, a: ScalarField, sigma0: TensorField2) -> float:
    """Worst violation max over cells of (|B|_{sigma0^{-1}} - a)_+ ; 0 means feasible."""
    nrm = sigma0.inv_norm(B.v1, B.v2)
    cells = B.grid.cells_in_domain()
    excess = np.where(cells, nrm - a.values, 0.0)
    return float(np.max(np.maximum(excess, 0.0)))


# -- raw array calculus (no field containers inside hot loops) -----------------


def _grad_arrays(grid, vals):
    v1 = ((vals[:-1, 1:] - vals[:-1, :-1]) + (vals[1:, 1:] - vals[1:, :-1])) / (2.0 * grid.hx)
    v2 = ((vals[1:, :-1] - vals[:-1, :-1]) + (vals[1:, 1:] - vals[:-1, 1:])) / (2.0 * grid.hy)
    return v1, v2


def _adjoint_grad_arrays(grid, w1, w2):
    """G^T w on nodes; sum_cells (grad u . w) == sum_nodes u * (G^T w)."""
    b1 = w1 / (2.0 * grid.hx)
    b2 = w2 / (2.0 * grid.hy)
    out = np.zeros(grid.shape)
    out[:-1, :-1] += -b1 - b2
    out[:-1, 1:] += b1 - b2
    out[1:, :-1] += -b1 + b2
    out[1:, 1:] += b1 + b2
    return out


def _normalized_data(problem: TVProblem):
    t = problem.triplet
    grid = t.grid
    cells = grid.cells_in_domain()
    a = np.where(cells, t.a.values, 0.0)
    amax = float(np.max(a))
    if amax <= 0.0:
        raise TVConfigError("data a vanishes identically; nothing to minimize")
    a_hat = a / amax
    void = cells & (a_hat <= problem.void_floor)
    active = cells & ~void
    if not active.any():
        raise TVConfigError("all in-domain cells fall below the void floor")
    return grid, t.sigma0, a, amax, a_hat, void


def _masked_rel_change(grid, new, old):
    d = (new - old)[grid.mask]
    n = new[grid.mask]
    denom = float(np.sqrt(np.sum(n * n)))
    return float(np.sqrt(np.sum(d * d))) / max(denom, 1e-300)


def minimize_tv_fixedpoint(problem: TVProblem):
    """Lagged-diffusivity minimization with eps-continuation.

    Returns (u, info).  info records, per stage, the smoothed functional
    history (in absolute units), the inner iteration count, and whether
    the stage decreased monotonically; an increase beyond round-off is
    flagged but not fatal.
    """
    grid, sigma0, a_abs, amax, a_hat, void = _normalized_data(problem)
    t = problem.triplet
    # eps lives in |grad u|_{sigma0} units, so it is untouched by the
    # normalization of a; that keeps the whole iteration identical under
    # a -> alpha a (the effective coefficient just rescales, which CG
    # relative tolerances and Jacobi scaling cannot see).
    eps0_hat = problem.eps0 if problem.eps0 is not None else 0.1 / np.sqrt(sigma0.m)
    schedule = [eps0_hat * problem.eps_ratio**s for s in range(problem.eps_stages)]

    system = assemble(1.0, sigma0, grid, exclude_cells=void)
    u = solve_dirichlet(system, t.f, tol=problem.cg_tol)
    uvals = u.values.copy()

    cells = grid.cells_in_domain()
    stages = []
    flagged = False
    total_inner = 0
    for eps_hat in schedule:
        hist = []
        inner = 0
        for _ in range(problem.max_inner):
            g1, g2 = _grad_arrays(grid, uvals)
            w1, w2 = sigma0.apply(g1, g2)
            q = np.maximum(w1 * g1 + w2 * g2, 0.0)
            weight = np.sqrt(q + eps_hat * eps_hat)
            c_eff = np.where(cells & ~void, a_hat / weight, 1.0)
            system = assemble(c_eff, sigma0, grid, exclude_cells=void)
            u_new = solve_dirichlet(system, t.f, tol=problem.cg_tol, x0=uvals)
            rel = _masked_rel_change(grid, u_new.values, uvals)
            uvals = u_new.values.copy()
            hist.append(amax * _smoothed_tv(grid, a_hat, sigma0, uvals, eps_hat))
            inner += 1
            if rel <= problem.fp_tol:
                break
        total_inner += inner
        drops = np.diff(np.asarray(hist))
        monotone = bool(np.all(drops <= 1e-10 * (1.0 + abs(hist[0]))))
        if not monotone:
            flagged = True
        stages.append(
            {
                "eps": eps_hat,
                "inner_iterations": inner,
                "smoothed_history": hist,
                "monotone": monotone,
            }
        )

    u_final = ScalarField(grid, uvals, location="node")
    info = {
        "algorithm": "fixedpoint",
        "stages": stages,
        "total_inner_iterations": total_inner,
        "nonmonotone_flag": flagged,
        "tv_final": weighted_tv(u_final, t.a, sigma0),
    }
    return u_final, info


def minimize_tv_primal_dual(problem: TVProblem):
    """Saddle-point minimization; returns (u, B, info) with B dual feasible.

    Steps default to tau = sigma = 1/L with L^2 = M (4/hx^2 + 4/hy^2) an
    upper bound for the weighted gradient norm; explicit steps violating
    tau sigma L^2 <= 1 are a configuration error.  Dirichlet values are
    re-imposed after every primal step.
    """
    grid, sigma0, a_abs, amax, a_hat, void = _normalized_data(problem)
    t = problem.triplet
    l2 = sigma0.M * (4.0 / grid.hx**2 + 4.0 / grid.hy**2)
    tau = problem.pd_tau if problem.pd_tau is not None else 1.0 / np.sqrt(l2)
    sig = problem.pd_sigma if problem.pd_sigma is not None else 1.0 / np.sqrt(l2)
    if tau * sig * l2 > 1.0 + 1e-9:
        raise TVConfigError(
            f"primal-dual steps violate tau*sigma*L^2 <= 1 (got {tau * sig * l2:.3f})"
        )
    iters = (
        problem.pd_iterations
        if problem.pd_iterations is not None
        else 200 * max(grid.nx, grid.ny)
    )

    r11, r12, r22 = sym2_sqrt(sigma0.s11, sigma0.s12, sigma0.s22)
    cells = grid.cells_in_domain()
    active = cells & ~void

    system = assemble(1.0, sigma0, grid, exclude_cells=void)
    u0 = solve_dirichlet(system, t.f, tol=problem.cg_tol)
    uv = np.where(grid.mask, u0.values, 0.0)
    fvals = t.f.values.ravel()[grid.boundary_ids]
    ubar = uv.copy()
    b1 = np.zeros(grid.cell_shape)
    b2 = np.zeros(grid.cell_shape)
    tiny = 1e-300
    f_hist = []
    record_every = max(iters // 50, 1)
    for it in range(iters):
        g1, g2 = _grad_arrays(grid, ubar)
        p1 = r11 * g1 + r12 * g2
        p2 = r12 * g1 + r22 * g2
        b1 += sig * np.where(active, p1, 0.0)
        b2 += sig * np.where(active, p2, 0.0)
        nrm = np.hypot(b1, b2)
        scale = np.where(nrm > a_hat, a_hat / np.maximum(nrm, tiny), 1.0)
        b1 *= scale
        b2 *= scale
        q1 = r11 * b1 + r12 * b2
        q2 = r12 * b1 + r22 * b2
        u_new = uv - tau * _adjoint_grad_arrays(grid, q1, q2)
        u_new.ravel()[grid.boundary_ids] = fvals
        u_new[~grid.mask] = 0.0
        ubar = 2.0 * u_new - uv
        uv = u_new
        if (it + 1) % record_every == 0:
            f_hist.append(amax * _smoothed_tv(grid, a_hat, sigma0, uv, 0.0))

    out = np.where(grid.mask, uv, np.nan)
    u_final = ScalarField(grid, out, location="node")
    bb1 = amax * (r11 * b1 + r12 * b2)
    bb2 = amax * (r12 * b1 + r22 * b2)
    B = VectorField2(grid, bb1, bb2)

    primal = weighted_tv(u_final, t.a, sigma0)
    g1, g2 = _grad_arrays(grid, np.where(grid.mask, uv, 0.0))
    pairing = float(np.sum(np.where(cells, g1 * bb1 + g2 * bb2, 0.0))) * grid.cell_area
    gap = abs(primal - pairing) / max(primal, tiny)
    div_full = _adjoint_grad_arrays(grid, np.where(cells, bb1, 0.0), np.where(cells, bb2, 0.0))
    inter = grid.interior_mask()
    div_rms = float(np.sqrt(np.mean(div_full[inter] ** 2))) if inter.any() else 0.0
    info = {
        "algorithm": "primaldual",
        "iterations": iters,
        "tau": tau,
        "sigma_step": sig,
        "tv_history": f_hist,
        "tv_final": primal,
        "pairing": pairing,
        "pd_gap": gap,
        "dual_divergence_rms": div_rms,
        "dual_feasibility": dual_feasibility(B, t.a, sigma0),
    }
    return u_final, B, info


# -- audits --------------------------------------------------------------------


def boundary_flux_integral(f: ScalarField, current: VectorField2) -> float:
    """Trapezoid quadrature of the outer-boundary integral of f (J . n).

    Each open side of the in-domain cell complex contributes the node
    average of f times the adjacent-cell normal flux times edge length.
    """
    grid = current.grid
    cells = grid.cells_in_domain()
    fv = f.values
    j1 = np.where(cells, current.v1, 0.0)
    j2 = np.where(cells, current.v2, 0.0)
    total = 0.0

    south = cells.copy()
    south[1:, :] &= ~cells[:-1, :]
    favg = 0.5 * (fv[:-1, :-1] + fv[:-1, 1:])
    total += float(np.sum(np.where(south, -favg * j2, 0.0))) * grid.hx

    north = cells.copy()
    north[:-1, :] &= ~cells[1:, :]
    favg = 0.5 * (fv[1:, :-1] + fv[1:, 1:])
    total += float(np.sum(np.where(north, favg * j2, 0.0))) * grid.hx

    west = cells.copy()
    west[:, 1:] &= ~cells[:, :-1]
    favg = 0.5 * (fv[:-1, :-1] + fv[1:, :-1])
    total += float(np.sum(np.where(west, -favg * j1, 0.0))) * grid.hy

    east = cells.copy()
    east[:, :-1] &= ~cells[:, 1:]
    favg = 0.5 * (fv[:-1, 1:] + fv[1:, 1:])
    total += float(np.sum(np.where(east, favg * j1, 0.0))) * grid.hy
    return total


def duality_gap(u: ScalarField, f: ScalarField, current: VectorField2,
                a: ScalarField, sigma0: TensorField2) -> float:
    """|F[u] + boundary integral of f (J.n)| / max(F[u], tiny).

    At the true potential the two terms cancel (integration by parts of
    the divergence-free current), so the gap is pure discretization.
    """
    fval = weighted_tv(u, a, sigma0)
    flux = boundary_flux_integral(f, current)
    return abs(fval + flux) / max(fval, 1e-300)


def minimality_audit(u: ScalarField, a: ScalarField, sigma0: TensorField2,
                     trials: int = 20, seed: int = 0, amplitude: float = 0.05,
                     f: ScalarField | None = None,
                     current: VectorField2 | None = None) -> dict:
    """Functional margins F[u +/- w] - F[u] over seeded smooth zero-trace w.

    Each trial draws random coefficients on the first 3x3 sine modes of
    the bounding box, scales to `amplitude` times the range of u, and
    evaluates both signs; the reported margin is the worse of the two.
    A candidate far from the minimizer shows negative margins, while at
    the minimizer every margin is nonnegative up to quadrature round-off.
    The duality identity is reported alongside when f and the current
    are supplied.
    """
    grid = u.grid
    rng = np.random.default_rng(seed)
    f0 = weighted_tv(u, a, sigma0)
    urange = float(np.nanmax(u.values)) - float(np.nanmin(u.values))
    x, y = grid.node_coords()
    lx = (grid.nx - 1) * grid.hx
    ly = (grid.ny - 1) * grid.hy
    margins = []
    for _ in range(trials):
        coef = rng.standard_normal((3, 3))
        w = np.zeros(grid.shape)
        for p in range(1, 4):
            for q in range(1, 4):
                w += coef[p - 1, q - 1] * np.sin(p * np.pi * x / lx) * np.sin(q * np.pi * y / ly)
        w.ravel()[grid.boundary_ids] = 0.0
        w[~grid.mask] = 0.0
        wmax = float(np.max(np.abs(w)))
        if wmax == 0.0:
            margins.append(0.0)
            continue
        w *= amplitude * max(urange, 1e-300) / wmax
        up = ScalarField(grid, np.where(grid.mask, u.values + w, np.nan), location="node")
        um = ScalarField(grid, np.where(grid.mask, u.values - w, np.nan), location="node")
        m = min(weighted_tv(up, a, sigma0) - f0, weighted_tv(um, a, sigma0) - f0)
        margins.append(m)
    report = {
        "tv_value": f0,
        "margins": margins,
        "min_margin": min(margins) if margins else 0.0,
        "n_negative": int(sum(1 for m in margins if m < 0.0)),
        "trials": trials,
        "seed": seed,
        "amplitude": amplitude,
    }
    if f is not None and current is not None:
        report["duality_gap"] = duality_gap(u, f, current, a, sigma0)
    return report


def recover_c(u_star: ScalarField, a: ScalarField, sigma0: TensorField2,
              delta_grad: float | None = None, delta_a: float | None = None):
    """Pointwise factor c = a / |grad u*|_{sigma0} off the degenerate set.

    Cells with |grad u*|_{sigma0} <= delta_grad or a <= delta_a are
    masked out (value 0, flagged in mask_Z).  Returns
    (c_rec, mask_Z, diagnostics); diagnostics separates the two reasons
    for masking, including the zero-data cells that still carry gradient
    (the interface-like set the recovery never divides on).
    """
    grid = u_star.grid
    cells = grid.cells_in_domain()
    gr = gradient(u_star)
    nrm = sigma0.norm(gr.v1, gr.v2)
    nrm = np.where(cells, nrm, 0.0)
    avals = np.where(cells, a.values, 0.0)
    nmax = float(np.max(nrm))
    amax = float(np.max(avals))
    dg = delta_grad if delta_grad is not None else 1e-6 * max(nmax, 1e-300)
    da = delta_a if delta_a is not None else 1e-8 * max(amax, 1e-300)
    ok = cells & (nrm > dg) & (avals > da)
    cvals = np.where(ok, avals / np.where(ok, nrm, 1.0), 0.0)
    mask_z = cells & ~ok
    diagnostics = {
        "delta_grad": dg,
        "delta_a": da,
        "masked_cells": int(mask_z.sum()),
        "small_gradient_cells": int((cells & (nrm <= dg)).sum()),
        "interface_cells": int((cells & (avals <= da) & (nrm > dg)).sum()),
        "small_gradient_measure": float((cells & (nrm <= dg)).sum()) * grid.cell_area,
    }
    return ScalarField(grid, cvals, location="cell"), mask_z, diagnostics


def _holder_quotient(avals, comp, other, hx, hy, alpha):
    best = 0.0
    pair = (comp[:, :-1] & other[:, 1:]) | (other[:, :-1] & comp[:, 1:])
    if pair.any():
        d = np.abs(avals[:, :-1] - avals[:, 1:])
        best = max(best, float(np.max(d[pair])) / hx**alpha)
    pair = (comp[:-1, :] & other[1:, :]) | (other[:-1, :] & comp[1:, :])
    if pair.any():
        d = np.abs(avals[:-1, :] - avals[1:, :])
        best = max(best, float(np.max(d[pair])) / hy**alpha)
    return best


def classify_inclusions(u_star: ScalarField, a: ScalarField, mask_z, grid: Grid2D,
                        tol_grad: float | None = None, tol_a: float | None = None,
                        tol_osc: float | None = None, holder_alpha: float = 0.5,
                        holder_factor: float = 0.25) -> list[dict]:
    """Label each 4-connected component of the degenerate set.

    - 'perfect': the gradient vanishes on the component while the data
      does not (current flows through a region the potential does not
      vary on);
    - 'insulating': the data vanishes and the trace of u* oscillates on
      the component rim (no current crosses, but the potential varies
      along the wall);
    - 'perfect-or-insulating': the data vanishes, the rim trace is
      constant within tol_osc, and the data fails a Holder-quotient
      regularity probe across the interface (exponent holder_alpha),
      which rules out a benign conductivity explaining it;
    - 'undetermined': anything else, in particular a constant rim trace
      with data regular across the interface, which one measurement
      genuinely cannot decide.

    The conservative tol_grad default (1e-6 of the gradient scale)
    expects a potential whose flat regions are exact, as produced by the
    tied forward solve; iterative minimizers stall earlier, so pass the
    matching recovery cutoff instead.  tol_osc defaults to
    4 max(hx, hy) max|grad u*|, the size of the discrete trace wiggle a
    smooth equipotential rim produces.
    """
    cells = grid.cells_in_domain()
    mask = np.asarray(mask_z, dtype=bool) & cells
    gr = gradient(u_star)
    gmag = np.where(cells, np.hypot(gr.v1, gr.v2), 0.0)
    avals = np.where(cells, a.values, 0.0)
    # Scales come from the cells where u* is meaningful: on a masked
    # insulating component the nodal values are fill, not physics.
    live = cells & ~mask
    scale_g = float(np.max(gmag[live])) if np.any(live) else float(np.max(gmag))
    scale_a = float(np.max(avals))
    tg = tol_grad if tol_grad is not None else 1e-6 * max(scale_g, 1e-300)
    ta = tol_a if tol_a is not None else 1e-8 * max(scale_a, 1e-300)
    to = tol_osc if tol_osc is not None else 4.0 * max(grid.hx, grid.hy) * scale_g
    h = min(grid.hx, grid.hy)
    holder_threshold = holder_factor * max(scale_a, 1e-300) / h**holder_alpha

    comp_map, ncomp = ndimage.label(mask, structure=_CROSS)
    out = []
    for ci in range(1, ncomp + 1):
        comp = comp_map == ci
        max_grad = float(np.max(gmag[comp]))
        max_a = float(np.max(avals[comp]))
        inner_nodes = _nodes_of_cells(grid, comp)
        outer_nodes = _nodes_of_cells(grid, cells & ~comp)
        rim = inner_nodes & outer_nodes
        uv = u_star.values.ravel()
        rim_vals = uv[np.flatnonzero(rim.ravel())]
        rim_vals = rim_vals[np.isfinite(rim_vals)]
        osc = float(np.max(rim_vals) - np.min(rim_vals)) if rim_vals.size else 0.0
        quot = _holder_quotient(avals, comp, cells & ~comp, grid.hx, grid.hy, holder_alpha)
        if max_grad <= tg and max_a > ta:
            label = "perfect"
        elif max_a <= ta and osc > to:
            label = "insulating"
        elif max_a <= ta and osc <= to and quot > holder_threshold:
            label = "perfect-or-insulating"
        else:
            label = "undetermined"
        out.append(
            {
                "component": ci,
                "cells": int(comp.sum()),
                "label": label,
                "max_gradient": max_grad,
                "max_a": max_a,
                "boundary_oscillation": osc,
                "oscillation_tol": to,
                "holder_quotient": quot,
                "holder_threshold": holder_threshold,
            }
        )
    return out


def coarea_audit(u: ScalarField, a: ScalarField, sigma0: TensorField2,
                 n_levels: int = 200) -> dict:
    """Compare F[u] with the level-set reconstruction of its coarea form.

    The level integral is a trapezoid rule over n_levels equispaced
    levels spanning the range of u, weighting each level-curve segment
    by a (sigma0 nu . nu)^(1/2) with nu the curve normal.  The extreme
    levels carry half weight and typically contribute nothing (the set
    {u > umax} is empty), so the endpoint bias is one interior sample.
    """
    grid = u.grid
    vals = u.values[grid.mask]
    umin = float(np.min(vals))
    umax = float(np.max(vals))
    tv = weighted_tv(u, a, sigma0)
    if umax <= umin or n_levels < 2:
        return {
            "tv": tv,
            "level_integral": 0.0,
            "rel_discrepancy": abs(tv) / max(abs(tv), 1e-300),
            "levels": [],
            "perimeters": [],
        }
    delta = (umax - umin) / (n_levels - 1)
    levels = [umin + j * delta for j in range(n_levels)]
    perims = []
    for lam in levels:
        curves = extract_level_set(u, lam)
        perims.append(weighted_perimeter(curves, a, sigma0))
    weights = np.full(n_levels, delta)
    weights[0] *= 0.5
    weights[-1] *= 0.5
    integral = float(np.dot(weights, np.asarray(perims)))
    return {
        "tv": tv,
        "level_integral": integral,
        "rel_discrepancy": abs(tv - integral) / max(tv, 1e-300),
        "levels": levels,
        "perimeters": perims,
    }


# -- orchestration --------------------------------------------------------------


@dataclass
class ReconReport:
    """Everything one run of the recovery produces."""

    u_star: ScalarField
    c_rec: ScalarField
    mask_z: np.ndarray
    sigma_rec: tuple[np.ndarray, np.ndarray, np.ndarray]
    labels: list[dict]
    diagnostics: dict = field(default_factory=dict)


def reconstruct(problem: TVProblem, algorithm: str = "fixedpoint") -> ReconReport:
    """Run the recovery end to end on an admissible triplet.

    algorithm is 'fixedpoint', 'primaldual', or 'both'; with 'both' the
    fixed-point potential is the one carried forward and the relative
    l2 distance between the two potentials is recorded.  When the
    triplet's provenance carries the synthetic truth, relative errors
    against it are included.
    """
    if algorithm not in ("fixedpoint", "primaldual", "both"):
        raise TVConfigError(f"unknown algorithm {algorithm!r}")
    t = problem.triplet
    grid = t.grid
    diagnostics: dict = {}
    u_fp = u_pd = None
    if algorithm in ("fixedpoint", "both"):
        u_fp, info_fp = minimize_tv_fixedpoint(problem)
        diagnostics["fixedpoint"] = info_fp
    if algorithm in ("primaldual", "both"):
        u_pd, B, info_pd = minimize_tv_primal_dual(problem)
        diagnostics["primaldual"] = info_pd
    u_star = u_fp if u_fp is not None else u_pd
    if u_fp is not None and u_pd is not None:
        d = (u_fp.values - u_pd.values)[grid.mask]
        ref = u_fp.values[grid.mask]
        diagnostics["cross_algorithm_rel_l2"] = float(
            np.sqrt(np.sum(d * d)) / max(np.sqrt(np.sum(ref * ref)), 1e-300)
        )

    delta_grad = problem.delta_grad
    if delta_grad is None:
        # the fixed-point scheme cannot push a gradient much below its
        # final smoothing, so that is the natural degeneracy cutoff
        eps0 = problem.eps0 if problem.eps0 is not None else 0.1 / np.sqrt(t.sigma0.m)
        delta_grad = 3.0 * eps0 * problem.eps_ratio ** (problem.eps_stages - 1)
    c_rec, mask_z, rec_diag = recover_c(
        u_star, t.a, t.sigma0, delta_grad=delta_grad, delta_a=problem.delta_a
    )
    diagnostics["recovery"] = rec_diag
    # A gradient-masked cell has |grad u|_{sigma0} <= delta_grad, hence a
    # Euclidean gradient at most delta_grad/sqrt(m); align the label rule
    # with the mask so such components can qualify as 'perfect'.
    labels = classify_inclusions(
        u_star, t.a, mask_z, grid,
        tol_grad=rec_diag["delta_grad"] / np.sqrt(t.sigma0.m) * (1.0 + 1e-12),
        tol_a=rec_diag["delta_a"],
    )

    gr = gradient(u_star)
    w1, w2 = t.sigma0.apply(gr.v1, gr.v2)
    cells = grid.cells_in_domain()
    j1 = np.where(cells & ~mask_z, -c_rec.values * w1, 0.0)
    j2 = np.where(cells & ~mask_z, -c_rec.values * w2, 0.0)
    current = VectorField2(grid, j1, j2)
    diagnostics["duality_gap"] = duality_gap(u_star, t.f, current, t.a, t.sigma0)

    prov = t.provenance or {}
    if prov.get("c_true") is not None:
        c_true = np.asarray(prov["c_true"], dtype=np.float64)
        ok = cells & ~mask_z
        denom = np.where(ok, np.abs(c_true), 1.0)
        err = np.where(ok, np.abs(c_rec.values - c_true) / denom, 0.0)
        diagnostics["c_rel_linf_off_mask"] = float(np.max(err))
    if prov.get("u_true") is not None:
        u_true = np.asarray(prov["u_true"], dtype=np.float64)
        d = (u_star.values - u_true)[grid.mask]
        ref = u_true[grid.mask]
        diagnostics["u_rel_l2"] = float(
            np.sqrt(np.sum(d * d)) / max(np.sqrt(np.sum(ref * ref)), 1e-300)
        )

    s11 = np.where(cells & ~mask_z, c_rec.values * t.sigma0.s11, 0.0)
    s12 = np.where(cells & ~mask_z, c_rec.values * t.sigma0.s12, 0.0)
    s22 = np.where(cells & ~mask_z, c_rec.values * t.sigma0.s22, 0.0)
    return ReconReport(
        u_star=u_star,
        c_rec=c_rec,
        mask_z=mask_z,
        sigma_rec=(s11, s12, s22),
        labels=labels,
        diagnostics=diagnostics,
    )
