"""Command-line driver: forward solves, data synthesis, recovery, audits.

Subcommands:

- forward: solve the truth conductivity problem and write the potential,
  current, and interior data fields plus a forward.json report;
- synth: synthesize an admissible triplet directory (optionally noisy);
- invert: run the TV recovery on a triplet directory and write the
  recovered potential, factor, conductivity, degenerate-set mask, and a
  recon.json report;
- verify: run the structural audits (minimality margins, duality
  identity, coarea reconstruction, level-set area minimality, metric
  curvature residual with a deliberately mismatched control, truncation
  limits, and the penalization ladder when the truth is available) and
  write audits.json plus the level curves as CSV;
- report: aggregate the JSON reports found in a results directory.

All outputs are deterministic: reports are sorted-key JSON with no
timestamps, field files are raw float64, and reruns of the same config
are byte-identical.  Exit codes: 0 success, 1 a computation or audit
gate failed, 2 bad configuration or data.  Errors print one JSON object
on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DataError,
    AdmissibleTriplet,
    compute_a,
    load_triplet,
    save_triplet,
    solve_truth,
    synthesize_triplet,
)
from .fields import (
    Grid2D,
    GridError,
    ScalarField,
    TensorField2,
    VectorField2,
    gradient,
)
from .forward import (
    AssemblyError,
    ConvergenceError,
    InclusionSet,
    disk_cells,
    energy,
    rect_cells,
    solve_inclusion_limit,
    solve_penalized,
)
from .geometry import (
    area_minimality_audit,
    build_metric,
    curvature_residual,
    curves_to_csv,
    extract_level_set,
    truncation_limit_audit,
)
from .inverse import (
    TVConfigError,
    TVProblem,
    coarea_audit,
    duality_gap,
    minimality_audit,
    reconstruct,
    recover_c,
)
from .io import FieldFormatError, read_field_file, write_field_file


class ConfigError(ValueError):
    """Raised for malformed, unknown, or missing configuration entries."""


# -- strict config parsing -----------------------------------------------------


def _expect_dict(v, path):
    if not isinstance(v, dict):
        raise ConfigError(f"config entry '{path}' must be an object")
    return v


def _allow_keys(d, allowed, path):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key '{path}.{unknown[0]}'")


def _num(v, path, positive=False, nonneg=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"config entry '{path}' must be a number")
    v = float(v)
    if positive and not v > 0.0:
        raise ConfigError(f"config entry '{path}' must be positive")
    if nonneg and v < 0.0:
        raise ConfigError(f"config entry '{path}' must be nonnegative")
    return v


def _int(v, path, minimum=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"config entry '{path}' must be an integer")
    if minimum is not None and v < minimum:
        raise ConfigError(f"config entry '{path}' must be at least {minimum}")
    return v


def _pair(v, path):
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ConfigError(f"config entry '{path}' must be a pair of numbers")
    return (_num(v[0], path + "[0]"), _num(v[1], path + "[1]"))


def _choice(v, path, choices):
    if v not in choices:
        raise ConfigError(f"config entry '{path}' must be one of {sorted(choices)}")
    return v


def _opt(d, key, default=None):
    return d[key] if key in d else default


def _parse_grid(d):
    d = _expect_dict(d, "grid")
    _allow_keys(d, {"nx", "ny", "lx", "ly"}, "grid")
    if "nx" not in d or "ny" not in d:
        raise ConfigError("config section 'grid' needs both 'nx' and 'ny'")
    nx = _int(d["nx"], "grid.nx", minimum=2)
    ny = _int(d["ny"], "grid.ny", minimum=2)
    lx = _num(_opt(d, "lx", 1.0), "grid.lx", positive=True)
    ly = _num(_opt(d, "ly", 1.0), "grid.ly", positive=True)
    return {"nx": nx, "ny": ny, "lx": lx, "ly": ly}


def _parse_c(d):
    d = _expect_dict(d, "truth.c")
    kind = _choice(_opt(d, "kind"), "truth.c.kind", {"constant", "gaussian_bump"})
    if kind == "constant":
        _allow_keys(d, {"kind", "value"}, "truth.c")
        return {"kind": kind, "value": _num(_opt(d, "value", 1.0), "truth.c.value", positive=True)}
    _allow_keys(d, {"kind", "base", "amplitude", "center", "width"}, "truth.c")
    return {
        "kind": kind,
        "base": _num(_opt(d, "base", 1.0), "truth.c.base", positive=True),
        "amplitude": _num(_opt(d, "amplitude", 0.5), "truth.c.amplitude"),
        "center": _pair(_opt(d, "center", (0.5, 0.5)), "truth.c.center"),
        "width": _num(_opt(d, "width", 0.15), "truth.c.width", positive=True),
    }


def _parse_sigma0(d):
    d = _expect_dict(d, "truth.sigma0")
    kind = _choice(
        _opt(d, "kind"), "truth.sigma0.kind", {"identity", "constant", "rotated_diag"}
    )
    if kind == "identity":
        _allow_keys(d, {"kind"}, "truth.sigma0")
        return {"kind": kind}
    if kind == "constant":
        _allow_keys(d, {"kind", "s11", "s12", "s22"}, "truth.sigma0")
        return {
            "kind": kind,
            "s11": _num(_opt(d, "s11", 1.0), "truth.sigma0.s11", positive=True),
            "s12": _num(_opt(d, "s12", 0.0), "truth.sigma0.s12"),
            "s22": _num(_opt(d, "s22", 1.0), "truth.sigma0.s22", positive=True),
        }
    _allow_keys(d, {"kind", "angle", "d1", "d2"}, "truth.sigma0")
    return {
        "kind": kind,
        "angle": _num(_opt(d, "angle", 0.0), "truth.sigma0.angle"),
        "d1": _num(_opt(d, "d1", 2.0), "truth.sigma0.d1", positive=True),
        "d2": _num(_opt(d, "d2", 1.0), "truth.sigma0.d2", positive=True),
    }


def _parse_f(d):
    d = _expect_dict(d, "truth.f")
    kind = _choice(_opt(d, "kind"), "truth.f.kind", {"linear", "sinusoid"})
    if kind == "linear":
        _allow_keys(d, {"kind", "gx", "gy", "offset"}, "truth.f")
        return {
            "kind": kind,
            "gx": _num(_opt(d, "gx", 1.0), "truth.f.gx"),
            "gy": _num(_opt(d, "gy", 0.0), "truth.f.gy"),
            "offset": _num(_opt(d, "offset", 0.0), "truth.f.offset"),
        }
    _allow_keys(d, {"kind", "amplitude", "kx", "ky", "offset"}, "truth.f")
    return {
        "kind": kind,
        "amplitude": _num(_opt(d, "amplitude", 1.0), "truth.f.amplitude"),
        "kx": _int(_opt(d, "kx", 1), "truth.f.kx"),
        "ky": _int(_opt(d, "ky", 0), "truth.f.ky"),
        "offset": _num(_opt(d, "offset", 0.0), "truth.f.offset"),
    }


def _parse_truth(d):
    d = _expect_dict(d, "truth")
    _allow_keys(d, {"c", "sigma0", "f"}, "truth")
    for key in ("c", "sigma0", "f"):
        if key not in d:
            raise ConfigError(f"config section 'truth' needs '{key}'")
    return {"c": _parse_c(d["c"]), "sigma0": _parse_sigma0(d["sigma0"]), "f": _parse_f(d["f"])}


def _parse_inclusions(v):
    if not isinstance(v, list):
        raise ConfigError("config section 'inclusions' must be a list")
    out = []
    for idx, d in enumerate(v):
        path = f"inclusions[{idx}]"
        d = _expect_dict(d, path)
        typ = _choice(_opt(d, "type"), path + ".type", {"perfect", "insulating"})
        shape = _choice(_opt(d, "shape"), path + ".shape", {"disk", "rect"})
        if shape == "disk":
            _allow_keys(d, {"type", "shape", "center", "radius"}, path)
            out.append(
                {
                    "type": typ,
                    "shape": shape,
                    "center": _pair(_opt(d, "center", (0.5, 0.5)), path + ".center"),
                    "radius": _num(_opt(d, "radius", 0.2), path + ".radius", positive=True),
                }
            )
        else:
            _allow_keys(d, {"type", "shape", "lo", "hi"}, path)
            out.append(
                {
                    "type": typ,
                    "shape": shape,
                    "lo": _pair(_opt(d, "lo", (0.3, 0.3)), path + ".lo"),
                    "hi": _pair(_opt(d, "hi", (0.7, 0.7)), path + ".hi"),
                }
            )
    return out


def _parse_noise(d):
    d = _expect_dict(d, "noise")
    _allow_keys(d, {"level", "seed"}, "noise")
    return {
        "level": _num(_opt(d, "level", 0.0), "noise.level", nonneg=True),
        "seed": _int(_opt(d, "seed", 0), "noise.seed"),
    }


def _parse_inverse(d):
    d = _expect_dict(d, "inverse")
    _allow_keys(
        d,
        {
            "algorithm",
            "eps0",
            "eps_ratio",
            "eps_stages",
            "fp_tol",
            "max_inner",
            "cg_tol",
            "pd_tau",
            "pd_sigma",
            "pd_iterations",
            "delta_grad",
            "delta_a",
            "void_floor",
        },
        "inverse",
    )
    out = {
        "algorithm": _choice(
            _opt(d, "algorithm", "fixedpoint"),
            "inverse.algorithm",
            {"fixedpoint", "primaldual", "both"},
        ),
        "eps_ratio": _num(_opt(d, "eps_ratio", 0.5), "inverse.eps_ratio", positive=True),
        "eps_stages": _int(_opt(d, "eps_stages", 8), "inverse.eps_stages", minimum=1),
        "fp_tol": _num(_opt(d, "fp_tol", 1e-8), "inverse.fp_tol", positive=True),
        "max_inner": _int(_opt(d, "max_inner", 50), "inverse.max_inner", minimum=1),
        "cg_tol": _num(_opt(d, "cg_tol", 1e-10), "inverse.cg_tol", positive=True),
        "void_floor": _num(_opt(d, "void_floor", 0.0), "inverse.void_floor", nonneg=True),
    }
    for key in ("eps0", "pd_tau", "pd_sigma", "delta_grad", "delta_a"):
        out[key] = None if _opt(d, key) is None else _num(d[key], f"inverse.{key}", positive=True)
    out["pd_iterations"] = (
        None
        if _opt(d, "pd_iterations") is None
        else _int(d["pd_iterations"], "inverse.pd_iterations", minimum=1)
    )
    return out


def _parse_geometry(d):
    d = _expect_dict(d, "geometry")
    _allow_keys(d, {"metric_dimension"}, "geometry")
    return {
        "metric_dimension": _int(_opt(d, "metric_dimension", 2), "geometry.metric_dimension", minimum=2)
    }


def _parse_verify(d):
    d = _expect_dict(d, "verify")
    _allow_keys(
        d,
        {
            "trials",
            "seed",
            "amplitude",
            "coarea_levels",
            "area_levels",
            "competitors",
            "curve_levels",
            "truncation_level",
            "k_ladder",
            "margin_rel_tol",
            "duality_tol",
            "coarea_tol",
            "area_tol_rel",
            "gates",
        },
        "verify",
    )
    out = {
        "trials": _int(_opt(d, "trials", 20), "verify.trials", minimum=1),
        "seed": _int(_opt(d, "seed", 0), "verify.seed"),
        "amplitude": _num(_opt(d, "amplitude", 0.05), "verify.amplitude", positive=True),
        "coarea_levels": _int(_opt(d, "coarea_levels", 200), "verify.coarea_levels", minimum=1),
        "area_levels": _int(_opt(d, "area_levels", 20), "verify.area_levels", minimum=1),
        "competitors": _int(_opt(d, "competitors", 5), "verify.competitors", minimum=1),
        "curve_levels": _int(_opt(d, "curve_levels", 9), "verify.curve_levels", minimum=1),
        "margin_rel_tol": _num(_opt(d, "margin_rel_tol", 1e-8), "verify.margin_rel_tol", nonneg=True),
        "duality_tol": _num(_opt(d, "duality_tol", 1e-3), "verify.duality_tol", positive=True),
        "coarea_tol": _num(_opt(d, "coarea_tol", 0.02), "verify.coarea_tol", positive=True),
        "area_tol_rel": _num(_opt(d, "area_tol_rel", 0.01), "verify.area_tol_rel", positive=True),
    }
    out["truncation_level"] = (
        None
        if _opt(d, "truncation_level") is None
        else _num(d["truncation_level"], "verify.truncation_level")
    )
    ladder = _opt(d, "k_ladder")
    if ladder is None:
        out["k_ladder"] = None
    else:
        if not isinstance(ladder, list) or not ladder:
            raise ConfigError("config entry 'verify.k_ladder' must be a nonempty list")
        out["k_ladder"] = [
            _num(k, f"verify.k_ladder[{i}]", positive=True) for i, k in enumerate(ladder)
        ]
    gates = _opt(d, "gates", ["minimality", "area_minimality"])
    if not isinstance(gates, list):
        raise ConfigError("config entry 'verify.gates' must be a list")
    known = {"minimality", "duality", "coarea", "area_minimality"}
    for g in gates:
        if g not in known:
            raise ConfigError(f"config entry 'verify.gates' has unknown gate {g!r}")
    out["gates"] = gates
    return out


def _parse_output(d):
    d = _expect_dict(d, "output")
    _allow_keys(d, {"directory"}, "output")
    directory = _opt(d, "directory")
    if directory is not None and not isinstance(directory, str):
        raise ConfigError("config entry 'output.directory' must be a string")
    return {"directory": directory}


def _parse_input(d):
    d = _expect_dict(d, "input")
    _allow_keys(d, {"triplet", "recon", "results"}, "input")
    out = {}
    for key in ("triplet", "recon", "results"):
        v = _opt(d, key)
        if v is not None and not isinstance(v, str):
            raise ConfigError(f"config entry 'input.{key}' must be a string")
        out[key] = v
    return out


_SECTION_PARSERS = {
    "grid": _parse_grid,
    "truth": _parse_truth,
    "inclusions": _parse_inclusions,
    "noise": _parse_noise,
    "inverse": _parse_inverse,
    "geometry": _parse_geometry,
    "verify": _parse_verify,
    "output": _parse_output,
    "input": _parse_input,
}


def parse_config(raw: dict) -> dict:
    raw = _expect_dict(raw, "<root>")
    unknown = sorted(set(raw) - set(_SECTION_PARSERS))
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'")
    cfg = {}
    for key, parser in _SECTION_PARSERS.items():
        if key in raw:
            cfg[key] = parser(raw[key])
    for key, default in (
        ("noise", {"level": 0.0, "seed": 0}),
        ("inverse", _parse_inverse({})),
        ("geometry", {"metric_dimension": 2}),
        ("verify", _parse_verify({})),
        ("output", {"directory": None}),
        ("input", {"triplet": None, "recon": None, "results": None}),
    ):
        cfg.setdefault(key, default)
    cfg.setdefault("inclusions", [])
    return cfg


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# -- builders -------------------------------------------------------------------


def build_grid(cfg) -> Grid2D:
    g = cfg["grid"]
    return Grid2D(g["nx"], g["ny"], g["lx"] / (g["nx"] - 1), g["ly"] / (g["ny"] - 1))


def build_c(cfg, grid: Grid2D) -> ScalarField:
    c = cfg["truth"]["c"]
    if c["kind"] == "constant":
        vals = np.full(grid.cell_shape, c["value"])
    else:
        cx, cy = grid.cell_centers()
        r2 = (cx - c["center"][0]) ** 2 + (cy - c["center"][1]) ** 2
        vals = c["base"] + c["amplitude"] * np.exp(-r2 / (2.0 * c["width"] ** 2))
    return ScalarField(grid, vals, location="cell")


def build_sigma0(cfg, grid: Grid2D) -> TensorField2:
    s = cfg["truth"]["sigma0"]
    if s["kind"] == "identity":
        return TensorField2.constant(grid, 1.0, 0.0, 1.0)
    if s["kind"] == "constant":
        return TensorField2.constant(grid, s["s11"], s["s12"], s["s22"])
    ct, st = np.cos(s["angle"]), np.sin(s["angle"])
    d1, d2 = s["d1"], s["d2"]
    return TensorField2.constant(
        grid,
        d1 * ct * ct + d2 * st * st,
        (d1 - d2) * st * ct,
        d1 * st * st + d2 * ct * ct,
    )


def build_f(cfg, grid: Grid2D) -> ScalarField:
    f = cfg["truth"]["f"]
    x, y = grid.node_coords()
    lx = (grid.nx - 1) * grid.hx
    ly = (grid.ny - 1) * grid.hy
    if f["kind"] == "linear":
        vals = f["gx"] * x + f["gy"] * y + f["offset"]
    else:
        vals = f["offset"] + f["amplitude"] * np.sin(
            np.pi * (f["kx"] * x / lx + f["ky"] * y / ly)
        )
    return ScalarField(grid, vals, location="node")


def build_inclusions(cfg, grid: Grid2D):
    entries = cfg["inclusions"]
    if not entries:
        return None
    perfect, insulating = [], []
    for e in entries:
        if e["shape"] == "disk":
            m = disk_cells(grid, e["center"], e["radius"])
        else:
            m = rect_cells(grid, e["lo"], e["hi"])
        (perfect if e["type"] == "perfect" else insulating).append(m)
    return InclusionSet(grid, perfect=perfect, insulating=insulating)


def _sine_perturbations(u: ScalarField, count: int, seed: int, amplitude: float):
    """Zero-trace smooth bumps, the same family the minimality audit draws."""
    grid = u.grid
    rng = np.random.default_rng(seed)
    urange = float(np.nanmax(u.values)) - float(np.nanmin(u.values))
    x, y = grid.node_coords()
    lx = (grid.nx - 1) * grid.hx
    ly = (grid.ny - 1) * grid.hy
    out = []
    for _ in range(count):
        coef = rng.standard_normal((3, 3))
        w = np.zeros(grid.shape)
        for p in range(1, 4):
            for q in range(1, 4):
                w += coef[p - 1, q - 1] * np.sin(p * np.pi * x / lx) * np.sin(q * np.pi * y / ly)
        w.ravel()[grid.boundary_ids] = 0.0
        w[~grid.mask] = 0.0
        wmax = float(np.max(np.abs(w)))
        if wmax > 0.0:
            w *= amplitude * max(urange, 1e-300) / wmax
        out.append(ScalarField(grid, np.where(grid.mask, u.values + w, np.nan), location="node"))
    return out


# -- serialization helpers -------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def _out_dir(cfg, args) -> Path:
    directory = args.out if args.out is not None else cfg["output"]["directory"]
    if directory is None:
        raise ConfigError("no output directory given (set output.directory or pass --out)")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(args, line: str) -> None:
    if not args.quiet:
        print(line)


def _require_triplet(cfg) -> str:
    path = cfg["input"]["triplet"]
    if path is None:
        raise ConfigError("this command needs input.triplet in the config")
    return path


# -- commands ---------------------------------------------------------------------


def cmd_forward(cfg, args, chash) -> int:
    grid = build_grid(cfg)
    c = build_c(cfg, grid)
    sigma0 = build_sigma0(cfg, grid)
    f = build_f(cfg, grid)
    inclusions = build_inclusions(cfg, grid)
    sigma = TensorField2(
        grid, c.values * sigma0.s11, c.values * sigma0.s12, c.values * sigma0.s22
    )
    u, current = solve_truth(c, sigma0, f, grid, inclusions)
    a = compute_a(current, sigma0)
    avals = a.values.copy()
    if inclusions is not None and inclusions.insulating:
        avals[inclusions.insulating_mask()] = 0.0
    a = ScalarField(grid, avals, location="cell")

    out = _out_dir(cfg, args)
    # magnitude.field, not a.field: synth owns a.field as triplet payload,
    # and a forward run into the same directory must not rewrite a triplet
    write_field_file(u, out / "potential.field")
    write_field_file(current, out / "current.field")
    write_field_file(a, out / "magnitude.field")
    gap = duality_gap(u, f, current, a, sigma0)
    report = {
        "command": "forward",
        "version": __version__,
        "config_hash": chash,
        "grid": {"nx": grid.nx, "ny": grid.ny, "hx": grid.hx, "hy": grid.hy},
        "energy": energy(u, sigma, inclusions),
        "duality_gap": gap,
        "files": {
            "potential": "potential.field",
            "current": "current.field",
            "magnitude": "magnitude.field",
        },
    }
    _write_json(out / "forward.json", report)
    _say(args, f"forward: energy {report['energy']:.6e}, duality gap {gap:.3e} -> {out}")
    return 0


def cmd_synth(cfg, args, chash) -> int:
    grid = build_grid(cfg)
    c = build_c(cfg, grid)
    sigma0 = build_sigma0(cfg, grid)
    f = build_f(cfg, grid)
    inclusions = build_inclusions(cfg, grid)
    seed = args.seed if args.seed is not None else cfg["noise"]["seed"]
    triplet = synthesize_triplet(
        c,
        sigma0,
        f,
        grid,
        inclusions=inclusions,
        noise_level=cfg["noise"]["level"],
        seed=seed,
    )
    out = _out_dir(cfg, args)
    save_triplet(triplet, out)
    amax = float(np.max(np.where(grid.cells_in_domain(), triplet.a.values, 0.0)))
    report = {
        "command": "synth",
        "version": __version__,
        "config_hash": chash,
        "grid": {"nx": grid.nx, "ny": grid.ny, "hx": grid.hx, "hy": grid.hy},
        "a_max": amax,
        "zero_data_cells": int(triplet.zero_cells().sum()),
        "noise": {"level": cfg["noise"]["level"], "seed": seed},
    }
    _write_json(out / "synth.json", report)
    _say(args, f"synth: a_max {amax:.6e}, zero cells {report['zero_data_cells']} -> {out}")
    return 0


def cmd_invert(cfg, args, chash) -> int:
    triplet = load_triplet(_require_triplet(cfg))
    inv = cfg["inverse"]
    problem = TVProblem(
        triplet=triplet,
        eps0=inv["eps0"],
        eps_ratio=inv["eps_ratio"],
        eps_stages=inv["eps_stages"],
        fp_tol=inv["fp_tol"],
        max_inner=inv["max_inner"],
        cg_tol=inv["cg_tol"],
        pd_tau=inv["pd_tau"],
        pd_sigma=inv["pd_sigma"],
        pd_iterations=inv["pd_iterations"],
        delta_grad=inv["delta_grad"],
        delta_a=inv["delta_a"],
        void_floor=inv["void_floor"],
    )
    report = reconstruct(problem, algorithm=inv["algorithm"])
    grid = triplet.grid
    out = _out_dir(cfg, args)
    write_field_file(report.u_star, out / "u_star.field")
    write_field_file(report.c_rec, out / "c_rec.field")
    write_field_file(
        ScalarField(grid, report.mask_z.astype(np.float64), location="cell"),
        out / "mask_z.field",
    )
    doc = {
        "command": "invert",
        "version": __version__,
        "config_hash": chash,
        "algorithm": inv["algorithm"],
        "grid": {"nx": grid.nx, "ny": grid.ny, "hx": grid.hx, "hy": grid.hy},
        "labels": report.labels,
        "diagnostics": report.diagnostics,
        # sigma_rec is c_rec * sigma0 cellwise (zero on the masked cells),
        # so only the scalar factor and its mask are materialized
        "files": {
            "u_star": "u_star.field",
            "c_rec": "c_rec.field",
            "mask_z": "mask_z.field",
        },
    }
    _write_json(out / "recon.json", doc)
    gap = report.diagnostics.get("duality_gap", float("nan"))
    _say(args, f"invert: duality gap {gap:.3e}, masked cells {int(report.mask_z.sum())} -> {out}")
    return 0


def cmd_verify(cfg, args, chash) -> int:
    triplet = load_triplet(_require_triplet(cfg))
    grid = triplet.grid
    vcfg = cfg["verify"]
    seed = args.seed if args.seed is not None else vcfg["seed"]

    recon_dir = cfg["input"]["recon"]
    if recon_dir is not None:
        u_raw = read_field_file(Path(recon_dir) / "u_star.field")
        if u_raw.values.shape != grid.shape:
            raise DataError("u_star plane does not match the triplet grid")
        u = ScalarField(grid, u_raw.values, location="node")
        u_source = "recon"
    elif triplet.provenance.get("u_true") is not None:
        u = ScalarField(grid, triplet.provenance["u_true"], location="node")
        u_source = "provenance"
    else:
        raise ConfigError("verify needs input.recon or a triplet with a stored potential")

    c_rec, mask_z, _ = recover_c(u, triplet.a, triplet.sigma0)
    gr_cells = grid.cells_in_domain() & ~mask_z
    gr = gradient(u)
    w1, w2 = triplet.sigma0.apply(gr.v1, gr.v2)
    j1 = np.where(gr_cells, -c_rec.values * w1, 0.0)
    j2 = np.where(gr_cells, -c_rec.values * w2, 0.0)
    current = VectorField2(grid, j1, j2)

    audits = {}
    audits["minimality"] = minimality_audit(
        u,
        triplet.a,
        triplet.sigma0,
        trials=vcfg["trials"],
        seed=seed,
        amplitude=vcfg["amplitude"],
        f=triplet.f,
        current=current,
    )
    audits["coarea"] = coarea_audit(u, triplet.a, triplet.sigma0, n_levels=vcfg["coarea_levels"])
    # keep the report compact; the full per-level table stays computable on demand
    audits["coarea"] = {
        k: v for k, v in audits["coarea"].items() if k not in ("levels", "perimeters")
    }

    metric = build_metric(triplet.a, triplet.sigma0, n=cfg["geometry"]["metric_dimension"])
    _, rms = curvature_residual(u, metric)
    swapped = TensorField2(grid, triplet.sigma0.s22, triplet.sigma0.s12, triplet.sigma0.s11)
    control_rms = rms
    if not np.array_equal(triplet.sigma0.s11, triplet.sigma0.s22):
        metric_sw = build_metric(triplet.a, swapped, n=cfg["geometry"]["metric_dimension"])
        _, control_rms = curvature_residual(u, metric_sw)
    audits["curvature"] = {
        "rms": rms,
        "control_rms": control_rms,
        "control": "axis-swapped sigma0",
    }

    competitors = _sine_perturbations(u, vcfg["competitors"], seed + 1, vcfg["amplitude"])
    audits["area_minimality"] = area_minimality_audit(
        u,
        competitors,
        triplet.a,
        n_levels=vcfg["area_levels"],
        tol_rel=vcfg["area_tol_rel"],
    )

    umask = u.values[grid.mask]
    level = (
        vcfg["truncation_level"]
        if vcfg["truncation_level"] is not None
        else float(np.median(umask))
    )
    audits["truncation"] = truncation_limit_audit(u, triplet.a, triplet.sigma0, level)

    if vcfg["k_ladder"] is not None:
        audits["penalization_ladder"] = _penalization_ladder(triplet, vcfg["k_ladder"])

    gates = {}
    m = audits["minimality"]
    gates["minimality"] = bool(
        m["min_margin"] >= -vcfg["margin_rel_tol"] * max(m["tv_value"], 1e-300)
    )
    gates["duality"] = bool(m["duality_gap"] <= vcfg["duality_tol"])
    gates["coarea"] = bool(audits["coarea"]["rel_discrepancy"] <= vcfg["coarea_tol"])
    gates["area_minimality"] = bool(audits["area_minimality"]["violations"] == 0)

    enabled = vcfg["gates"]
    passed = all(gates[g] for g in enabled)
    doc = {
        "command": "verify",
        "version": __version__,
        "config_hash": chash,
        "u_source": u_source,
        "audits": audits,
        "gates": gates,
        "enabled_gates": enabled,
        "passed": passed,
    }
    out = _out_dir(cfg, args)
    _write_json(out / "audits.json", doc)

    qs = np.quantile(umask, [(j + 1) / (vcfg["curve_levels"] + 1) for j in range(vcfg["curve_levels"])])
    curves = []
    for lam in qs:
        curves.extend(extract_level_set(u, float(lam)))
    (out / "curves.csv").write_text(curves_to_csv(curves))

    for name in ("minimality", "duality", "coarea", "area_minimality"):
        status = "PASS" if gates[name] else "FAIL"
        gate_note = "" if name in enabled else " (not gated)"
        if name == "minimality":
            detail = f"min margin {m['min_margin']:.3e}"
        elif name == "duality":
            detail = f"gap {m['duality_gap']:.3e}"
        elif name == "coarea":
            detail = f"discrepancy {audits['coarea']['rel_discrepancy']:.3e}"
        else:
            detail = f"{audits['area_minimality']['violations']} violations"
        _say(args, f"{name}: {status} ({detail}){gate_note}")
    _say(args, f"curvature: rms {rms:.3e} (control {control_rms:.3e})")
    t = audits["truncation"]
    _say(
        args,
        f"truncation: limit {t['limit']:.6e} vs anisotropic {t['anisotropic_perimeter']:.6e} "
        f"vs euclidean {t['euclidean_weighted_length']:.6e}",
    )
    return 0 if passed else 1


def _penalization_ladder(triplet: AdmissibleTriplet, ks) -> dict:
    grid = triplet.grid
    prov = triplet.provenance
    if (
        triplet.inclusions is None
        or not triplet.inclusions.perfect
        or prov.get("c_true") is None
    ):
        return {"skipped": True, "reason": "needs perfect inclusions and the stored truth"}
    c_arr = np.asarray(prov["c_true"], dtype=np.float64)
    sigma0 = triplet.sigma0
    sigma = TensorField2(
        grid, c_arr * sigma0.s11, c_arr * sigma0.s12, c_arr * sigma0.s22
    )
    u0 = solve_inclusion_limit(sigma, triplet.f, grid, triplet.inclusions)
    i0 = energy(u0, sigma, triplet.inclusions)
    ref = float(np.sqrt(np.sum(u0.values[grid.mask] ** 2)))
    rows = []
    for k in sorted(ks, reverse=True):
        uk = solve_penalized(k, sigma0, sigma, triplet.f, grid, triplet.inclusions)
        d = (uk.values - u0.values)[grid.mask]
        dist = float(np.sqrt(np.sum(d * d))) / max(ref, 1e-300)
        ik = energy(uk, sigma, triplet.inclusions, k=k, sigma1=sigma0)
        rows.append({"k": k, "distance_rel": dist, "energy": ik})
    dists = [r["distance_rel"] for r in rows]
    energies = [r["energy"] for r in rows]
    return {
        "skipped": False,
        "limit_energy": i0,
        "rows": rows,
        "distance_monotone": bool(all(b <= a * (1.0 + 1e-12) for a, b in zip(dists, dists[1:]))),
        "energy_monotone": bool(
            all(b >= a - 1e-12 * (1.0 + abs(a)) for a, b in zip(energies, energies[1:]))
        ),
        "final_distance_rel": dists[-1] if dists else None,
    }


def cmd_report(cfg, args, chash) -> int:
    results = cfg["input"]["results"]
    if results is None:
        raise ConfigError("report needs input.results in the config")
    rdir = Path(results)
    if not rdir.is_dir():
        raise ConfigError(f"results directory not found: {rdir}")
    sections = {}
    for name in ("forward", "synth", "recon", "audits"):
        path = rdir / f"{name}.json"
        if path.exists():
            sections[name] = json.loads(path.read_text())
    if not sections:
        raise ConfigError(f"no result JSON files found in {rdir}")
    doc = {
        "command": "report",
        "version": __version__,
        "config_hash": chash,
        "sections": sections,
    }
    out = _out_dir(cfg, args)
    _write_json(out / "report.json", doc)
    _say(args, f"report: aggregated {sorted(sections)} -> {out / 'report.json'}")
    if "audits" in sections:
        _say(args, f"verify passed: {sections['audits'].get('passed')}")
    if "recon" in sections:
        diag = sections["recon"].get("diagnostics", {})
        if "duality_gap" in diag:
            _say(args, f"recovery duality gap: {diag['duality_gap']:.3e}")
    return 0


_COMMANDS = {
    "forward": cmd_forward,
    "synth": cmd_synth,
    "invert": cmd_invert,
    "verify": cmd_verify,
    "report": cmd_report,
}

_USAGE_ERRORS = (
    ConfigError,
    DataError,
    FieldFormatError,
    GridError,
    AssemblyError,
    TVConfigError,
    OSError,
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="acdii",
        description="Anisotropic current-density impedance imaging laboratory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("forward", "solve the truth problem and write its fields"),
        ("synth", "synthesize an admissible data triplet"),
        ("invert", "run the weighted-TV recovery on a triplet"),
        ("verify", "run the structural audits on a triplet"),
        ("report", "aggregate result JSON files"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    args = parser.parse_args(argv)

    try:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        cfg = parse_config(raw)
        chash = config_hash(raw)
        return _COMMANDS[args.command](cfg, args, chash)
    except _USAGE_ERRORS as exc:
        sys.stderr.write(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True) + "\n"
        )
        return 2
    except ConvergenceError as exc:
        sys.stderr.write(
            json.dumps({"error": "ConvergenceError", "message": str(exc)}, sort_keys=True) + "\n"
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
