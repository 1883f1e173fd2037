"""Command-line driver: config validation, pipeline, determinism, exit codes."""

import json

import numpy as np
import pytest

from acdii.cli import ConfigError, config_hash, main, parse_config
from acdii.io import read_field_file, write_field_file


def _base_config(out_dir, n=17, noise=0.0):
    return {
        "grid": {"nx": n, "ny": n, "lx": 1.0, "ly": 1.0},
        "truth": {
            "c": {
                "kind": "gaussian_bump",
                "base": 1.0,
                "amplitude": 0.5,
                "center": [0.5, 0.5],
                "width": 0.15,
            },
            "sigma0": {"kind": "rotated_diag", "angle": 0.5236, "d1": 2.0, "d2": 1.0},
            "f": {"kind": "linear", "gx": 1.0, "gy": 0.0},
        },
        "noise": {"level": noise, "seed": 11},
        "inverse": {"algorithm": "fixedpoint"},
        "verify": {"trials": 6, "seed": 3, "coarea_levels": 40, "area_levels": 6,
                   "competitors": 3},
        "output": {"directory": str(out_dir)},
    }


def _write(tmp_path, cfg, name="job.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return str(p)


def test_parse_rejects_unknown_keys(tmp_path):
    cfg = _base_config(tmp_path / "out")
    cfg["grid"]["nz"] = 4
    with pytest.raises(ConfigError) as exc:
        parse_config(cfg)
    assert "grid.nz" in str(exc.value)
    cfg = _base_config(tmp_path / "out")
    cfg["mystery"] = {}
    with pytest.raises(ConfigError) as exc:
        parse_config(cfg)
    assert "mystery" in str(exc.value)


def test_parse_rejects_wrong_types(tmp_path):
    cfg = _base_config(tmp_path / "out")
    cfg["grid"]["nx"] = "seventeen"
    with pytest.raises(ConfigError):
        parse_config(cfg)
    cfg = _base_config(tmp_path / "out")
    cfg["noise"]["level"] = True
    with pytest.raises(ConfigError):
        parse_config(cfg)


def test_config_hash_order_independent(tmp_path):
    cfg = _base_config(tmp_path / "out")
    h1 = config_hash(parse_config(cfg))
    reordered = json.loads(json.dumps(cfg))
    reordered["truth"] = dict(reversed(list(reordered["truth"].items())))
    h2 = config_hash(parse_config(reordered))
    assert h1 == h2
    cfg["noise"]["seed"] = 12
    assert config_hash(parse_config(cfg)) != h1


def test_full_pipeline_exit_codes(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = _base_config(out)
    path = _write(tmp_path, cfg)
    assert main(["synth", "--config", path]) == 0
    assert (out / "triplet.json").exists()

    cfg["input"] = {"triplet": str(out)}
    path = _write(tmp_path, cfg)
    assert main(["forward", "--config", path]) == 0
    assert main(["invert", "--config", path]) == 0
    assert (out / "u_star.field").exists()
    assert (out / "c_rec.field").exists()
    assert (out / "recon.json").exists()

    cfg["input"]["recon"] = str(out)
    path = _write(tmp_path, cfg)
    assert main(["verify", "--config", path]) == 0
    lines = capsys.readouterr().out
    assert "minimality: PASS" in lines
    assert (out / "audits.json").exists()
    assert (out / "curves.csv").exists()

    cfg["input"]["results"] = str(out)
    path = _write(tmp_path, cfg)
    assert main(["report", "--config", path]) == 0
    rep = json.loads((out / "report.json").read_text())
    # the recorded hash identifies the raw config document
    assert rep["config_hash"] == config_hash(json.loads((tmp_path / "job.json").read_text()))


def test_invert_reruns_byte_identical(tmp_path):
    out = tmp_path / "out"
    cfg = _base_config(out)
    path = _write(tmp_path, cfg)
    assert main(["synth", "--config", path]) == 0
    cfg["input"] = {"triplet": str(out)}
    path = _write(tmp_path, cfg)
    assert main(["invert", "--config", path]) == 0
    first = {
        name: (out / name).read_bytes()
        for name in ("u_star.field", "c_rec.field", "mask_z.field", "recon.json")
    }
    assert main(["invert", "--config", path]) == 0
    for name, blob in first.items():
        assert (out / name).read_bytes() == blob


def test_forward_into_synth_dir_keeps_triplet_intact(tmp_path):
    # forward and synth may share a directory: the truth-solve artifacts
    # must not rewrite the triplet payload (a.field in particular)
    out = tmp_path / "out"
    cfg = _base_config(out)
    cfg["inclusions"] = [
        {"type": "perfect", "shape": "disk", "center": [0.3, 0.7], "radius": 0.12}
    ]
    path = _write(tmp_path, cfg)
    assert main(["synth", "--config", path]) == 0
    a_saved = (out / "a.field").read_bytes()

    cfg["input"] = {"triplet": str(out)}
    path = _write(tmp_path, cfg)
    assert main(["forward", "--config", path]) == 0
    assert (out / "magnitude.field").exists()
    assert (out / "a.field").read_bytes() == a_saved

    from acdii.data import load_triplet

    t = load_triplet(str(out))
    disk = t.inclusions.perfect_mask()
    assert disk.any()
    # the fill from the penalized current survives: positive data over
    # the perfectly conducting component, and forward agrees with synth
    assert float(t.a.values[disk].min()) > 0.0
    mag = read_field_file(out / "magnitude.field")
    assert np.allclose(mag.values, t.a.values, rtol=0.0, atol=1e-12)


def test_seed_flag_changes_noise_draw(tmp_path):
    out1, out2, out3 = (tmp_path / d for d in ("a", "b", "c"))
    for out, seed in ((out1, None), (out2, "11"), (out3, "99")):
        cfg = _base_config(out, noise=0.05)
        path = _write(tmp_path, cfg, name=f"{out.name}.json")
        argv = ["synth", "--config", path] + (["--seed", seed] if seed else [])
        assert main(argv) == 0
    same = (out1 / "a.field").read_bytes() == (out2 / "a.field").read_bytes()
    diff = (out1 / "a.field").read_bytes() == (out3 / "a.field").read_bytes()
    assert same and not diff


def test_verify_fails_on_corrupted_potential(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = _base_config(out)
    path = _write(tmp_path, cfg)
    assert main(["synth", "--config", path]) == 0
    cfg["input"] = {"triplet": str(out)}
    path = _write(tmp_path, cfg)
    assert main(["invert", "--config", path]) == 0

    bad_dir = tmp_path / "bad"
    bad_dir.mkdir()
    u = read_field_file(out / "u_star.field")
    x, y = u.grid.node_coords()
    from acdii.fields import ScalarField

    wrecked = ScalarField(
        u.grid, u.values + 0.4 * np.sin(np.pi * x) * np.sin(np.pi * y)
    )
    write_field_file(wrecked, bad_dir / "u_star.field")
    cfg["input"]["recon"] = str(bad_dir)
    path = _write(tmp_path, cfg)
    assert main(["verify", "--config", path]) == 1
    assert "minimality: FAIL" in capsys.readouterr().out


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["synth", "--config", str(tmp_path / "nope.json")]) == 2
    err = capsys.readouterr().err
    assert json.loads(err.strip())["error"]


def test_invert_without_triplet_exits_2(tmp_path):
    cfg = _base_config(tmp_path / "out")
    path = _write(tmp_path, cfg)
    assert main(["invert", "--config", path]) == 2


def test_degenerate_grid_exits_2(tmp_path):
    cfg = _base_config(tmp_path / "out")
    cfg["grid"]["nx"] = 1
    path = _write(tmp_path, cfg)
    assert main(["synth", "--config", path]) == 2


def test_unknown_key_exits_2_with_named_key(tmp_path, capsys):
    cfg = _base_config(tmp_path / "out")
    cfg["inverse"]["momentum"] = 0.9
    path = _write(tmp_path, cfg)
    assert main(["synth", "--config", path]) == 2
    assert "inverse.momentum" in capsys.readouterr().err


def test_quiet_suppresses_stdout(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = _base_config(out)
    path = _write(tmp_path, cfg)
    assert main(["synth", "--config", path, "--quiet"]) == 0
    assert capsys.readouterr().out == ""
