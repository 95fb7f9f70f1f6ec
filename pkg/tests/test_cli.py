import csv
import json

import pytest

from roict.cli import format_table, main

SMALL_RUN = {
    "n": 16,
    "geometry": {"preset": "circle", "n_det": 32, "n_views": 36},
    "iteration": {"max_iter": 3, "wavelet": {"levels": 2}},
    "phantom": {"kind": "ball", "radius": 60},
    "roi_fraction": 0.4,
    "radii_fractions": [0.3, 0.4, 0.5, 0.6],
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(SMALL_RUN))
    return p


def run(cmd, config, out, *extra):
    return main([cmd, "--config", str(config), "--out", str(out), "--quiet", "--workers", "1", *extra])


def test_phantom_then_reconstruct(config, tmp_path):
    out = tmp_path / "o"
    assert run("phantom", config, out) == 0
    assert (out / "phantom.raw").exists() and (out / "config.json").exists()
    assert run("reconstruct", config, out) == 0
    for name in ("recon.raw", "report.json", "profile.csv", "recon_xy.png", "truth_yz.png", "truncated.bin"):
        assert (out / name).exists(), name
    rep = json.loads((out / "report.json").read_text())
    assert {"config", "inverse", "report"} <= set(rep)


def test_second_run_is_a_no_op(config, tmp_path):
    out = tmp_path / "o"
    assert run("reconstruct", config, out) == 0
    stamp = (out / "recon.raw").stat().st_mtime_ns
    assert run("reconstruct", config, out) == 0
    assert (out / "recon.raw").stat().st_mtime_ns == stamp


def test_reruns_are_byte_identical(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("reconstruct", config, out) == 0
        assert run("metrics", config, out) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_metrics_masked_fraction_matches_prediction(config, tmp_path):
    out = tmp_path / "o"
    assert run("truncate", config, out) == 0
    assert run("metrics", config, out) == 0
    m = json.loads((out / "metrics.json").read_text())["masked_ray_fraction"]
    assert m["measured"] == pytest.approx(m["predicted"], abs=0.02)


def test_metrics_without_inputs_is_a_domain_error(config, tmp_path, capsys):
    assert run("metrics", config, tmp_path / "empty") == 1
    assert "error in cli" in capsys.readouterr().err


def test_sweep_writes_one_row_per_radius(config, tmp_path):
    out = tmp_path / "o"
    assert run("sweep", config, out) == 0
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert list(rows[0]) == ["density", "geometry", "roi_radius", "RL1", "iterations", "converged"]
    s = json.loads((out / "sweep.json").read_text())
    assert [r["fraction"] for r in s["rows"]] == SMALL_RUN["radii_fractions"]


def test_tuy_single_circle_fails_with_exit_one(config, tmp_path):
    assert run("tuy", config, tmp_path / "o") == 1
    assert json.loads((tmp_path / "o" / "tuy.json").read_text())["passed"] is False


def test_tuy_twin_circles_pass(tmp_path):
    cfg = dict(SMALL_RUN, geometry={"preset": "twin_circles", "n_det": 32, "n_views": 36})
    p = tmp_path / "twin.json"
    p.write_text(json.dumps(cfg))
    assert run("tuy", p, tmp_path / "o") == 0


def test_small_grid_is_a_usage_error(config, tmp_path):
    with pytest.raises(SystemExit) as e:
        run("phantom", config, tmp_path / "o", "--n", "4")
    assert e.value.code == 2


def test_bad_config_is_a_usage_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"n": 16, "roi_fraction": 2.0}))
    assert run("phantom", p, tmp_path / "o") == 2
    p.write_text("{not json")
    assert run("phantom", p, tmp_path / "o") == 2


def test_table_format():
    row = {"density": "ball", "geometry": "circle", "roi_radius": 10.0, "RL1": 0.12345, "iterations": 4, "converged": True}
    lines = format_table([row]).splitlines()
    assert lines[0].split() == ["density", "geometry", "roi_radius", "RL1", "iterations", "converged"]
    assert lines[2].split() == ["ball", "circle", "10.0000", "0.1235", "4", "yes"]
