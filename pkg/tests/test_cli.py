"""Command-line exit codes, artifacts, and the rerun no-op contract."""

import json

import numpy as np
import pytest

from shockcell.cli import _bundle_dir, _config_hash, main
from shockcell.config import load_config
from shockcell.family import FamilyDatabase, FamilyEntry, _curve_filename
from shockcell.solver import CurveSample, StressStrainCurve
from shockcell.topology import bundled_topology, default_params


def _seed_family(root):
    """A one-entry database with a flat 3%-high curve at 1000 Pa."""
    root.mkdir(parents=True, exist_ok=True)
    strains = np.round(np.arange(0.1, 0.501, 0.01), 10)
    curve = StressStrainCurve()
    for eps in strains:
        curve.append(CurveSample(float(eps), np.diag([0.0, -1030.0]),
                                 0.0, 0.0, state=None))
    curve.to_csv(root / _curve_filename("chi", 1000.0))
    db = FamilyDatabase(entries=[FamilyEntry("chi", (0.5, 0.1), 1000.0, 0.5,
                                             0.03, _curve_filename("chi", 1000.0))])
    db.save(root)


def test_select_exit_and_report(tmp_path):
    rc = main(["--out-dir", str(tmp_path), "select", "--mass", "1",
               "--area", "0.01", "--decel", "100", "--height", "1",
               "--alpha", "0.5", "--gravity", "9.8"])
    assert rc == 0
    doc = json.loads((tmp_path / "selection.json").read_text())
    assert doc["sigma_f"] == pytest.approx(1e4)
    assert doc["thickness"] == pytest.approx(0.196)


def test_select_alpha_from_database(tmp_path):
    _seed_family(tmp_path / "family")
    rc = main(["--out-dir", str(tmp_path), "select", "--mass", "1",
               "--area", "0.1", "--decel", "100", "--height", "0.5"])
    assert rc == 0
    doc = json.loads((tmp_path / "selection.json").read_text())
    assert doc["sigma_f"] == pytest.approx(1000.0)
    assert doc["alpha"] == pytest.approx(0.5)  # single family entry


def test_select_without_database_fails(tmp_path):
    rc = main(["--out-dir", str(tmp_path), "select", "--mass", "1",
               "--area", "0.1", "--decel", "100", "--height", "0.5"])
    assert rc == 1  # alpha lookup needs a family database


def test_missing_config_file(tmp_path):
    rc = main(["--config", str(tmp_path / "nope.toml"), "select",
               "--mass", "1", "--area", "0.01", "--decel", "100"])
    assert rc == 1


def test_bad_config_value(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("[material]\nmu = -2.0\n")
    rc = main(["--config", str(cfg), "select", "--mass", "1",
               "--area", "0.01", "--decel", "100"])
    assert rc == 1


def test_coverage_empty_database(tmp_path):
    FamilyDatabase().save(tmp_path / "family")
    rc = main(["--out-dir", str(tmp_path), "coverage"])
    assert rc == 0
    text = (tmp_path / "coverage.csv").read_text()
    assert text == "sigma_target,strain,covered,topology,deviation\n"


def test_coverage_from_seeded_database(tmp_path):
    _seed_family(tmp_path / "family")
    rc = main(["--out-dir", str(tmp_path), "coverage"])
    assert rc == 0
    lines = (tmp_path / "coverage.csv").read_text().splitlines()
    assert lines[0] == "sigma_target,strain,covered,topology,deviation"
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == 6  # one target x default strain grid 0.2..0.7
    covered = {r[1]: r[2] for r in rows}
    assert covered["0.2"] == "true" and covered["0.5"] == "true"
    assert covered["0.6"] == "false"  # beyond the stored curve


def test_homogenize_writes_deterministic_curve(tmp_path):
    args = ["--resolution", "16", "homogenize", "chi",
            "--eps-max", "0.04", "--step", "0.02"]
    rc = main(["--out-dir", str(tmp_path / "a")] + args)
    assert rc == 0
    first = (tmp_path / "a" / "curve_chi.csv").read_bytes()
    assert first.decode().count("\n") == 3  # header + two samples

    rc = main(["--out-dir", str(tmp_path / "b")] + args)
    assert rc == 0
    assert (tmp_path / "b" / "curve_chi.csv").read_bytes() == first


def test_homogenize_partial_schedule(tmp_path):
    # an absurdly tight gradient tolerance stalls the line search on the
    # first scheduled strain: partial CSV, exit code 2
    cfg = tmp_path / "run.toml"
    cfg.write_text("[solver]\ntol_grad = 1e-12\n")
    rc = main(["--config", str(cfg), "--out-dir", str(tmp_path),
               "--resolution", "16", "homogenize", "chi",
               "--eps-max", "0.04", "--step", "0.02"])
    assert rc == 2
    lines = (tmp_path / "curve_chi.csv").read_text().splitlines()
    assert lines[0].startswith("strain,stress11")
    assert len(lines) < 3  # stopped before finishing the schedule


def test_homogenize_trace(tmp_path):
    rc = main(["--out-dir", str(tmp_path), "--resolution", "16", "--trace",
               "homogenize", "chi", "--eps-max", "0.02", "--step", "0.02"])
    assert rc == 0
    trace = (tmp_path / "homogenize_trace.jsonl").read_text().splitlines()
    assert trace
    row = json.loads(trace[0])
    assert "iter" in row and "W" in row


def test_homogenize_params_file(tmp_path):
    topology = bundled_topology("chi")
    q = default_params(topology).to_vector()
    params = tmp_path / "q.json"
    params.write_text(json.dumps({"q": list(map(float, q))}))
    rc = main(["--out-dir", str(tmp_path), "--resolution", "16",
               "homogenize", "chi", "--params", str(params),
               "--eps-max", "0.02", "--step", "0.02"])
    assert rc == 0
    assert (tmp_path / "curve_chi.csv").exists()


def test_optimize_rerun_is_noop(tmp_path):
    """A bundle whose config hash matches and whose range was accepted must
    not be recomputed."""
    cfg = load_config(None, {"out_dir": tmp_path})
    bundle = _bundle_dir(cfg, "chi", 7000.0)
    bundle.mkdir(parents=True)
    doc = {"config_hash": _config_hash(cfg, {"topology": "chi",
                                             "target": 7000.0}),
           "topology": "chi", "target": 7000.0, "accepted_eps": 0.3,
           "q": [0.5] * 20, "stages": []}
    (bundle / "result.json").write_text(json.dumps(doc))
    before = (bundle / "result.json").read_bytes()

    rc = main(["--out-dir", str(tmp_path), "optimize", "chi", "7000"])
    assert rc == 0
    assert (bundle / "result.json").read_bytes() == before


def test_optimize_stale_hash_recomputes(tmp_path):
    # same bundle, but the stored hash no longer matches the configuration:
    # the cheap path must not be taken (max_iter=0 keeps the recompute small)
    cfg = tmp_path / "run.toml"
    cfg.write_text("[sweep]\nmax_iter = 0\n"
                   "[objective]\neps_max = 0.12\nn_samples = 2\n"
                   "[mesher]\nresolution = 16\n")
    conf = load_config(cfg, {"out_dir": tmp_path})
    bundle = _bundle_dir(conf, "rhomboid", 1e9)
    bundle.mkdir(parents=True)
    (bundle / "result.json").write_text(json.dumps(
        {"config_hash": "0" * 16, "accepted_eps": 0.3}))
    rc = main(["--config", str(cfg), "--out-dir", str(tmp_path),
               "optimize", "rhomboid", "1e9"])
    assert rc == 2  # recomputed; nothing acceptable at that target
    doc = json.loads((bundle / "result.json").read_text())
    assert doc["config_hash"] != "0" * 16
    assert doc["accepted_eps"] is None
    assert doc["stages"] and not doc["stages"][0]["accepted"]


def test_verify_rejects_unaccepted_bundle(tmp_path):
    bundle = tmp_path / "opt_chi_7000"
    bundle.mkdir(parents=True)
    (bundle / "result.json").write_text(json.dumps(
        {"accepted_eps": None, "topology": "chi", "target": 7000.0,
         "q": [0.5] * 20}))
    rc = main(["verify", str(bundle)])
    assert rc == 1


def test_verify_flags_deviating_bundle(tmp_path):
    topology = bundled_topology("rhomboid")
    q = default_params(topology).to_vector()
    bundle = tmp_path / "opt_rhomboid_1e+09"
    bundle.mkdir(parents=True)
    (bundle / "result.json").write_text(json.dumps(
        {"accepted_eps": 0.12, "topology": "rhomboid", "target": 1e9,
         "q": list(map(float, q)), "config_hash": "x"}))
    rc = main(["--resolution", "16", "verify", str(bundle)])
    assert rc == 1  # the dense sweep is nowhere near the absurd target
