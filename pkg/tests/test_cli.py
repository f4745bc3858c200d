import json

import numpy as np
import pytest

from ellipsoidal_rhc.cli import (
    EXIT_INFEASIBLE,
    EXIT_MISMATCH,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFY_FAILED,
    main,
)
from ellipsoidal_rhc.harness import build_scenario_1


@pytest.fixture(scope="module")
def short_run(s1_bundle_file, scenario_dir, tmp_path_factory):
    """A 3 s Scenario-1 run through the CLI, with plots."""
    d = build_scenario_1().to_dict()
    d["sim"]["duration"] = 3.0
    base = tmp_path_factory.mktemp("cli")
    scn = base / "short.json"
    scn.write_text(json.dumps(d))
    out = base / "run"
    rc = main(["run", "--scenario", str(scn), "--bundle", str(s1_bundle_file), "--out", str(out)])
    return rc, out


def test_usage_errors(tmp_path, s1_bundle_file):
    bad = tmp_path / "bad.toml"
    bad.write_text("[road\nlane_width = ")
    assert main(["synthesize", "--scenario", str(bad), "--out", str(tmp_path / "b.json")]) == EXIT_USAGE
    assert main(["verify", "--bundle", str(s1_bundle_file), "--samples", "0"]) == EXIT_USAGE
    assert main(["verify"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["verify", "--bundle", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_blocked_road_is_infeasible(tmp_path, capsys):
    # the only waypoint lies past the left-pass row while the start sits
    # in the lead's lane, so no family can ever reach it
    d = build_scenario_1().to_dict()
    d["obstacles"]["1"]["x"] = -15.0
    d["waypoints"]["initial"] = [
        {"state": [0, 0, 0, 0, -2.0, 15.0]},
        {"state": [0, 0, 0, 0, 2.0, 20.0], "sides": [[0, "left"]]},
    ]
    d["planner"]["max_families"] = 3
    scn = tmp_path / "blocked.json"
    scn.write_text(json.dumps(d))
    rc = main(["synthesize", "--scenario", str(scn), "--out", str(tmp_path / "b.json")])
    assert rc == EXIT_INFEASIBLE
    assert "segment 0" in capsys.readouterr().err


def test_hash_mismatch(s1_bundle_file, scenario_dir, tmp_path):
    rc = main(["run", "--scenario", str(scenario_dir / "scenario2.toml"), "--bundle", str(s1_bundle_file), "--out", str(tmp_path)])
    assert rc == EXIT_MISMATCH


def test_verify_fresh_bundle(s1_bundle_file):
    assert main(["verify", "--bundle", str(s1_bundle_file), "--samples", "200"]) == EXIT_OK


def test_verify_corrupted_bundle(s1_bundle_file, tmp_path, capsys):
    d = json.loads(s1_bundle_file.read_text())
    fam = next(f for f in d["families"] if len(f["chain"]) > 1)
    fam["chain"][-1]["shape"] = (2.0 * np.array(fam["chain"][-1]["shape"])).tolist()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    assert main(["verify", "--bundle", str(bad), "--samples", "200"]) == EXIT_VERIFY_FAILED
    assert f"({fam['index']}," in capsys.readouterr().err


def test_run_writes_artifacts(short_run):
    rc, out = short_run
    assert rc == EXIT_OK
    for name in ("trace.csv", "timing.csv", "summary.json"):
        assert (out / name).is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "completed" and summary["steps"] == 30
    assert list(out.glob("*.svg"))


def test_plot_only_mode_is_deterministic(short_run, tmp_path):
    _, out = short_run
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["plot", "--trace", str(out / "trace.csv"), "--out", str(a)]) == EXIT_OK
    assert main(["plot", "--trace", str(out / "trace.csv"), "--out", str(b)]) == EXIT_OK
    names = sorted(p.name for p in a.glob("*.svg"))
    assert names
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()


def test_plot_missing_trace(tmp_path):
    assert main(["plot", "--trace", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == EXIT_USAGE
