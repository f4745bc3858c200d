import dataclasses
import json

import numpy as np
import pytest

from ellipsoidal_rhc.harness import (
    RadarReading,
    RunOptions,
    ScenarioError,
    Trace,
    World,
    build_scenario_1,
    build_scenario_2,
    constraint_margins,
    load_scenario,
    radar,
    read_trace_csv,
    rmse,
    run,
    scenario_from_dict,
    scenario_hash,
    timing_report,
)
from ellipsoidal_rhc.vehicle import Plant

# ---------------------------------------------------------------- builders


def test_scenario_1_builder():
    scn = build_scenario_1()
    assert scn.constraints.u_upper[0] == 0.5 and scn.constraints.u_lower[0] == -0.5
    assert scn.x0[5] == -50.0
    np.testing.assert_array_equal(scn.x0, [0, 0, 0, 0, -2, -50])
    np.testing.assert_array_equal(scn.goal, [0, 0, 0, 0, -2, 50])
    assert scn.constraints.x5 == (-3.0, 3.0)
    assert len(scn.lane_centers) == 2 and scn.lane_width == 4.0


def test_scenario_2_builder():
    scn = build_scenario_2()
    assert scn.constraints.x5 == (-5.0, 5.0)
    lead2 = scn.obstacles[1]
    assert lead2.profile[0][1] == 19.0 and lead2.profile[-1][1] == 20.0
    assert scn.goal[5] == 50.0
    np.testing.assert_array_equal(scn.x0, [0, 0, 0, 0, -4, -40])
    assert scn.contingency is not None


@pytest.mark.parametrize("name,builder", [("scenario1.toml", build_scenario_1), ("scenario2.toml", build_scenario_2)])
def test_scenario_files_match_builders(scenario_dir, name, builder):
    scn = load_scenario(scenario_dir / name)
    ref = builder()
    assert scn.to_dict() == ref.to_dict()
    assert scenario_hash(scn) == scenario_hash(ref)


def test_json_scenario_round_trip(tmp_path):
    scn = build_scenario_2()
    path = tmp_path / "s.json"
    path.write_text(json.dumps(scn.to_dict()))
    assert load_scenario(path).to_dict() == scn.to_dict()


def test_scenario_rejects_unknown_keys():
    d = build_scenario_1().to_dict()
    d["road"]["lanes"] = 2
    with pytest.raises(ScenarioError):
        scenario_from_dict(d)
    d = build_scenario_1().to_dict()
    d["weather"] = {}
    with pytest.raises(ScenarioError):
        scenario_from_dict(d)


def test_scenario_rejects_non_equilibrium_goal():
    d = build_scenario_1().to_dict()
    d["waypoints"]["initial"][-1]["state"][3] = 0.1
    with pytest.raises(ScenarioError):
        scenario_from_dict(d)


def test_scenario_rejects_bad_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[road\nlane_width = 4")
    with pytest.raises(ScenarioError):
        load_scenario(path)


def test_hash_tracks_synthesis_inputs():
    a = build_scenario_1()
    b = dataclasses.replace(a, duration=5.0)
    c = dataclasses.replace(a, constraints=dataclasses.replace(a.constraints, x5=(-2.5, 2.5)))
    assert scenario_hash(a) == scenario_hash(b)
    assert scenario_hash(a) != scenario_hash(c)


# ---------------------------------------------------------------- rmse and timing


def test_rmse_identical_is_zero():
    x = np.random.default_rng(0).standard_normal((50, 6))
    np.testing.assert_array_equal(rmse(x, x), np.zeros(6))


def test_rmse_constant_offset():
    ref = np.zeros((40, 6))
    x = ref.copy()
    x[:, 4] += 0.5
    out = rmse(x, ref)
    assert abs(out[4] - 0.5) <= 1e-12
    assert np.all(np.delete(out, 4) == 0.0)


def test_rmse_sinusoid():
    # a whole number of periods makes the discrete mean of sin^2 exactly 1/2
    T, A = 400, 1.7
    t = np.arange(T)
    x = np.zeros((T, 6))
    x[:, 0] = A * np.sin(2 * np.pi * 5 * t / T)
    assert abs(rmse(x, np.zeros((T, 6)))[0] - A / np.sqrt(2)) <= 1e-12


def test_rmse_length_mismatch():
    with pytest.raises(ValueError):
        rmse(np.zeros((3, 6)), np.zeros((4, 6)))


def test_timing_report_fixtures():
    assert timing_report([1.0, 2.0, 3.0])["mean_ms"] == 2.0
    rep = timing_report([0.0] * 10)
    assert rep["mean_ms"] == 0.0 and rep["p99_ms"] == 0.0
    assert timing_report([50.0], ts=0.1)["fraction_of_ts"] == pytest.approx(0.5)
    assert timing_report([])["steps"] == 0


# ---------------------------------------------------------------- world and radar


def test_radar_is_exact_world_difference():
    scn = build_scenario_1()
    world = World(scn)
    s = Plant().cruise_state(21.0, X=12.5, Y=-1.3)
    (rd,) = radar(scn, world, s, 0.0)
    assert rd.x_rel == pytest.approx(12.5 - 50.0, abs=1e-9)
    assert rd.y_rel == pytest.approx(-1.3 + 2.0, abs=1e-9)
    assert rd.v_rel == pytest.approx(1.0, abs=1e-9)
    assert rd.detected


def test_radar_noise_is_bounded_and_seeded():
    scn = build_scenario_1()
    world = World(scn)
    s = Plant().cruise_state(20.0, X=0.0, Y=-2.0)
    a = [radar(scn, world, s, 0.0, np.random.default_rng(5), noise=True)[0] for _ in range(2)]
    assert a[0] == a[1]
    assert abs(a[0].x_rel + 50.0) <= 1.5 and abs(a[0].y_rel) <= 0.2


def test_hidden_lead_and_trigger_ramp():
    scn = build_scenario_2()
    world = World(scn)
    assert not world.visible(1)
    world.advance(0.0, 1.0)
    assert world.X[1] == pytest.approx(70.0 + 19.0)
    world.update_triggers(1.0, ego_y=-0.5)
    assert world.visible(1)
    assert world.speed(1, 2.0) == pytest.approx(19.5)
    world.advance(1.0, 2.0)
    # trapezoid over the 19 -> 20 ramp
    assert world.X[1] == pytest.approx(89.0 + 39.0)


def test_separation_margin_only_binds_under_overlap():
    scn = build_scenario_1()
    u = np.zeros(2)
    x = np.array([0, 0, 0, 0, 2.0, 0.0])
    # max(|x_rel| - 12, |y_rel| - 1.8): 2.2 beside the lead, -1.8 behind it
    side = constraint_margins(scn, x, u, [RadarReading(-5.0, 4.0, 0.0, True)])
    behind = constraint_margins(scn, x, u, [RadarReading(-5.0, 0.0, 0.0, True)])
    assert side["m_sep1"] > 0 and behind["m_sep1"] == pytest.approx(-1.8)
    assert side["m_x5"] == pytest.approx(1.0)


# ---------------------------------------------------------------- traces


def test_zero_duration_gives_empty_trace():
    scn = dataclasses.replace(build_scenario_1(), duration=0.0)
    trace = run(scn, None, RunOptions())
    assert trace.rows == [] and trace.status == "completed"
    assert trace.states.shape == (0, 6)


def test_trace_csv_round_trip(tmp_path):
    tr = Trace("toy", 0.1, ("t", "a", "b"), rows=[[0.0, 1.0, float("nan")], [0.1, 2.5, 3.0]], modes=["cruise", "track-path"])
    tr.solve_ms = [1.0, 2.0]
    paths = tr.write(tmp_path)
    cols, modes, data = read_trace_csv(paths["trace"])
    assert cols == ("t", "a", "b") and modes == ["cruise", "track-path"]
    assert data[1, 1] == 2.5 and np.isnan(data[0, 2])


def test_scenario1_trace_radar_matches_world(s1_run):
    trace, _ = s1_run
    t = trace.column("t")
    X, Y = trace.column("X"), trace.column("Y")
    # the lead cruises at 20 m/s from X = 50 in the lane at Y = -2
    np.testing.assert_allclose(trace.column("ob1_xrel"), X - (50.0 + 20.0 * t), atol=1e-9, rtol=0)
    np.testing.assert_allclose(trace.column("ob1_yrel"), Y + 2.0, atol=1e-9, rtol=0)
    # without noise the control state carries the exact gap
    np.testing.assert_allclose(trace.column("x6"), trace.column("ob1_xrel"), atol=1e-9, rtol=0)


def test_scenario1_margins_nonnegative_in_path_modes(s1_run):
    trace, _ = s1_run
    assert trace.status == "completed"
    margins = [c for c in trace.columns if c.startswith("m_")]
    for row, mode in zip(trace.rows, trace.modes):
        vals = dict(zip(trace.columns, row))
        for c in margins:
            if mode in ("track-path", "terminal-hold") or c.startswith(("m_u", "m_sep")):
                assert vals[c] >= -1e-9, (c, vals["t"])
