import numpy as np
import pytest

from ellipsoidal_rhc.controller import (
    Controller,
    ControllerMode,
    ControllerSettings,
    LeadMeasurement,
    PathIndex,
    constrained_minmax,
    locate,
    minmax_input,
    one_step_control,
    replay_certificate,
    safe_follow,
    shrunk_target,
    terminal_law,
)
from ellipsoidal_rhc.ellipsoid import BoxSet, Ellipsoid, membership_value
from ellipsoidal_rhc.harness import RunOptions, disturbance_cover, run
from ellipsoidal_rhc.planner import FullPath, SegmentFamily
from ellipsoidal_rhc.synthesis import VertexModel
from ellipsoidal_rhc.vehicle import gamma_of_state, vertex_weights


def _family(index, center, radii, gain=None):
    center = np.asarray(center, dtype=float)
    n = center.size
    chain = tuple(Ellipsoid.ball(center, r) for r in radii)
    gains = tuple(np.zeros((1, n)) if gain is None else gain for _ in radii)
    return SegmentFamily(index, center, np.zeros(1), gains, chain, 0.1)


def _toy_path(families):
    vm = VertexModel((np.eye(2),), np.zeros((2, 1)), np.zeros((2, 1)), 0.1)
    return FullPath(tuple(families), (), (), vm, ())


# ---------------------------------------------------------------- safe following


def test_safe_follow_examples():
    assert safe_follow(12.0, 0.0) == 0.0
    assert safe_follow(-50.0, 0.0) == 2.0
    assert safe_follow(8.0, -5.0) == -2.0


def test_safe_follow_respects_custom_gain():
    st = ControllerSettings(follow_kd=0.05, follow_kv=0.0, d_safe=10.0)
    assert safe_follow(20.0, 3.0, st) == pytest.approx(0.5)


# ---------------------------------------------------------------- localization


def test_locate_goal_equilibrium():
    fp = _toy_path([_family(0, [0, 0], [1, 2]), _family(1, [5, 0], [1, 2, 3])])
    assert locate(np.zeros(2), fp) == (0, 0)


def test_locate_boundary_point_is_member():
    fp = _toy_path([_family(0, [0, 0], [1.0]), _family(1, [10, 0], [1.0])])
    assert locate([1.0, 0.0], fp) == (0, 0)
    assert locate([1.0 + 1e-9, 0.0], fp) is None


def test_locate_overlap_prefers_progress():
    fams = [
        _family(0, [0, 0], [1.0]),
        _family(1, [4, 0], [0.5, 1.5]),
        _family(2, [6, 0], [0.5, 1.0, 1.5, 3.0]),
    ]
    fp = _toy_path(fams)
    x = np.array([3.0, 0.0])  # inside E_1^1 and E_3^2, outside E_0^1
    assert locate(x, fp) == (1, 1)
    assert PathIndex(fp).locate(x) == (1, 1)
    assert np.all(np.isfinite(PathIndex(fp).memberships(x)))


# ---------------------------------------------------------------- terminal law


def test_terminal_law_at_equilibrium_and_degenerate_gain(s1):
    fam = s1.fp.families[0]
    np.testing.assert_array_equal(terminal_law(fam.x_eq, fam), fam.u_eq)
    flat = _family(0, [1.0, 2.0], [1.0])
    np.testing.assert_array_equal(terminal_law([1.5, 2.0], flat), flat.u_eq)


def test_terminal_law_boundary_inputs_admissible(s1):
    box = s1.scn.input_box
    rng = np.random.default_rng(0)
    for fam in s1.fp.families:
        pts = fam.chain[0].sample_boundary(rng, 1000)
        u = fam.u_eq + (pts - fam.x_eq) @ np.asarray(fam.gain).T
        assert np.all(u >= box.lower - 1e-9) and np.all(u <= box.upper + 1e-9)


# ---------------------------------------------------------------- one-step control


def test_one_step_at_equilibrium_has_zero_cost(s1):
    fam = next(f for f in s1.fp.families if f.depth >= 1)
    cov = disturbance_cover(s1.scn, s1.fp.model)
    res = one_step_control(fam.x_eq, fam, 1, s1.fp.model, cov, s1.scn.input_box)
    assert res.cost == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(res.u, fam.u_eq, atol=1e-9)


def test_one_step_requires_positive_index(s1):
    fam = s1.fp.families[0]
    cov = disturbance_cover(s1.scn, s1.fp.model)
    with pytest.raises(ValueError):
        one_step_control(fam.x_eq, fam, 0, s1.fp.model, cov, s1.scn.input_box)


def test_one_step_boundary_certificate_replay(s1):
    vm = s1.fp.model
    cov = disturbance_cover(s1.scn, vm)
    box = s1.scn.input_box
    rng = np.random.default_rng(1)
    for fam in s1.fp.families:
        if fam.depth < 1:
            continue
        i = fam.depth
        S = shrunk_target(fam, i, cov)
        for x in fam.chain[i].sample_boundary(rng, 20):
            res = one_step_control(x, fam, i, vm, cov, box)
            assert np.all(res.u >= box.lower) and np.all(res.u <= box.upper)
            worst = replay_certificate(vm.phi_stack, vm.g, S, x - fam.x_eq, res.u - fam.u_eq)
            assert worst <= 1.0 + 1e-8


def test_double_integrator_minmax_matches_grid():
    ts = 0.1
    phi = np.stack([np.array([[1.0, ts], [0.0, 1.0]]), np.array([[1.0, ts], [0.0, 0.9]])])
    g = np.array([[0.5 * ts**2], [ts]])
    H = np.diag([1.0, 4.0])
    rng = np.random.default_rng(2)
    U = np.linspace(-1.0, 1.0, 201 * 201)
    for e in rng.uniform(-1, 1, (20, 2)):
        v, cost = minmax_input(phi, g, H, e, [-1.0], [1.0])
        img = (phi @ e)[None] + U[:, None, None] * g[:, 0][None, None, :]
        grid = np.min(np.max(np.einsum("uja,ab,ujb->uj", img, H, img), axis=1))
        assert abs(cost - grid) <= 1e-3
        assert cost <= grid + 1e-9


def test_constrained_minmax_reports_infeasible():
    phi = np.stack([np.eye(2)])
    v, cost, level = constrained_minmax(phi, np.zeros((2, 1)), np.eye(2), np.eye(2), [2.0, 0.0], [-1.0], [1.0])
    assert cost == np.inf and level > 1.0


# ---------------------------------------------------------------- mode dispatch


def _controller(s1, path):
    vm = s1.fp.model
    return Controller(vm, s1.scn.input_box, disturbance_cover(s1.scn, vm), path)


def test_no_path_no_lead_is_cruise(s1):
    ctl = _controller(s1, None)
    # at a lane centre and at v_bar: no steering, no acceleration
    dec = ctl.step(np.array([0, 0, 0, 0, -2.0, 0]))
    assert dec.mode is ControllerMode.CRUISE
    np.testing.assert_array_equal(dec.u, [0.0, 0.0])
    assert dec.s == -1 and dec.i == -1


def test_pending_path_with_closing_lead_brakes(s1):
    ctl = _controller(s1, None)
    dec = ctl.step(np.array([1.0, 0, 0, 0, -2.0, -20.0]), LeadMeasurement(gap=20.0, gap_rate=-1.0))
    assert dec.mode is ControllerMode.SAFE_FOLLOW
    assert dec.u[1] <= 0.0


def test_start_is_tracked_and_index_falls(s1):
    ctl = _controller(s1, s1.fp)
    dec = ctl.step(s1.scn.x0)
    assert dec.mode is ControllerMode.TRACK_PATH
    assert dec.s == len(s1.fp.families) - 1
    fam = s1.fp.families[dec.s]
    # the start is the outermost family's own equilibrium, so the locator
    # lands in its terminal set and hands over to the next family
    if membership_value(fam.chain[0], s1.scn.x0) <= 1.0:
        assert dec.i == 0
    vm = s1.fp.model
    x = s1.scn.x0.copy()
    seen = [(dec.s, dec.i)]
    # each handover between neighbouring families takes about twenty steps
    for _ in range(60):
        _, rho, _ = gamma_of_state(x, s1.scn.vehicle, s1.scn.gamma_bounds)
        x = np.einsum("j,jab->ab", vertex_weights(rho), vm.phi_stack) @ x + vm.g @ dec.u
        dec = ctl.step(x)
        seen.append((dec.s, dec.i))
    assert seen[-1] < seen[0]
    assert all(b <= a for a, b in zip(seen, seen[1:]))


def test_index_strictly_decreases_without_disturbance(s1):
    trace = run(s1.scn, s1.fp, RunOptions(plant="model"))
    assert trace.status == "completed"
    s, i = trace.column("s"), trace.column("i")
    for k in range(1, len(s)):
        if s[k] == s[k - 1] and s[k] >= 0 and i[k - 1] >= 1:
            assert i[k] <= i[k - 1] - 1


def test_index_never_increases_under_worst_case_disturbance(s1):
    vm = s1.fp.model
    scn = s1.scn
    ctl = _controller(s1, s1.fp)
    rng = np.random.default_rng(3)
    corners = BoxSet(scn.synthesis.disturbance_lower, scn.synthesis.disturbance_upper).corners()
    x = scn.x0.copy()
    prev = None
    for _ in range(250):
        dec = ctl.step(x)
        assert dec.s >= 0
        if prev is not None and prev[0] == dec.s:
            assert dec.i <= prev[1]
        prev = (dec.s, dec.i)
        _, rho, _ = gamma_of_state(x, scn.vehicle, scn.gamma_bounds)
        phi = np.einsum("j,jab->ab", vertex_weights(rho), vm.phi_stack)
        d = corners[rng.integers(len(corners))]
        x = phi @ x + vm.g @ dec.u + vm.gd @ d
