import numpy as np
import pytest

from ellipsoidal_rhc.ellipsoid import (
    BoxSet,
    Ellipsoid,
    Halfspace,
    box_halfspaces,
    concentric_contains,
    cover_box_image,
    membership_value,
)
from ellipsoidal_rhc.harness import build_scenario_1, disturbance_cover, scenario_model
from ellipsoidal_rhc.planner import PlannerSettings, compute_equilibrium, segment_constraints
from ellipsoidal_rhc.synthesis import (
    InfeasibleSynthesisError,
    SynthesisConstraints,
    VertexModel,
    backward_step,
    chain_nested,
    grow_chain,
    rows_admissible,
    synthesize_terminal_pair,
    verify_one_step,
)

TS = 0.1


def double_integrator():
    phi = np.array([[1.0, TS], [0.0, 1.0]])
    g = np.array([[0.5 * TS**2], [TS]])
    return VertexModel((phi,), g, np.zeros((2, 1)), TS)


def di_constraints(rows=None):
    rows = box_halfspaces([-1.0, -1.0], [1.0, 1.0]) if rows is None else rows
    cover = cover_box_image(np.zeros((2, 1)), BoxSet.symmetric([0.0]))
    return SynthesisConstraints(rows, BoxSet.symmetric([1.0]), cover)


@pytest.fixture(scope="module")
def di_pair():
    # a terminal set touching every row leaves the recursion no room to
    # grow, so the terminal program runs on half-width rows
    return synthesize_terminal_pair(double_integrator(), di_constraints(box_halfspaces([-0.5, -0.5], [0.5, 0.5])))


@pytest.fixture(scope="module")
def di_step(di_pair):
    return backward_step(di_pair.terminal, double_integrator(), di_constraints(), beta=di_pair.beta)


# ---------------------------------------------------------------- terminal pair


def test_terminal_pair_invariance_by_simulation(di_pair):
    vm = double_integrator()
    K, E0 = di_pair.gain, di_pair.terminal
    rng = np.random.default_rng(0)
    x = E0.sample_interior(rng, 1000)
    for _ in range(50):
        u = x @ K.T
        assert np.all(np.abs(u) <= 1.0 + 1e-9)
        x = x @ vm.phi[0].T + u @ vm.g.T
        vals = np.einsum("ka,ab,kb->k", x, E0.inverse, x)
        assert np.all(vals <= 1.0 + 1e-9)


def test_terminal_pair_respects_state_rows(di_pair):
    assert rows_admissible(di_pair.terminal, di_constraints(box_halfspaces([-0.5, -0.5], [0.5, 0.5])))


def test_unstable_vertex_without_input_is_infeasible():
    vm = VertexModel((1.2 * np.eye(2),), np.zeros((2, 1)), np.zeros((2, 1)), TS)
    with pytest.raises(InfeasibleSynthesisError) as err:
        synthesize_terminal_pair(vm, di_constraints())
    assert err.value.row


def test_vehicle_lane_centre_terminal_set_fits_lane_slack():
    scn = build_scenario_1()
    vm = scenario_model(scn)
    cons = segment_constraints(scn.state_box, scn.input_box, disturbance_cover(scn, vm))
    x_eq, u_eq, _ = compute_equilibrium(scn.waypoints[-1], vm)
    st = PlannerSettings()
    tight = cons.relative(x_eq, u_eq, st.terminal_row_scale, st.terminal_input_scale)
    pair = synthesize_terminal_pair(vm, tight, betas=st.betas)
    # |x5 + 2| <= 1 around the right-lane centre
    assert pair.terminal.extents()[4] <= 1.0 + 1e-8
    rep = verify_one_step(pair.terminal, pair.terminal, vm, cons.relative(x_eq, u_eq), 300, beta=pair.beta, gain=pair.gain)
    assert rep.passed


# ---------------------------------------------------------------- backward step


def test_backward_step_grows(di_pair, di_step):
    E0, E1 = di_pair.terminal, di_step.ellipsoid
    assert concentric_contains(E0, E1)
    assert E1.log_volume() > E0.log_volume()


def test_backward_step_tangent_row_stays_tight(di_pair):
    E0 = di_pair.terminal
    a = np.array([1.0, 0.0])
    b = float(np.sqrt(a @ E0.shape @ a))
    rows = [Halfspace(a, b)] + box_halfspaces([-1.0, -1.0], [np.inf, 1.0])
    res = backward_step(E0, double_integrator(), di_constraints(rows), beta=di_pair.beta)
    assert a @ res.ellipsoid.shape @ a == pytest.approx(b**2, rel=1e-6)


def _grid_feasible(vm, S, pts, nu=81):
    """Brute-force one-step oracle: some grid input maps the point into S."""
    U = np.linspace(-1.0, 1.0, nu)
    img = pts @ vm.phi[0].T
    img = img[:, None, :] + U[None, :, None] * vm.g[:, 0][None, None, :]
    vals = np.einsum("kua,ab,kub->ku", img, S.inverse, img)
    return np.min(vals, axis=1) <= 1.0 + 1e-6


def test_backward_step_inside_grid_controllable_set(di_pair, di_step):
    vm = double_integrator()
    from ellipsoidal_rhc.synthesis import _shrunk

    S = _shrunk(di_pair.terminal, di_constraints().disturbance_cover, di_pair.beta)
    # exact one-step set on a 200 x 200 state grid
    g = np.linspace(-1.0, 1.0, 200)
    X, V = np.meshgrid(g, g, indexing="ij")
    grid = np.stack([X.ravel(), V.ravel()], axis=1)
    feasible = _grid_feasible(vm, S, grid)
    cell = (g[1] - g[0]) ** 2
    E1 = di_step.ellipsoid
    area_e1 = np.pi * np.sqrt(np.linalg.det(E1.shape))
    assert area_e1 <= feasible.sum() * cell * 1.05
    pts = E1.sample_interior(np.random.default_rng(1), 1000)
    assert np.all(_grid_feasible(vm, S, pts))


def test_verify_one_step_examples(di_pair, di_step):
    vm = double_integrator()
    cons = di_constraints()
    E0 = di_pair.terminal
    same = verify_one_step(E0, E0, vm, cons, 500, beta=di_pair.beta, gain=di_pair.gain)
    assert same.passed
    chain = verify_one_step(di_step.ellipsoid, E0, vm, cons, 1000, beta=di_pair.beta, gain=di_step.gain)
    assert chain.passed and chain.fraction == 1.0
    inflated = Ellipsoid(di_step.ellipsoid.center, 4.0 * di_step.ellipsoid.shape)
    bad = verify_one_step(inflated, E0, vm, cons, 1000, beta=di_pair.beta, gain=di_step.gain)
    assert bad.fraction < 1.0


def test_outer_equals_inner_without_recorded_gain(di_pair):
    # the input search alone (no recorded gain) certifies an invariant set
    rep = verify_one_step(di_pair.terminal, di_pair.terminal, double_integrator(), di_constraints(), 300, beta=di_pair.beta)
    assert rep.passed
    assert rep.witnesses["gain"] == 0


# ---------------------------------------------------------------- chains


def test_grow_chain_properties(di_pair):
    vm = double_integrator()
    cons = di_constraints()
    chain, gains, infos = grow_chain(di_pair, vm, cons, max_steps=8)
    assert len(chain) >= 3
    assert chain_nested(chain)
    assert all(rows_admissible(E, cons) for E in chain)
    rng = np.random.default_rng(2)
    for i in range(1, len(chain)):
        x = chain[i].sample_interior(rng, 1000)
        u = x @ gains[i].T
        assert np.all(np.abs(u) <= 1.0 + 1e-8)
        rep = verify_one_step(chain[i], chain[i - 1], vm, cons, 1000, beta=di_pair.beta, gain=gains[i])
        assert rep.passed
    assert infos[-1]["saturation"] in ("growth", "max-steps", "infeasible", "solver-stall")


def test_synthesis_is_deterministic(di_pair):
    again = synthesize_terminal_pair(double_integrator(), di_constraints(box_halfspaces([-0.5, -0.5], [0.5, 0.5])))
    assert np.array_equal(again.terminal.shape, di_pair.terminal.shape)
    assert np.array_equal(again.gain, di_pair.gain)


def test_vertex_model_round_trip():
    vm = double_integrator()
    back = VertexModel.from_dict(vm.to_dict())
    assert np.array_equal(back.phi_stack, vm.phi_stack) and np.array_equal(back.g, vm.g)


def test_constraints_reject_origin_outside():
    cover = cover_box_image(np.zeros((2, 1)), BoxSet.symmetric([0.0]))
    with pytest.raises(ValueError):
        SynthesisConstraints([Halfspace([1.0, 0.0], -0.1)], BoxSet.symmetric([1.0]), cover)
    with pytest.raises(ValueError):
        SynthesisConstraints([], BoxSet([0.0], [1.0]), cover)


def test_membership_of_gain_images(di_pair):
    # K x maps E_0 into itself at every sampled boundary point
    vm = double_integrator()
    E0 = di_pair.terminal
    pts = E0.sample_boundary(np.random.default_rng(4), 200)
    nxt = pts @ (vm.phi[0] + vm.g @ di_pair.gain).T
    assert max(membership_value(E0, p) for p in nxt) <= 1.0 + 1e-9
