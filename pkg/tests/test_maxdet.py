import numpy as np
import pytest

from ellipsoidal_rhc.maxdet import (
    InfeasibleLMIError,
    block_from_map,
    find_feasible,
    maximize_logdet,
    sym_basis,
    sym_to_vec,
    vec_to_sym,
)

cp = pytest.importorskip("cvxpy")


def _q_of(n):
    basis = sym_basis(n)
    return lambda z: np.einsum("k,kab->ab", z[: basis.shape[0]], basis)


def _solve_ours(n, blocks_of, z0):
    Q = _q_of(n)
    nvar = n * (n + 1) // 2
    blocks = [block_from_map(Q, nvar, "Q")] + [block_from_map(f, nvar, lbl) for lbl, f in blocks_of(Q)]
    z, _, _ = find_feasible(blocks, z0)
    z, info = maximize_logdet(block_from_map(Q, nvar, "obj"), blocks, z, gap=1e-8)
    return Q(z), info


def test_sym_vec_round_trip():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4))
    S = A + A.T
    np.testing.assert_array_equal(vec_to_sym(sym_to_vec(S), 4), S)


def test_inscribed_ellipsoid_in_polygon_matches_cvxpy():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((7, 2))
    b = rng.uniform(0.5, 2.0, 7)

    def rows(Q):
        return [(f"row {k}", lambda z, k=k: np.array([[b[k] ** 2 - A[k] @ Q(z) @ A[k]]])) for k in range(7)]

    Qo, _ = _solve_ours(2, rows, np.array([1e-3, 0.0, 1e-3]))

    X = cp.Variable((2, 2), PSD=True)
    cons = [cp.quad_form(A[k], X) <= b[k] ** 2 for k in range(7)]
    cp.Problem(cp.Maximize(cp.log_det(X)), cons).solve(solver=cp.CLARABEL)
    assert np.linalg.slogdet(Qo)[1] == pytest.approx(np.linalg.slogdet(X.value)[1], abs=1e-5)
    np.testing.assert_allclose(Qo, X.value, atol=1e-4)


def test_invariant_ellipsoid_schur_block_matches_cvxpy():
    # largest Q with A Q A^T <= S and Q <= box rows, written as a Schur block
    Am = np.array([[0.9, 0.3], [-0.2, 0.8]])
    S = np.diag([2.0, 1.0])

    def blocks(Q):
        def schur(z):
            q = Q(z)
            return np.block([[q, (Am @ q).T], [Am @ q, S]])

        return [("schur", schur), ("row", lambda z: np.array([[1.5 - Q(z)[0, 0]]]))]

    Qo, _ = _solve_ours(2, blocks, np.array([1e-3, 0.0, 1e-3]))

    X = cp.Variable((2, 2), symmetric=True)
    cons = [cp.bmat([[X, (Am @ X).T], [Am @ X, S]]) >> 0, X[0, 0] <= 1.5]
    cp.Problem(cp.Maximize(cp.log_det(X)), cons).solve(solver=cp.CLARABEL)
    assert np.linalg.slogdet(Qo)[1] == pytest.approx(np.linalg.slogdet(X.value)[1], abs=1e-5)


def test_infeasible_lmi_names_block():
    # z >= 1 and z <= 0 cannot both hold; phase I optimum is s = 0.5
    blocks = [
        block_from_map(lambda z: np.array([[z[0] - 1.0]]), 1, "lower"),
        block_from_map(lambda z: np.array([[-z[0]]]), 1, "upper"),
    ]
    with pytest.raises(InfeasibleLMIError) as err:
        find_feasible(blocks, np.zeros(1))
    assert err.value.block in (0, 1)
    assert err.value.margin < 0


def test_solver_is_deterministic():
    A = np.array([[1.0, 0.5], [0.0, 1.0], [1.0, -1.0]])
    b = np.array([1.0, 2.0, 1.5])

    def rows(Q):
        return [(f"row {k}", lambda z, k=k: np.array([[b[k] ** 2 - A[k] @ Q(z) @ A[k]]])) for k in range(3)]

    Q1, _ = _solve_ours(2, rows, np.array([1e-3, 0.0, 1e-3]))
    Q2, _ = _solve_ours(2, rows, np.array([1e-3, 0.0, 1e-3]))
    assert np.array_equal(Q1, Q2)
