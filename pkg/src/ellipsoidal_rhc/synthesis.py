"""Offline synthesis of invariant ellipsoid chains.

Two determinant-maximization programs are solved with
:mod:`ellipsoidal_rhc.maxdet`:

* the terminal pair ``(K, E_0)``: ``E_0`` is robustly invariant under
  ``u = u_eq + K (x - x_eq)`` for every vertex and every disturbance;
* the backward step: the largest ``E_i ⊇ E_{i-1}`` from which a linear
  feedback ``K_i`` steers every vertex image into the disturbance-shrunk
  ``E_{i-1}``.

Both programs work in coordinates normalized by a scaling matrix so that
the solver sees quantities of order one. Disturbance shrinking uses the
parametric inner difference ``(1 - beta)(P - W / beta)`` with one fixed
``beta`` per family, which keeps the recursion feasible by induction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ellipsoid import (
    BoxSet,
    Ellipsoid,
    Halfspace,
    InfeasibleShrinkError,
    concentric_contains,
    inner_difference,
    membership_value,
    shrink_by_disturbance,
    shrink_factor,
    symmetrize,
)
from .maxdet import (
    InfeasibleLMIError,
    SolverStallError,
    block_from_map,
    find_feasible,
    maximize_logdet,
    sym_basis,
    sym_to_vec,
)

log = logging.getLogger(__name__)

#: Default grid of inner-difference parameters tried by the terminal program.
BETA_GRID = (0.005, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32)
#: Relative slack under which a state row is treated as active in a backward step.
ACTIVE_ROW_TOL = 1e-4
#: Smallest strict-feasibility margin (normalized coordinates) accepted from
#: phase I. Thinner feasible sets give no usable growth and stall phase II.
STRICT_MARGIN = 1e-8
#: Duality-gap target of phase II; log det is within this of the optimum.
GAP = 1e-4


class InfeasibleSynthesisError(ValueError):
    """No terminal pair exists for the given model and constraints.

    Attributes
    ----------
    vertex : int or None
        Vertex index of the tightest block, when it is a vertex block.
    row : str
        Label of the tightest constraint block.
    """

    def __init__(self, message: str, vertex=None, row: str = ""):
        super().__init__(message)
        self.vertex = vertex
        self.row = row


class InfeasibleStepError(ValueError):
    """The backward step cannot enlarge the target; the chain is saturated."""


@dataclass(frozen=True, eq=False)
class VertexModel:
    """Discrete-time polytopic model ``x+ = Phi_j x + G u + G_d d``.

    Parameters
    ----------
    phi : sequence of (n, n) arrays
        Vertex state matrices.
    g : (n, m) array
    gd : (n, n_d) array
    ts : float
        Sampling period in seconds.
    """

    phi: tuple
    g: np.ndarray
    gd: np.ndarray
    ts: float

    def __post_init__(self):
        phi = tuple(np.array(p, dtype=float) for p in self.phi)
        if not phi:
            raise ValueError("at least one vertex is required")
        n = phi[0].shape[0]
        if any(p.shape != (n, n) for p in phi):
            raise ValueError("vertex matrices must share one square shape")
        g = np.array(self.g, dtype=float).reshape(n, -1)
        gd = np.array(self.gd, dtype=float).reshape(n, -1)
        for arr in phi + (g, gd):
            arr.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "gd", gd)
        object.__setattr__(self, "ts", float(self.ts))

    @property
    def n(self) -> int:
        return self.phi[0].shape[0]

    @property
    def m(self) -> int:
        return self.g.shape[1]

    @property
    def phi_stack(self) -> np.ndarray:
        return np.stack(self.phi)

    def to_dict(self) -> dict:
        return {
            "phi": [p.tolist() for p in self.phi],
            "g": self.g.tolist(),
            "gd": self.gd.tolist(),
            "ts": self.ts,
        }

    @classmethod
    def from_dict(cls, record: dict) -> VertexModel:
        return cls(tuple(np.array(p) for p in record["phi"]), record["g"], record["gd"], record["ts"])


@dataclass(frozen=True, eq=False)
class SynthesisConstraints:
    """Equilibrium-relative constraints for one segment.

    Parameters
    ----------
    state_halfspaces : list of Halfspace
    input_box : BoxSet
        Input bounds shifted by ``u_eq``.
    disturbance_cover : Ellipsoid
        Zero-centered cover of ``G_d D``.
    """

    state_halfspaces: tuple
    input_box: BoxSet
    disturbance_cover: Ellipsoid

    def __post_init__(self):
        object.__setattr__(self, "state_halfspaces", tuple(self.state_halfspaces))
        for k, h in enumerate(self.state_halfspaces):
            if h.offset <= 0.0:
                raise ValueError(f"origin violates state row {k} (offset {h.offset:.4g})")
        lo, hi = self.input_box.lower, self.input_box.upper
        if np.any(lo >= 0.0) or np.any(hi <= 0.0):
            raise ValueError("origin must lie strictly inside the input box")

    @property
    def input_limits(self) -> np.ndarray:
        """Symmetric input half-widths used by the LMIs (conservative)."""
        return np.minimum(-self.input_box.lower, self.input_box.upper)

    def row_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.state_halfspaces:
            n = self.disturbance_cover.dim
            return np.zeros((0, n)), np.zeros(0)
        A = np.stack([h.normal for h in self.state_halfspaces])
        b = np.array([h.offset for h in self.state_halfspaces])
        return A, b


@dataclass(frozen=True, eq=False)
class FeedbackPair:
    """Terminal gain ``K`` and invariant ellipsoid ``E_0`` (equilibrium-relative)."""

    gain: np.ndarray
    terminal: Ellipsoid
    beta: float
    info: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class StepResult:
    """Output of :func:`backward_step`."""

    ellipsoid: Ellipsoid
    gain: np.ndarray
    info: dict = field(default_factory=dict)


def _scaling_from_rows(constraints: SynthesisConstraints, n: int) -> np.ndarray:
    """Per-coordinate scale from axis-aligned rows, 1 where unbounded."""
    scale = np.full(n, np.inf)
    for h in constraints.state_halfspaces:
        nz = np.flatnonzero(h.normal)
        if nz.size == 1:
            k = nz[0]
            scale[k] = min(scale[k], h.offset / abs(h.normal[k]))
    scale[~np.isfinite(scale)] = 1.0
    return scale


def _shrunk(target: Ellipsoid, cover: Ellipsoid, beta) -> Ellipsoid:
    if beta is None:
        return shrink_by_disturbance(target, cover)
    return inner_difference(target, cover, beta)


class _Problem:
    """LMI data for one program in normalized coordinates ``x = T xt``."""

    def __init__(self, model, constraints, T):
        self.n, self.m = model.n, model.m
        self.T = T
        self.Tinv = np.linalg.inv(T)
        self.ulim = constraints.input_limits
        self.Du = np.diag(self.ulim)
        self.phis = [self.Tinv @ p @ T for p in model.phi]
        self.G = self.Tinv @ model.g @ self.Du
        A, b = constraints.row_matrix()
        self.rows = A @ T
        self.b = b
        self.labels = [f"state row {k}" for k in range(len(b))]
        self.W = symmetrize(self.Tinv @ constraints.disturbance_cover.shape @ self.Tinv.T)

    def normalize(self, P):
        return symmetrize(self.Tinv @ P @ self.Tinv.T)

    def denormalize(self, Qt, Yt):
        Q = symmetrize(self.T @ Qt @ self.T.T)
        K = self.Du @ Yt @ np.linalg.inv(Qt) @ self.Tinv
        return Q, K


class _Vars:
    """``z -> (Q, Y)`` with ``Q = Q0 + N D N^T``, ``D`` symmetric."""

    def __init__(self, n, m, Q0, N):
        self.n, self.m = n, m
        self.Q0 = Q0
        self.N = N
        r = N.shape[1]
        self.basis = np.einsum("ia,kab,jb->kij", N, sym_basis(r), N)
        self.nq = self.basis.shape[0]
        self.nvar = self.nq + m * n

    def Q(self, z):
        return self.Q0 + np.tensordot(z[: self.nq], self.basis, 1)

    def Y(self, z):
        return z[self.nq :].reshape(self.m, self.n)


def _blocks(prob: _Problem, var: _Vars, target_fn, extra=(), skip_rows=None):
    blocks = []
    for j, Ph in enumerate(prob.phis):

        def vertex(z, Ph=Ph):
            Q, Y = var.Q(z), var.Y(z)
            M = Ph @ Q + prob.G @ Y
            return np.block([[Q, M.T], [M, target_fn(Q)]])

        blocks.append(block_from_map(vertex, var.nvar, f"vertex {j}"))
    for r in range(prob.m):

        def inp(z, r=r):
            Q, Y = var.Q(z), var.Y(z)
            y = Y[r][:, None]
            return np.block([[np.ones((1, 1)), y.T], [y, Q]])

        blocks.append(block_from_map(inp, var.nvar, f"input row {r}"))
    for k in range(prob.rows.shape[0]):
        if skip_rows is not None and skip_rows[k]:
            # held fixed by the growth parameterization
            continue
        a = prob.rows[k]
        b2 = prob.b[k] ** 2

        def row(z, a=a, b2=b2):
            return np.array([[b2 - a @ var.Q(z) @ a]])

        blocks.append(block_from_map(row, var.nvar, prob.labels[k]))
    blocks.extend(extra)
    return blocks


def _obj(var: _Vars):
    return block_from_map(var.Q, var.nvar, "objective")


def _solve(var, blocks, z0):
    z, _, info1 = find_feasible(blocks, z0, margin=STRICT_MARGIN)
    z, info2 = maximize_logdet(_obj(var), blocks, z, gap=GAP, max_newton=300)
    info = {
        "newton_steps": info1.newton_steps + info2.newton_steps,
        "phase1_margin": info1.phase1_margin,
        "objective": info2.objective,
    }
    return z, info


def _vertex_label_index(label: str):
    return int(label.split()[1]) if label.startswith("vertex") else None


def synthesize_terminal_pair(
    model: VertexModel,
    constraints: SynthesisConstraints,
    betas=BETA_GRID,
    scale=None,
    contraction: float = 1.0,
) -> FeedbackPair:
    """Robustly invariant ellipsoid and gain of maximal volume.

    For each ``beta`` in ``betas`` the program::

        max log det Q
        s.t. [[Q, (Phi_j Q + G Y)^T], [Phi_j Q + G Y, (1-b)(Q - W/b)]] >= 0
             [[u_r^2, e_r^T Y], [Y^T e_r, Q]] >= 0
             a_k^T Q a_k <= b_k^2

    is solved and the largest feasible ellipsoid is kept. ``K = Y Q^{-1}``.

    Parameters
    ----------
    scale : array_like, optional
        Diagonal coordinate scaling; defaults to the axis-aligned row bounds.

    Raises
    ------
    InfeasibleSynthesisError
        If no ``beta`` admits a feasible pair; carries the tightest block.
    """
    n, m = model.n, model.m
    T = np.diag(scale if scale is not None else _scaling_from_rows(constraints, n))
    prob = _Problem(model, constraints, T)
    var = _Vars(n, m, np.zeros((n, n)), np.eye(n))
    z0 = np.concatenate([sym_to_vec(0.01 * np.eye(n)), np.zeros(m * n)])
    best = None
    last_err = None
    for beta in betas:
        W = prob.W

        def target(Q, beta=beta, W=W):
            return contraction**2 * (1.0 - beta) * (Q - W / beta)

        blocks = _blocks(prob, var, target)
        try:
            z, info = _solve(var, blocks, z0)
        except InfeasibleLMIError as exc:
            last_err = (exc, blocks[exc.block].label if exc.block >= 0 else "")
            # margins shrink monotonically past the best beta; stop once a
            # feasible pair exists and the next beta fails
            if best is not None:
                break
            continue
        info["beta"] = beta
        if best is None or info["objective"] > best[2]["objective"]:
            best = (var.Q(z), var.Y(z), info)
    if best is None:
        exc, label = last_err
        raise InfeasibleSynthesisError(
            f"no invariant ellipsoid exists; tightest constraint: {label} "
            f"(phase-I margin {exc.margin:.3e})",
            vertex=_vertex_label_index(label),
            row=label,
        )
    Qt, Yt, info = best
    Q, K = prob.denormalize(Qt, Yt)
    E0 = Ellipsoid(np.zeros(n), Q)
    return FeedbackPair(K, E0, info["beta"], info)


def _active_rows(prob: _Problem, Pt: np.ndarray) -> np.ndarray:
    """Mask of rows whose slack on ``Pt`` is below ``ACTIVE_ROW_TOL``."""
    if prob.rows.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    used = np.einsum("ki,ij,kj->k", prob.rows, Pt, prob.rows)
    return used >= (1.0 - ACTIVE_ROW_TOL) * prob.b**2


def _complement(A: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of the rows of ``A``."""
    if A.shape[0] == 0:
        return np.eye(n)
    _, s, Vt = np.linalg.svd(A)
    rank = int(np.sum(s > 1e-9 * s[0]))
    return Vt[rank:].T


def backward_step(
    target: Ellipsoid,
    model: VertexModel,
    constraints: SynthesisConstraints,
    beta=None,
    gain_hint=None,
) -> StepResult:
    """One-step robust controllable ellipsoid around ``target``.

    Solves::

        max log det Q
        s.t. [[Q, (Phi_j Q + G Y)^T], [Phi_j Q + G Y, S]] >= 0   (all j)
             [[u_r^2, e_r^T Y], [Y^T e_r, Q]] >= 0
             a_k^T Q a_k <= b_k^2
             Q >= P_target

    where ``S`` is the shape of the disturbance-shrunk target: the
    parametric inner difference for ``beta`` in (0, 1), or the scalar
    shrink when ``beta`` is None. Rows already tight on the target are
    handled by restricting ``Q - P_target`` to their orthogonal complement,
    which keeps a strictly feasible interior.

    Raises
    ------
    InfeasibleShrinkError
        If the shrunk target is empty.
    InfeasibleStepError
        If the program has no strictly feasible point.
    SolverStallError
        If the Newton iteration cap is reached.
    """
    n, m = model.n, model.m
    if target.dim != n:
        raise ValueError("target dimension does not match the model")
    if np.any(target.center != 0.0):
        raise ValueError("target must be equilibrium-relative (zero center)")
    S = _shrunk(target, constraints.disturbance_cover, beta)
    L = target.chol
    prob = _Problem(model, constraints, L)
    St = prob.normalize(S.shape)
    Pt = np.eye(n)
    active = _active_rows(prob, Pt)
    N = _complement(prob.rows[active], n)
    if N.shape[1] == 0:
        raise InfeasibleStepError("every direction is pinned by active state rows")
    var = _Vars(n, m, Pt, N)
    nest = block_from_map(lambda z: N.T @ (var.Q(z) - Pt) @ N, var.nvar, "nesting")
    blocks = _blocks(prob, var, lambda Q: St, extra=(nest,), skip_rows=active)
    if gain_hint is not None:
        Yt = np.linalg.inv(prob.Du) @ np.asarray(gain_hint) @ L
    else:
        Yt = np.zeros((m, n))
    z0 = np.concatenate([np.zeros(var.nq), Yt.reshape(-1)])
    try:
        z, info = _solve(var, blocks, z0)
    except InfeasibleLMIError as exc:
        raise InfeasibleStepError(f"backward step infeasible: {exc}") from exc
    Q, K = prob.denormalize(var.Q(z), var.Y(z))
    info["beta"] = beta
    info["rho"] = shrink_factor(target, constraints.disturbance_cover)
    info["active_rows"] = int(n - N.shape[1])
    return StepResult(Ellipsoid(np.zeros(n), Q), K, info)


def vertex_images(model: VertexModel, e: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``Phi_j e + G v`` for every vertex, shape ``(J, n)`` or ``(S, J, n)``."""
    e = np.asarray(e, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.einsum("jab,...b->...ja", model.phi_stack, e) + (v @ model.g.T)[..., None, :]


def _grid_inputs(box: BoxSet, per_axis: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(box.lower, box.upper)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=1)


@dataclass
class VerifyReport:
    """Result of :func:`verify_one_step`."""

    samples: int
    feasible: int
    worst_margin: float
    rho: float
    beta: float | None
    witnesses: dict

    @property
    def fraction(self) -> float:
        return self.feasible / self.samples if self.samples else 1.0

    @property
    def passed(self) -> bool:
        return self.feasible == self.samples


def verify_one_step(
    outer: Ellipsoid,
    inner: Ellipsoid,
    model: VertexModel,
    constraints: SynthesisConstraints,
    samples: int,
    beta=None,
    gain=None,
    tol: float = 1e-6,
    seed: int = 0,
    grid: int = 41,
) -> VerifyReport:
    """Sample-based certificate of one-step robust controllability.

    Points are drawn uniformly in ``outer``. For each point an input in the
    input box is sought such that every vertex image lies in the shrunk
    ``inner`` with membership at most ``1 + tol``. Witnesses are tried in
    order: the recorded gain, the min-max solver, a dense input grid.
    Both ellipsoids are equilibrium-relative.
    """
    from .controller import minmax_input

    if np.max(np.abs(outer.center - inner.center)) > 1e-9:
        raise ValueError("outer and inner must be concentric")
    rho = shrink_factor(inner, constraints.disturbance_cover)
    witnesses = {"gain": 0, "minmax": 0, "grid": 0}
    if samples <= 0:
        return VerifyReport(0, 0, float("inf"), rho, beta, witnesses)
    try:
        S = _shrunk(inner.recentered(np.zeros(inner.dim)), constraints.disturbance_cover, beta)
    except InfeasibleShrinkError:
        return VerifyReport(samples, 0, -np.inf, rho, beta, witnesses)
    Hinv = S.inverse
    box = constraints.input_box
    rng = np.random.default_rng(seed)
    pts = outer.sample_interior(rng, samples) - outer.center

    def worst(e, v):
        img = vertex_images(model, e, v)
        return np.max(np.einsum("...ja,ab,...jb->...j", img, Hinv, img), axis=-1)

    vals = np.full(samples, np.inf)
    if gain is not None:
        v = pts @ np.asarray(gain).T
        inside = np.all((v >= box.lower - 1e-12) & (v <= box.upper + 1e-12), axis=1)
        vals = np.where(inside, worst(pts, v), np.inf)
        witnesses["gain"] = int(np.sum(vals <= 1.0 + tol))
    todo = np.flatnonzero(vals > 1.0 + tol)
    for k in todo:
        v, _ = minmax_input(model.phi_stack, model.g, Hinv, pts[k], box.lower, box.upper)
        val = float(worst(pts[k], v))
        if val < vals[k]:
            vals[k] = val
        if val <= 1.0 + tol:
            witnesses["minmax"] += 1
    todo = np.flatnonzero(vals > 1.0 + tol)
    if todo.size:
        U = _grid_inputs(box, grid)
        for k in todo:
            img = np.einsum("jab,b->ja", model.phi_stack, pts[k])[None] + (U @ model.g.T)[:, None, :]
            w = np.max(np.einsum("uja,ab,ujb->uj", img, Hinv, img), axis=1)
            best = float(w.min())
            if best < vals[k]:
                vals[k] = best
            if best <= 1.0 + tol:
                witnesses["grid"] += 1
    feasible = int(np.sum(vals <= 1.0 + tol))
    return VerifyReport(samples, feasible, float(1.0 - vals.max()), rho, beta, witnesses)


def chain_nested(chain) -> bool:
    """``concentric_contains(E_{i-1}, E_i)`` for every consecutive pair."""
    return all(concentric_contains(a, b) for a, b in zip(chain[:-1], chain[1:]))


def rows_admissible(E: Ellipsoid, constraints: SynthesisConstraints, tol: float = 1e-8) -> bool:
    """``a^T P a <= b^2 + tol`` for every state row (zero-centered ``E``)."""
    return all(h.normal @ E.shape @ h.normal <= h.offset**2 + tol for h in constraints.state_halfspaces)


def grow_chain(
    pair: FeedbackPair,
    model: VertexModel,
    constraints: SynthesisConstraints,
    max_steps: int = 50,
    min_growth: float = 0.01,
    stop=None,
):
    """Backward recursion from ``pair.terminal`` until saturation.

    Stops when the volume growth of a step falls below ``min_growth``,
    after ``max_steps`` steps, when the step becomes infeasible or stalls,
    or when ``stop(E_i)`` returns True. The reason is recorded in
    ``infos[-1]["saturation"]``; a stall is also logged as a warning.

    Returns
    -------
    chain : list of Ellipsoid
    gains : list of ndarray
        ``gains[0]`` is the terminal gain, ``gains[i]`` the step gain of ``E_i``.
    infos : list of dict
    """
    chain = [pair.terminal]
    gains = [np.asarray(pair.gain)]
    infos = [dict(pair.info)]
    reason = "max-steps"
    while len(chain) <= max_steps:
        if stop is not None and stop(chain[-1]):
            reason = "covered"
            break
        try:
            res = backward_step(chain[-1], model, constraints, beta=pair.beta, gain_hint=gains[-1])
        except (InfeasibleStepError, InfeasibleShrinkError) as exc:
            log.debug("chain saturated: %s", exc)
            reason = "infeasible"
            break
        except SolverStallError as exc:
            log.warning("chain ended by solver stall at step %d: %s", len(chain), exc)
            reason = "solver-stall"
            break
        growth = np.exp(res.ellipsoid.log_volume() - chain[-1].log_volume()) - 1.0
        res.info["growth"] = float(growth)
        chain.append(res.ellipsoid)
        gains.append(res.gain)
        infos.append(res.info)
        if growth < min_growth:
            reason = "growth"
            break
    infos[-1]["saturation"] = reason
    return chain, gains, infos


__all__ = [
    "BETA_GRID",
    "FeedbackPair",
    "InfeasibleStepError",
    "InfeasibleSynthesisError",
    "SolverStallError",
    "StepResult",
    "SynthesisConstraints",
    "VerifyReport",
    "VertexModel",
    "backward_step",
    "chain_nested",
    "grow_chain",
    "membership_value",
    "rows_admissible",
    "synthesize_terminal_pair",
    "verify_one_step",
    "vertex_images",
]
