"""Online set-membership controller.

Every sampling period the measured state is located in the path bundle:
the lexicographically smallest ``(s, i)`` with ``x`` in ``E_i^s`` wins,
which prefers the family closest to the goal and then the innermost
ellipsoid. Inside a terminal set the terminal gain is applied; elsewhere a
two-variable min-max problem steers every vertex image into the shrunk
next-inner ellipsoid. Without a covering ellipsoid the controller falls
back to lane keeping with cruise or safe-following speed control.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit
from .ellipsoid import BoxSet, Ellipsoid, InfeasibleShrinkError, inner_difference, shrink_by_disturbance

#: Tolerance of the certificate replay before an input is released.
REPLAY_TOL = 1e-8
#: Duality-gap target of the min-max barrier solver.
MINMAX_GAP = 1e-9


class InfeasibleOneStepError(RuntimeError):
    """No admissible input steers every vertex image into the target.

    Attributes
    ----------
    state : ndarray
        Measured state at the failure.
    location : tuple
        ``(s, i)`` that was being served.
    """

    def __init__(self, message: str, state=None, location=None):
        super().__init__(message)
        self.state = None if state is None else np.array(state, dtype=float)
        self.location = location


# ---------------------------------------------------------------- min-max kernel


@njit
def _quad_coeffs(A, G, H):
    """Coefficients of ``q_j(v) = (a_j + G_j v)^T H (a_j + G_j v)``.

    ``q_j(v) = c_j + 2 b_j^T v + v^T M_j v``.
    """
    J, n = A.shape
    m = G.shape[2]
    c = np.zeros(J)
    b = np.zeros((J, m))
    M = np.zeros((J, m, m))
    for j in range(J):
        Ha = np.zeros(n)
        for r in range(n):
            acc = 0.0
            for k in range(n):
                acc += H[r, k] * A[j, k]
            Ha[r] = acc
        acc = 0.0
        for r in range(n):
            acc += A[j, r] * Ha[r]
        c[j] = acc
        for p in range(m):
            acc = 0.0
            for r in range(n):
                acc += G[j, r, p] * Ha[r]
            b[j, p] = acc
            for q in range(m):
                acc = 0.0
                for r in range(n):
                    for k in range(n):
                        acc += G[j, r, p] * H[r, k] * G[j, k, q]
                M[j, p, q] = acc
    return c, b, M


@njit
def _quad_eval(c, b, M, v):
    J = c.size
    m = v.size
    out = np.empty(J)
    for j in range(J):
        acc = c[j]
        for p in range(m):
            acc += 2.0 * b[j, p] * v[p]
            for q in range(m):
                acc += v[p] * M[j, p, q] * v[q]
        out[j] = acc
    return out


@njit
def _barrier_value(c1, b1, M1, c2, b2, M2, use2, lo, hi, v, t, mu):
    q1 = _quad_eval(c1, b1, M1, v)
    total = mu * t
    for j in range(q1.size):
        f = t - q1[j]
        if f <= 0.0:
            return np.inf
        total -= np.log(f)
    if use2:
        q2 = _quad_eval(c2, b2, M2, v)
        for j in range(q2.size):
            f = 1.0 - q2[j]
            if f <= 0.0:
                return np.inf
            total -= np.log(f)
    for p in range(v.size):
        f1 = v[p] - lo[p]
        f2 = hi[p] - v[p]
        if f1 <= 0.0 or f2 <= 0.0:
            return np.inf
        total -= np.log(f1) + np.log(f2)
    return total


@njit
def _minmax_barrier(c1, b1, M1, c2, b2, M2, use2, lo, hi, v0, gap):
    """Minimize ``max_j q1_j(v)`` subject to ``q2_j(v) < 1`` and the box.

    Epigraph form in ``(v, t)`` solved by a log-barrier path-following
    Newton method. ``v0`` must be strictly feasible. Returns ``(v, t)``.
    """
    m = lo.size
    J1 = c1.size
    J2 = c2.size if use2 else 0
    ncons = J1 + J2 + 2 * m
    v = v0.copy()
    t = np.max(_quad_eval(c1, b1, M1, v)) + 1.0
    mu = 1.0
    z = np.zeros(m + 1)
    for _ in range(80):
        for _ in range(100):
            g = np.zeros(m + 1)
            H = np.zeros((m + 1, m + 1))
            g[m] = mu
            q1 = _quad_eval(c1, b1, M1, v)
            for j in range(J1):
                f = t - q1[j]
                df = np.zeros(m + 1)
                for p in range(m):
                    acc = b1[j, p]
                    for q in range(m):
                        acc += M1[j, p, q] * v[q]
                    df[p] = -2.0 * acc
                df[m] = 1.0
                for p in range(m + 1):
                    g[p] -= df[p] / f
                    for q in range(m + 1):
                        H[p, q] += df[p] * df[q] / (f * f)
                for p in range(m):
                    for q in range(m):
                        H[p, q] += 2.0 * M1[j, p, q] / f
            if use2:
                q2 = _quad_eval(c2, b2, M2, v)
                for j in range(J2):
                    f = 1.0 - q2[j]
                    df = np.zeros(m)
                    for p in range(m):
                        acc = b2[j, p]
                        for q in range(m):
                            acc += M2[j, p, q] * v[q]
                        df[p] = -2.0 * acc
                    for p in range(m):
                        g[p] -= df[p] / f
                        for q in range(m):
                            H[p, q] += df[p] * df[q] / (f * f) + 2.0 * M2[j, p, q] / f
            for p in range(m):
                f1 = v[p] - lo[p]
                f2 = hi[p] - v[p]
                g[p] += -1.0 / f1 + 1.0 / f2
                H[p, p] += 1.0 / (f1 * f1) + 1.0 / (f2 * f2)
            dz = -np.linalg.solve(H, g)
            dec = 0.0
            for p in range(m + 1):
                dec -= g[p] * dz[p]
            if dec <= 1e-12:
                break
            phi = _barrier_value(c1, b1, M1, c2, b2, M2, use2, lo, hi, v, t, mu)
            step = 1.0
            accepted = False
            while step > 1e-14:
                for p in range(m):
                    z[p] = v[p] + step * dz[p]
                z[m] = t + step * dz[m]
                phi_new = _barrier_value(c1, b1, M1, c2, b2, M2, use2, lo, hi, z[:m], z[m], mu)
                if phi_new <= phi - 0.25 * step * dec:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            for p in range(m):
                v[p] = z[p]
            t = z[m]
        if ncons / mu < gap:
            break
        mu *= 8.0
    return v, t


def _as_vertex_inputs(g, J: int) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.ndim == 2:
        g = np.broadcast_to(g, (J,) + g.shape)
    return np.ascontiguousarray(g)


def _interior_start(v, lo, hi, frac: float = 1e-3) -> np.ndarray:
    pad = frac * (hi - lo)
    return np.clip(np.asarray(v, dtype=float), lo + pad, hi - pad)


def minmax_input(phi_stack, g, Hinv, e, lo, hi, v0=None):
    """Input in the box minimizing ``max_j ||Phi_j e + G_j v||^2_Hinv``.

    Parameters
    ----------
    phi_stack : (J, n, n) array
    g : (n, m) or (J, n, m) array
        Input matrix, optionally vertex-indexed.
    Hinv : (n, n) array
        Inverse shape of the target ellipsoid.
    e : (n,) array
        Equilibrium-relative state.
    lo, hi : (m,) arrays
        Equilibrium-relative input box.

    Returns
    -------
    v : ndarray
    cost : float
        ``max_j`` of the quadratic forms at ``v``.
    """
    phi_stack = np.asarray(phi_stack, dtype=float)
    J = phi_stack.shape[0]
    G = _as_vertex_inputs(g, J)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    A = np.ascontiguousarray(phi_stack @ np.asarray(e, dtype=float))
    c, b, M = _quad_coeffs(A, G, np.ascontiguousarray(Hinv, dtype=float))
    start = _interior_start(0.5 * (lo + hi) if v0 is None else v0, lo, hi)
    v, _ = _minmax_barrier(c, b, M, c, b, M, False, lo, hi, start, MINMAX_GAP)
    return v, float(np.max(_quad_eval(c, b, M, v)))


def constrained_minmax(phi_stack, g, Hcost, Hcons, e, lo, hi, v0=None, cost_center=None):
    """``argmin_v max_j ||.||^2_Hcost`` with every image inside ``Hcons``.

    The cost measures images relative to ``cost_center`` (origin by
    default); the constraint is always centered at the origin.

    Phase one minimizes ``max_j ||.||^2_Hcons``. If that optimum exceeds 1
    the problem is infeasible and ``(v, inf, level)`` is returned; if it
    has no interior the phase-one input is kept.

    Returns
    -------
    v : ndarray
    cost : float
        Objective at ``v`` (``inf`` when infeasible).
    level : float
        ``max_j ||.||^2_Hcons`` at ``v``.
    """
    phi_stack = np.asarray(phi_stack, dtype=float)
    J = phi_stack.shape[0]
    G = _as_vertex_inputs(g, J)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    A = np.ascontiguousarray(phi_stack @ np.asarray(e, dtype=float))
    c2, b2, M2 = _quad_coeffs(A, G, np.ascontiguousarray(Hcons, dtype=float))
    A1 = A if cost_center is None else np.ascontiguousarray(A - np.asarray(cost_center, dtype=float))
    c1, b1, M1 = _quad_coeffs(A1, G, np.ascontiguousarray(Hcost, dtype=float))
    start = _interior_start(0.5 * (lo + hi) if v0 is None else v0, lo, hi)
    v1, _ = _minmax_barrier(c2, b2, M2, c2, b2, M2, False, lo, hi, start, MINMAX_GAP)
    level = float(np.max(_quad_eval(c2, b2, M2, v1)))
    if level > 1.0:
        return v1, float("inf"), level
    if level > 1.0 - 1e-9:
        return v1, float(np.max(_quad_eval(c1, b1, M1, v1))), level
    v, _ = _minmax_barrier(c1, b1, M1, c2, b2, M2, True, lo, hi, v1, MINMAX_GAP)
    return v, float(np.max(_quad_eval(c1, b1, M1, v))), float(np.max(_quad_eval(c2, b2, M2, v)))


def warmup() -> None:
    """Compile (or load from cache) the kernels on a tiny problem so the
    first control period is not charged for it."""
    phi = np.stack([np.eye(2), 0.9 * np.eye(2)])
    g = np.eye(2)
    lo, hi = -np.ones(2), np.ones(2)
    minmax_input(phi, g, np.eye(2), np.ones(2), lo, hi)
    constrained_minmax(phi, g, np.eye(2), 0.25 * np.eye(2), np.ones(2), lo, hi)


# ---------------------------------------------------------------- decisions


class ControllerMode(enum.Enum):
    CRUISE = "cruise"
    SAFE_FOLLOW = "safe-follow"
    TRACK_PATH = "track-path"
    TERMINAL_HOLD = "terminal-hold"


@dataclass(frozen=True)
class ControlDecision:
    """Output of one controller step.

    ``s`` and ``i`` are -1 outside path modes. ``worst_membership`` is the
    largest predicted vertex-image membership in the shrunk target (NaN
    when no target applies).
    """

    u: np.ndarray
    s: int
    i: int
    mode: ControllerMode
    solve_ms: float
    worst_membership: float = float("nan")
    cost: float = float("nan")


@dataclass(frozen=True)
class ControllerSettings:
    """Fallback-mode gains.

    Parameters
    ----------
    follow_kd, follow_kv : float
        Safe-following gains on the gap error and the gap rate.
    d_safe : float
        Minimum following distance (m).
    cruise_kv : float
        Speed-hold gain toward ``v_bar`` (1/s).
    lane_gains : tuple of float
        Lane-keeping steering gains on lateral error, yaw and yaw rate.
    lane_centers : tuple of float
        Lane centers in the lateral road coordinate.
    handover : bool
        Steer from an intermediate terminal set toward the next family
        instead of applying the terminal gain.
    handover_level : float
        Membership level the handover images must reach in the shrunk
        terminal set (robustness margin).
    """

    follow_kd: float = 0.1
    follow_kv: float = 0.8
    d_safe: float = 12.0
    cruise_kv: float = 0.5
    lane_gains: tuple = (0.01, 0.25, 0.05)
    lane_centers: tuple = (-2.0, 2.0)
    handover: bool = True
    handover_level: float = 0.8


def safe_follow(x_rel: float, v_rel: float, settings: ControllerSettings | None = None, u_max: float = 2.0) -> float:
    """Safe-following acceleration ``k_d (|x_rel| - d_safe) + k_v v_rel``.

    ``v_rel`` is the rate of change of the gap ``|x_rel|``; negative when
    closing. The command is clipped to ``[-u_max, u_max]``.
    """
    st = settings or ControllerSettings()
    a = st.follow_kd * (abs(x_rel) - st.d_safe) + st.follow_kv * v_rel
    return float(np.clip(a, -u_max, u_max))


def terminal_law(x, family) -> np.ndarray:
    """``u_eq + K (x - x_eq)``."""
    return family.u_eq + np.asarray(family.gain) @ (np.asarray(x, dtype=float) - family.x_eq)


@dataclass
class OneStepResult:
    u: np.ndarray
    cost: float
    worst_membership: float
    witness: str


def replay_certificate(phi_stack, g, S: Ellipsoid, e, v, tol: float = REPLAY_TOL) -> float:
    """Largest vertex-image membership value in the equilibrium-relative ``S``."""
    phi_stack = np.asarray(phi_stack, dtype=float)
    G = _as_vertex_inputs(g, phi_stack.shape[0])
    img = phi_stack @ np.asarray(e, dtype=float) + G @ np.asarray(v, dtype=float)
    return float(np.max(np.einsum("ja,ab,jb->j", img, S.inverse, img)))


def shrunk_target(family, i: int, dcover: Ellipsoid) -> Ellipsoid:
    """Equilibrium-relative ``In[E_{i-1} - G_d D]`` with the family's rule."""
    target = family.relative(i - 1)
    if family.beta is None or not np.isfinite(family.beta):
        return shrink_by_disturbance(target, dcover)
    return inner_difference(target, dcover, family.beta)


def one_step_control(x, family, i: int, vm, dcover: Ellipsoid, input_box: BoxSet, cache=None) -> OneStepResult:
    """Min-max input steering every vertex image into shrunk ``E_{i-1}``.

    The cost is ``max_j ||Phi_j e + G_j v||^2`` in the shape norm of
    ``E_{i-1}``; the constraint keeps every image in the shrunk target.
    The solution is replayed against the shrunk target at ``1e-8`` before
    release; the synthesis gain ``K_i`` is the fallback witness.

    Raises
    ------
    InfeasibleOneStepError
        If neither the solver nor the certificate gain passes the replay.
    """
    if i < 1:
        raise ValueError("one-step control needs i >= 1")
    key = (family.index, i)
    if cache is not None and key in cache:
        S, Hcost = cache[key]
    else:
        try:
            S = shrunk_target(family, i, dcover)
        except InfeasibleShrinkError as exc:
            raise InfeasibleOneStepError(str(exc), x, key) from exc
        Hcost = family.relative(i - 1).inverse
        if cache is not None:
            cache[key] = (S, Hcost)
    e = np.asarray(x, dtype=float) - family.x_eq
    lo = input_box.lower - family.u_eq
    hi = input_box.upper - family.u_eq
    phi = vm.phi_stack
    v_gain = np.asarray(family.gains[i]) @ e
    v, cost, _ = constrained_minmax(phi, vm.g, Hcost, S.inverse, e, lo, hi, v0=v_gain)
    candidates = [(v, "minmax")]
    if not np.isfinite(cost):
        candidates = []
    candidates.append((v_gain, "gain"))
    for cand, name in candidates:
        if np.any(cand < lo - 1e-12) or np.any(cand > hi + 1e-12):
            continue
        worst = replay_certificate(phi, vm.g, S, e, cand)
        if worst <= 1.0 + REPLAY_TOL:
            img = phi @ e + vm.g @ cand
            c = float(np.max(np.einsum("ja,ab,jb->j", img, Hcost, img)))
            return OneStepResult(family.u_eq + cand, c, worst, name)
    raise InfeasibleOneStepError("no input passes the one-step certificate replay", x, key)


def handover_control(
    x, family, successor, vm, dcover: Ellipsoid, input_box: BoxSet, cache=None, level: float = 1.0
) -> OneStepResult:
    """Terminal-set input that keeps ``x`` in ``E_0`` and approaches ``successor``.

    Every vertex image must stay in the shrunk terminal set of ``family``
    (robust invariance is preserved); among such inputs the one minimizing
    the worst shape-norm distance to the centre of the successor's
    outermost ellipsoid is chosen. ``level < 1`` asks for images inside
    the shrunk set scaled by ``sqrt(level)``, a margin for plant-model
    mismatch. When that is infeasible the terminal gain is used; it keeps
    the set invariant and contracts toward the equilibrium, which restores
    the margin.
    """
    key = (family.index, "handover")
    if cache is not None and key in cache:
        S, Hcost, center = cache[key]
    else:
        try:
            S = shrunk_target(family, 1, dcover)
        except InfeasibleShrinkError:
            S = None
        outer = successor.chain[-1]
        Hcost, center = outer.inverse, outer.center - family.x_eq
        if cache is not None:
            cache[key] = (S, Hcost, center)
    e = np.asarray(x, dtype=float) - family.x_eq
    v_gain = np.asarray(family.gain) @ e
    if S is not None:
        lo = input_box.lower - family.u_eq
        hi = input_box.upper - family.u_eq
        v, cost, _ = constrained_minmax(
            vm.phi_stack, vm.g, Hcost, S.inverse / level, e, lo, hi, v0=v_gain, cost_center=center
        )
        if np.isfinite(cost) and np.all(v >= lo) and np.all(v <= hi):
            worst = replay_certificate(vm.phi_stack, vm.g, S, e, v)
            if worst <= 1.0 + REPLAY_TOL:
                return OneStepResult(family.u_eq + v, cost, worst, "handover")
    return OneStepResult(family.u_eq + v_gain, float("nan"), float("nan"), "gain")


# ---------------------------------------------------------------- localization


class PathIndex:
    """Stacked ellipsoids of a path for batched membership tests.

    Rows are ordered lexicographically by ``(s, i)``.
    """

    def __init__(self, fp):
        self.fp = fp
        keys, centers, inverses = [], [], []
        for fam in fp.families:
            for i, E in enumerate(fam.chain):
                keys.append((fam.index, i))
                centers.append(E.center)
                inverses.append(E.inverse)
        self.keys = keys
        self.centers = np.array(centers)
        self.inverses = np.array(inverses)

    def memberships(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.centers
        return np.einsum("ka,kab,kb->k", d, self.inverses, d)

    def locate(self, x):
        vals = self.memberships(x)
        hits = np.flatnonzero(vals <= 1.0)
        if hits.size == 0:
            return None
        return self.keys[int(hits[0])]


def locate(x, fp):
    """Lexicographically smallest ``(s, i)`` with ``x`` in ``E_i^s``, or None.

    Smaller ``s`` is closer to the goal, so the minimum encodes the most
    progress.
    """
    return PathIndex(fp).locate(x)


# ---------------------------------------------------------------- controller


@dataclass
class LeadMeasurement:
    """Gap to the in-lane lead: ``gap = |x_rel|`` and its rate (m, m/s)."""

    gap: float
    gap_rate: float


@dataclass
class Controller:
    """Mode dispatch around a path bundle.

    Parameters
    ----------
    vm : VertexModel
    input_box : BoxSet
        Absolute input bounds.
    dcover : Ellipsoid
        Disturbance cover used by the certificates.
    path : FullPath, optional
    """

    vm: object
    input_box: BoxSet
    dcover: Ellipsoid
    path: object = None
    settings: ControllerSettings = field(default_factory=ControllerSettings)

    def __post_init__(self):
        self._index = PathIndex(self.path) if self.path is not None else None
        self._cache = {}

    def set_path(self, fp) -> None:
        """Swap the active path (``None`` drops it)."""
        self.path = fp
        self._index = PathIndex(fp) if fp is not None else None
        self._cache = {}

    def _lane_keep(self, x) -> float:
        st = self.settings
        centers = np.asarray(st.lane_centers, dtype=float)
        yc = centers[np.argmin(np.abs(centers - x[4]))]
        ky, kpsi, kr = st.lane_gains
        delta = -ky * (x[4] - yc) - kpsi * x[2] - kr * x[3]
        return float(np.clip(delta, self.input_box.lower[0], self.input_box.upper[0]))

    def _fallback(self, x, lead: LeadMeasurement | None):
        lo, hi = self.input_box.lower[1], self.input_box.upper[1]
        cruise = float(np.clip(-self.settings.cruise_kv * x[0], lo, hi))
        if lead is None:
            return np.array([self._lane_keep(x), cruise]), ControllerMode.CRUISE
        a = safe_follow(lead.gap, lead.gap_rate, self.settings, hi)
        # following never speeds the ego up beyond cruise
        a = min(a, cruise)
        return np.array([self._lane_keep(x), a]), ControllerMode.SAFE_FOLLOW

    def step(self, x, lead: LeadMeasurement | None = None, clock=time.perf_counter) -> ControlDecision:
        """One sampling period.

        Raises
        ------
        InfeasibleOneStepError
            Fatal diagnostic; the synthesis certificate did not hold.
        """
        t0 = clock()
        x = np.asarray(x, dtype=float)
        hit = self._index.locate(x) if self._index is not None else None
        if hit is None:
            u, mode = self._fallback(x, lead)
            return ControlDecision(u, -1, -1, mode, 1e3 * (clock() - t0))
        s, i = hit
        fam = self.path.families[s]
        if i == 0:
            if s > 0 and self.settings.handover:
                res = handover_control(
                    x,
                    fam,
                    self.path.families[s - 1],
                    self.vm,
                    self.dcover,
                    self.input_box,
                    self._cache,
                    self.settings.handover_level,
                )
                u, worst, cost = res.u, res.worst_membership, res.cost
                mode = ControllerMode.TRACK_PATH
            else:
                u = terminal_law(x, fam)
                worst, cost = float("nan"), float("nan")
                mode = ControllerMode.TERMINAL_HOLD
        else:
            res = one_step_control(x, fam, i, self.vm, self.dcover, self.input_box, self._cache)
            u, worst, cost = res.u, res.worst_membership, res.cost
            mode = ControllerMode.TRACK_PATH
        excess = np.maximum(self.input_box.lower - u, u - self.input_box.upper)
        if np.any(excess > 1e-9):
            raise InfeasibleOneStepError(f"input {u} leaves the admissible box", x, (s, i))
        u = np.clip(u, self.input_box.lower, self.input_box.upper)
        return ControlDecision(u, s, i, mode, 1e3 * (clock() - t0), worst, cost)


__all__ = [
    "ControlDecision",
    "Controller",
    "ControllerMode",
    "ControllerSettings",
    "InfeasibleOneStepError",
    "LeadMeasurement",
    "OneStepResult",
    "PathIndex",
    "constrained_minmax",
    "handover_control",
    "locate",
    "minmax_input",
    "one_step_control",
    "replay_certificate",
    "safe_follow",
    "shrunk_target",
    "terminal_law",
    "warmup",
]
