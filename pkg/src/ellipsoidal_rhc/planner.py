"""Waypoint-to-waypoint segment synthesis and full-path stitching.

A segment between two waypoints is covered by one or more families. Each
family holds an equilibrium, a terminal pair and a nested chain grown
backward until the start waypoint is a member. When a chain saturates
first, a new equilibrium is picked inside the last ellipsoid and the
process repeats from there.

Families are numbered backward from the goal: ``s = 0`` is the goal
family, larger ``s`` is farther from the goal.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ellipsoid import (
    BoxSet,
    Ellipsoid,
    Halfspace,
    membership_value,
    project_point,
    slice_ellipsoid,
)
from .synthesis import (
    InfeasibleSynthesisError,
    SynthesisConstraints,
    VertexModel,
    chain_nested,
    grow_chain,
    rows_admissible,
    synthesize_terminal_pair,
    verify_one_step,
)

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "ellipsoidal-rhc-path/1"
#: Coordinates that may vary along an equilibrium manifold (lateral and
#: longitudinal position).
EQUILIBRIUM_COORDS = (4, 5)
SIDES = ("left", "right", "behind", "ahead", "none")


class LargeResidualError(ValueError):
    """The waypoint is not an equilibrium of the polytopic model."""


class StallError(RuntimeError):
    """Re-centering made no progress; the waypoint is unreachable.

    Attributes
    ----------
    segment : int or None
        Index of the failing waypoint pair, when known.
    """

    def __init__(self, message: str, segment=None):
        super().__init__(message)
        self.segment = segment


class NoContainingEllipsoidError(RuntimeError):
    """The current state is not covered by the re-planned path.

    Attributes
    ----------
    path : FullPath or None
        The synthesized path when synthesis succeeded but the state is not
        yet covered; a caller may hold it until the state enters it.
    """

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


@dataclass(frozen=True)
class ObstacleBox:
    """Rectangular keep-out region of one lead vehicle.

    Positions are in the control frame: ``x_rel`` along the road relative
    to the tracked lead, ``y_rel`` the lateral road coordinate. Half-sizes
    are recomputed from their components.

    Parameters
    ----------
    profile : tuple of (time, speed) pairs
        Speed schedule, linear between breakpoints and constant outside.
    """

    x_rel: float
    y_rel: float
    l_ego: float = 4.5
    l_lead: float = 4.5
    eps_x: float = 1.5
    w_ego: float = 1.8
    w_lead: float = 1.8
    eps_y: float = 0.2
    profile: tuple = ((0.0, 20.0),)

    def __post_init__(self):
        for name in ("l_ego", "l_lead", "eps_x", "w_ego", "w_lead", "eps_y"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        prof = tuple((float(t), float(v)) for t, v in self.profile)
        if not prof:
            raise ValueError("speed profile needs at least one breakpoint")
        if any(b[0] <= a[0] for a, b in zip(prof[:-1], prof[1:])):
            raise ValueError("speed profile times must increase")
        object.__setattr__(self, "profile", prof)

    @property
    def delta_x(self) -> float:
        return 0.5 * (self.l_ego + self.l_lead) + self.eps_x

    @property
    def delta_y(self) -> float:
        return 0.5 * (self.w_ego + self.w_lead) + self.eps_y

    def speed_at(self, t: float) -> float:
        ts = [p[0] for p in self.profile]
        vs = [p[1] for p in self.profile]
        return float(np.interp(t, ts, vs))

    def contains(self, y, xrel) -> bool:
        """True if the ego reference point ``(y, xrel)`` is inside the box."""
        return abs(y - self.y_rel) < self.delta_y and abs(xrel - self.x_rel) < self.delta_x

    def moved(self, x_rel: float) -> ObstacleBox:
        return ObstacleBox(
            x_rel, self.y_rel, self.l_ego, self.l_lead, self.eps_x, self.w_ego, self.w_lead, self.eps_y, self.profile
        )

    def to_dict(self) -> dict:
        return {
            "x_rel": self.x_rel,
            "y_rel": self.y_rel,
            "l_ego": self.l_ego,
            "l_lead": self.l_lead,
            "eps_x": self.eps_x,
            "w_ego": self.w_ego,
            "w_lead": self.w_lead,
            "eps_y": self.eps_y,
            "profile": [list(p) for p in self.profile],
        }

    @classmethod
    def from_dict(cls, record: dict) -> ObstacleBox:
        rec = dict(record)
        rec["profile"] = tuple(tuple(p) for p in rec.get("profile", ((0.0, 20.0),)))
        return cls(**rec)


@dataclass(frozen=True)
class Waypoint:
    """Full control-state target with passing-side annotations.

    Parameters
    ----------
    state : array_like, shape (6,)
    sides : tuple of (obstacle index, side)
        Side is one of ``left``, ``right``, ``behind``, ``ahead``, ``none``.
        The annotations of a waypoint constrain the segment that ends at it.
    margin : float
        Extra longitudinal clearance added to ``behind``/``ahead`` rows.
    """

    state: np.ndarray
    sides: tuple = ()
    margin: float = 0.0

    def __post_init__(self):
        x = np.array(self.state, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise ValueError("waypoint state must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "state", x)
        sides = tuple((int(k), str(s)) for k, s in self.sides)
        for _, s in sides:
            if s not in SIDES:
                raise ValueError(f"unknown passing side {s!r}")
        object.__setattr__(self, "sides", sides)

    def to_dict(self) -> dict:
        return {"state": self.state.tolist(), "sides": [list(p) for p in self.sides], "margin": self.margin}

    @classmethod
    def from_dict(cls, record: dict) -> Waypoint:
        return cls(record["state"], tuple(tuple(p) for p in record.get("sides", ())), record.get("margin", 0.0))


def obstacle_free_halfspaces(ob: ObstacleBox, side: str, n: int = 6, margin: float = 0.0) -> list[Halfspace]:
    """One separating halfspace for passing ``ob`` on ``side``.

    ``left``: ``x5 >= y + delta_y``; ``right``: ``x5 <= y - delta_y``;
    ``behind``: ``x6 <= x - delta_x - margin``; ``ahead``:
    ``x6 >= x + delta_x + margin``; ``none``: no row.
    """
    if side == "none":
        return []
    if side == "left":
        return [Halfspace.lower(n, 4, ob.y_rel + ob.delta_y)]
    if side == "right":
        return [Halfspace.upper(n, 4, ob.y_rel - ob.delta_y)]
    if side == "behind":
        return [Halfspace.upper(n, 5, ob.x_rel - ob.delta_x - margin)]
    if side == "ahead":
        return [Halfspace.lower(n, 5, ob.x_rel + ob.delta_x + margin)]
    raise ValueError(f"unknown passing side {side!r}")


@dataclass(frozen=True, eq=False)
class SegmentConstraints:
    """Absolute constraints of one segment.

    Parameters
    ----------
    state_halfspaces : tuple of Halfspace
        State box plus obstacle rows, in absolute control coordinates.
    input_box : BoxSet
        Absolute input bounds.
    disturbance_cover : Ellipsoid
        Zero-centered cover of ``G_d D``.
    """

    state_halfspaces: tuple
    input_box: BoxSet
    disturbance_cover: Ellipsoid

    def __post_init__(self):
        object.__setattr__(self, "state_halfspaces", tuple(self.state_halfspaces))

    def relative(self, x_eq, u_eq, row_scale=None, input_scale=None) -> SynthesisConstraints:
        """Equilibrium-relative constraints, optionally tightened.

        ``row_scale[k]`` multiplies the slack of axis-aligned rows on
        coordinate ``k``; ``input_scale`` multiplies the input slack.
        """
        rows = []
        for h in self.state_halfspaces:
            r = h.shifted(x_eq)
            if row_scale is not None:
                nz = np.flatnonzero(h.normal)
                if nz.size == 1:
                    r = Halfspace(r.normal, r.offset * float(row_scale[nz[0]]))
            rows.append(r)
        box = self.input_box.shifted(-np.asarray(u_eq, dtype=float))
        if input_scale is not None:
            s = np.asarray(input_scale, dtype=float)
            box = BoxSet(box.lower * s, box.upper * s)
        return SynthesisConstraints(rows, box, self.disturbance_cover)

    def admits(self, x, tol: float = 0.0) -> bool:
        return all(h.contains(x, tol) for h in self.state_halfspaces)


def segment_constraints(
    state_box: BoxSet,
    input_box: BoxSet,
    disturbance_cover: Ellipsoid,
    obstacles=(),
    target: Waypoint | None = None,
) -> SegmentConstraints:
    """State box rows plus the obstacle rows named by ``target.sides``."""
    from .ellipsoid import box_halfspaces

    rows = list(box_halfspaces(state_box.lower, state_box.upper))
    if target is not None:
        for k, side in target.sides:
            rows.extend(obstacle_free_halfspaces(obstacles[k], side, state_box.dim, target.margin))
    return SegmentConstraints(tuple(rows), input_box, disturbance_cover)


@dataclass(frozen=True)
class PlannerSettings:
    """Knobs of the segment synthesis.

    Parameters
    ----------
    betas : tuple of float
        Inner-difference parameters tried by the terminal program.
    terminal_row_scale : tuple of float
        Per-coordinate slack factors for the terminal program only. A
        terminal set that already touches a row leaves the backward
        recursion no room to grow along it.
    terminal_input_scale : tuple of float
    recenter : float
        New equilibria are projected onto the last ellipsoid scaled by
        this factor, so they sit strictly inside it.
    member_level : float
        Loop guard: the start waypoint counts as covered once its
        membership value is at most this level.
    max_steps, min_growth : chain saturation rule.
    max_families : int
        Cap per segment.
    stall_step : float
        Minimum re-centering step in scaled coordinates.
    """

    betas: tuple = (0.005, 0.01, 0.02, 0.04)
    terminal_row_scale: tuple = (0.6, 1.0, 1.0, 1.0, 1.0, 1.0)
    terminal_input_scale: tuple = (1.0, 0.6)
    contraction: float = 1.0
    recenter: float = 0.9
    member_level: float = 0.81
    max_steps: int = 50
    min_growth: float = 0.01
    max_families: int = 40
    stall_step: float = 1e-3

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, record: dict) -> PlannerSettings:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in record.items()})


@dataclass(frozen=True, eq=False)
class SegmentFamily:
    """One equilibrium, its terminal gain and the nested chain.

    ``chain[i]`` is ``E_i`` in absolute coordinates (centered at ``x_eq``);
    ``gains[0]`` is the terminal gain and ``gains[i]`` the step gain that
    certifies ``E_i -> E_{i-1}``.
    """

    index: int
    x_eq: np.ndarray
    u_eq: np.ndarray
    gains: tuple
    chain: tuple
    beta: float
    segment: int = 0
    info: dict = field(default_factory=dict)

    @property
    def gain(self) -> np.ndarray:
        return self.gains[0]

    @property
    def depth(self) -> int:
        """Chain length ``N`` (index of the outermost ellipsoid)."""
        return len(self.chain) - 1

    def relative(self, i: int) -> Ellipsoid:
        return self.chain[i].recentered(np.zeros(self.x_eq.size))

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "segment": self.segment,
            "x_eq": self.x_eq.tolist(),
            "u_eq": self.u_eq.tolist(),
            "beta": self.beta,
            "gains": [np.asarray(k).tolist() for k in self.gains],
            "chain": [E.to_dict() for E in self.chain],
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, record: dict) -> SegmentFamily:
        return cls(
            int(record["index"]),
            np.array(record["x_eq"], dtype=float),
            np.array(record["u_eq"], dtype=float),
            tuple(np.array(k, dtype=float) for k in record["gains"]),
            tuple(Ellipsoid.from_dict(E) for E in record["chain"]),
            float(record["beta"]),
            int(record.get("segment", 0)),
            dict(record.get("info", {})),
        )


@dataclass(frozen=True, eq=False)
class FullPath:
    """Families of a full path, stored goal first (``families[s]``).

    Parameters
    ----------
    families : tuple of SegmentFamily
        ``families[s].index == s``; ``s = 0`` is the goal family.
    waypoints : tuple of Waypoint
        Start first.
    obstacles : tuple of ObstacleBox
        Snapshot used at synthesis time.
    model : VertexModel
    constraints : tuple of SegmentConstraints
        One per waypoint pair, start first.
    meta : dict
        Provenance; ``meta["scenario_hash"]`` ties the bundle to a scenario.
    """

    families: tuple
    waypoints: tuple
    obstacles: tuple
    model: VertexModel
    constraints: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for s, fam in enumerate(self.families):
            if fam.index != s:
                raise ValueError("families must be numbered 0..S-1 from the goal")

    @property
    def traversal(self) -> tuple:
        """Families in start-to-goal order."""
        return tuple(reversed(self.families))

    def constraints_of(self, fam: SegmentFamily) -> SegmentConstraints:
        return self.constraints[fam.segment]

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "meta": self.meta,
            "model": self.model.to_dict(),
            "waypoints": [w.to_dict() for w in self.waypoints],
            "obstacles": [o.to_dict() for o in self.obstacles],
            "constraints": [
                {
                    "state_halfspaces": [h.to_dict() for h in c.state_halfspaces],
                    "input_box": c.input_box.to_dict(),
                    "disturbance_cover": c.disturbance_cover.to_dict(),
                }
                for c in self.constraints
            ],
            "families": [f.to_dict() for f in self.families],
        }

    @classmethod
    def from_dict(cls, record: dict) -> FullPath:
        if record.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"unsupported bundle format {record.get('format')!r}")
        cons = tuple(
            SegmentConstraints(
                tuple(Halfspace.from_dict(h) for h in c["state_halfspaces"]),
                BoxSet.from_dict(c["input_box"]),
                Ellipsoid.from_dict(c["disturbance_cover"]),
            )
            for c in record["constraints"]
        )
        return cls(
            tuple(SegmentFamily.from_dict(f) for f in record["families"]),
            tuple(Waypoint.from_dict(w) for w in record["waypoints"]),
            tuple(ObstacleBox.from_dict(o) for o in record["obstacles"]),
            VertexModel.from_dict(record["model"]),
            cons,
            dict(record.get("meta", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> FullPath:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON form of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def compute_equilibrium(target: Waypoint, vm: VertexModel, tol: float = 1e-6):
    """Input holding ``target`` fixed for every vertex.

    Solves ``(Phi_j - I) x + G u = 0`` for all ``j`` jointly in least
    squares, which is the fixed-point condition for any scheduling value.

    Returns
    -------
    x_eq, u_eq : ndarray
    residual : float

    Raises
    ------
    LargeResidualError
        If the residual exceeds ``tol``.
    """
    x = target.state if isinstance(target, Waypoint) else np.asarray(target, dtype=float)
    rhs = np.concatenate([-(p - np.eye(vm.n)) @ x for p in vm.phi])
    G = np.concatenate([vm.g] * len(vm.phi))
    u, *_ = np.linalg.lstsq(G, rhs, rcond=None)
    u[np.abs(u) < 1e-15] = 0.0
    residual = float(np.max(np.abs(G @ u - rhs)))
    if residual > tol:
        raise LargeResidualError(f"waypoint is not an equilibrium (residual {residual:.3e})")
    return x.copy(), u, residual


def _recenter_target(E: Ellipsoid, start, factor: float) -> np.ndarray:
    """Point of the equilibrium slice of ``factor * E`` closest to ``start``."""
    keep = list(EQUILIBRIUM_COORDS)
    sl = slice_ellipsoid(E, keep).scaled(factor)
    y = project_point(sl, np.asarray(start, dtype=float)[keep])
    out = E.center.copy()
    out[keep] = y
    return out


def one_step_sequence(
    x1: Waypoint,
    x2: Waypoint,
    s_start: int,
    vm: VertexModel,
    constraints: SegmentConstraints,
    settings: PlannerSettings | None = None,
    segment: int = 0,
):
    """Families covering the way from ``x1`` back to ``x2``.

    Returns
    -------
    families : list of SegmentFamily
        Numbered ``s_start, s_start + 1, ...``; the last one contains ``x1``.
    n_s : int
        ``s_start + len(families)``, the next free index.

    Raises
    ------
    StallError
        If a new equilibrium coincides with the previous one, the family
        cap is hit, or a terminal pair cannot be synthesized.
    """
    settings = settings or PlannerSettings()
    start = x1.state
    x_eq, u_eq, _ = compute_equilibrium(x2, vm)
    families = []
    s = s_start
    while True:
        if len(families) >= settings.max_families:
            raise StallError(f"family cap {settings.max_families} reached", segment)
        rel = constraints.relative(x_eq, u_eq)
        tight = constraints.relative(x_eq, u_eq, settings.terminal_row_scale, settings.terminal_input_scale)
        t0 = time.perf_counter()
        try:
            pair = synthesize_terminal_pair(vm, tight, betas=settings.betas, contraction=settings.contraction)
        except InfeasibleSynthesisError as exc:
            raise StallError(f"terminal synthesis failed at {x_eq[list(EQUILIBRIUM_COORDS)]}: {exc}", segment) from exc

        def covered(E_rel):
            return membership_value(E_rel, start - x_eq) <= settings.member_level

        chain_rel, gains, infos = grow_chain(
            pair, vm, rel, max_steps=settings.max_steps, min_growth=settings.min_growth, stop=covered
        )
        chain = tuple(E.translated(x_eq) for E in chain_rel)
        info = {
            "beta": pair.beta,
            "seconds": time.perf_counter() - t0,
            "newton_steps": [int(i.get("newton_steps", 0)) for i in infos],
            "rho": [float(i["rho"]) for i in infos[1:]],
        }
        fam = SegmentFamily(s, x_eq.copy(), u_eq.copy(), tuple(gains), chain, pair.beta, segment, info)
        families.append(fam)
        log.info("family %d: eq %s, chain %d", s, np.round(x_eq[list(EQUILIBRIUM_COORDS)], 3), fam.depth)
        s += 1
        if membership_value(chain[-1], start) <= settings.member_level:
            return families, s
        nxt = _recenter_target(chain[-1], start, settings.recenter)
        scale = slice_ellipsoid(chain_rel[0], list(EQUILIBRIUM_COORDS)).extents()
        step = np.linalg.norm((nxt - x_eq)[list(EQUILIBRIUM_COORDS)] / scale)
        if step < settings.stall_step:
            raise StallError("re-centering stalled: waypoint unreachable under the segment constraints", segment)
        x_eq, u_eq, _ = compute_equilibrium(Waypoint(nxt), vm)


def full_path(
    waypoints,
    vm: VertexModel,
    constraints,
    settings: PlannerSettings | None = None,
    obstacles=(),
    meta=None,
) -> FullPath:
    """Stitch families for every waypoint pair, goal first.

    Parameters
    ----------
    waypoints : sequence of Waypoint
        Start first, goal last.
    constraints : sequence of SegmentConstraints
        ``constraints[k]`` applies between ``waypoints[k]`` and
        ``waypoints[k + 1]``.

    Raises
    ------
    StallError
        Carries the failing segment index.
    """
    waypoints = tuple(waypoints)
    constraints = tuple(constraints)
    if len(waypoints) < 2:
        raise ValueError("a path needs at least two waypoints")
    if len(constraints) != len(waypoints) - 1:
        raise ValueError("one constraint set per waypoint pair is required")
    families = []
    s = 0
    for k in range(len(waypoints) - 2, -1, -1):
        fams, s = one_step_sequence(waypoints[k], waypoints[k + 1], s, vm, constraints[k], settings, segment=k)
        families.extend(fams)
    meta = dict(meta or {})
    meta.setdefault("settings", (settings or PlannerSettings()).to_dict())
    return FullPath(tuple(families), waypoints, tuple(obstacles), vm, constraints, meta)


def locate(x, fp: FullPath):
    """Lexicographically smallest ``(s, i)`` with ``x`` in ``E_i^s``, or None."""
    x = np.asarray(x, dtype=float)
    for fam in fp.families:
        for i, E in enumerate(fam.chain):
            if membership_value(E, x) <= 1.0:
                return fam.index, i
    return None


def corridor_intersects(fp: FullPath, ob: ObstacleBox, families=None, samples: int = 64) -> bool:
    """True if the box meets the ``(x5, x6)`` projection of any ellipsoid.

    The projection of an ellipsoid onto two coordinates is the ellipsoid
    with the corresponding 2x2 block of its shape. The test checks the
    box corners and edge points, and the projected ellipsoid's extreme
    points, for mutual inclusion.
    """
    keep = list(EQUILIBRIUM_COORDS)
    lo = np.array([ob.y_rel - ob.delta_y, ob.x_rel - ob.delta_x])
    hi = np.array([ob.y_rel + ob.delta_y, ob.x_rel + ob.delta_x])
    t = np.linspace(0.0, 1.0, samples)
    edge = np.concatenate(
        [
            np.stack([lo[0] + t * (hi[0] - lo[0]), np.full_like(t, lo[1])], 1),
            np.stack([lo[0] + t * (hi[0] - lo[0]), np.full_like(t, hi[1])], 1),
            np.stack([np.full_like(t, lo[0]), lo[1] + t * (hi[1] - lo[1])], 1),
            np.stack([np.full_like(t, hi[0]), lo[1] + t * (hi[1] - lo[1])], 1),
        ]
    )
    ang = np.linspace(0.0, 2 * np.pi, samples, endpoint=False)
    circle = np.stack([np.cos(ang), np.sin(ang)], 1)
    for fam in families if families is not None else fp.families:
        for E in fam.chain:
            c = E.center[keep]
            P = E.shape[np.ix_(keep, keep)]
            if np.all((c >= lo) & (c <= hi)):
                return True
            Hinv = np.linalg.inv(P)
            d = edge - c
            if np.any(np.einsum("ka,ab,kb->k", d, Hinv, d) <= 1.0):
                return True
            pts = c + circle @ np.linalg.cholesky(P).T
            if np.any(np.all((pts >= lo) & (pts <= hi), axis=1)):
                return True
    return False


def replan(current: FullPath, x_now, new_obstacles, waypoints_alt, vm: VertexModel, constraints, settings=None, meta=None):
    """Fresh path from ``waypoints_alt`` under updated obstacles.

    ``waypoints_alt[0]`` should be at or near ``x_now``. The new path is
    returned only if ``x_now`` is a member of one of its ellipsoids.

    Raises
    ------
    NoContainingEllipsoidError
        If ``x_now`` is not covered, or synthesis stalls.
    """
    if meta is None:
        meta = dict(current.meta) if current is not None else {}
    try:
        fp = full_path(waypoints_alt, vm, constraints, settings, new_obstacles, meta)
    except StallError as exc:
        raise NoContainingEllipsoidError(f"re-plan failed: {exc}") from exc
    if locate(x_now, fp) is None:
        raise NoContainingEllipsoidError("current state is not covered by the re-planned path", fp)
    return fp


@dataclass(frozen=True)
class CertificateRow:
    """Certificate of one ``(s, i)`` step; ``i = 0`` is terminal invariance."""

    s: int
    i: int
    nested: bool
    admissible: bool
    samples: int
    feasible: int
    worst_margin: float

    @property
    def passed(self) -> bool:
        return self.nested and self.admissible and self.feasible == self.samples


def verify_path(fp: FullPath, samples: int, seed: int = 0, tol: float = 1e-6) -> list[CertificateRow]:
    """Certificate suite of a path bundle.

    For every family: nesting of consecutive ellipsoids, admissibility of
    every ellipsoid against the segment's state rows, and sampled one-step
    feasibility (``E_0`` into itself under the terminal gain, ``E_i`` into
    ``E_{i-1}``), all under the family's disturbance shrinking.

    Raises
    ------
    ValueError
        If ``samples`` is not positive.
    """
    if samples <= 0:
        raise ValueError("samples must be positive")
    rows = []
    for fam in fp.families:
        cons = fp.constraints_of(fam).relative(fam.x_eq, fam.u_eq)
        nested = chain_nested(fam.chain)
        for i in range(len(fam.chain)):
            outer = fam.relative(i)
            inner = fam.relative(max(i - 1, 0))
            rep = verify_one_step(
                outer, inner, fp.model, cons, samples, beta=fam.beta, gain=fam.gains[i], tol=tol, seed=seed + i
            )
            ok_rows = rows_admissible(outer, cons)
            rows.append(CertificateRow(fam.index, i, nested, ok_rows, rep.samples, rep.feasible, rep.worst_margin))
    return rows


__all__ = [
    "CertificateRow",
    "FullPath",
    "LargeResidualError",
    "NoContainingEllipsoidError",
    "ObstacleBox",
    "PlannerSettings",
    "SegmentConstraints",
    "SegmentFamily",
    "StallError",
    "Waypoint",
    "compute_equilibrium",
    "config_hash",
    "corridor_intersects",
    "full_path",
    "locate",
    "obstacle_free_halfspaces",
    "one_step_sequence",
    "replan",
    "segment_constraints",
    "verify_path",
]
