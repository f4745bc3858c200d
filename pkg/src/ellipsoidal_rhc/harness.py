"""Closed-loop scenarios: plant, radar, controller and re-planning.

The loop runs at the controller period. Each period the simulated radar
measures every obstacle, the control state is assembled from the plant
state and the tracked lead (obstacle 0), the re-plan trigger is checked,
the controller picks an input and the 6-DOF plant is integrated over one
period with the acceleration command mapped to front drive torque.

World frame: the ego starts at ``X = 0``; obstacle positions are world
``X`` of their reference points. The control frame measures ``x6`` as
``X_ego - X_lead`` for the tracked lead, so planning boxes of other
obstacles sit at ``X_obstacle - X_lead``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .controller import Controller, ControllerSettings, InfeasibleOneStepError, LeadMeasurement, locate, warmup
from .ellipsoid import BoxSet, cover_box_image
from .planner import (
    FullPath,
    NoContainingEllipsoidError,
    ObstacleBox,
    PlannerSettings,
    StallError,
    Waypoint,
    config_hash,
    corridor_intersects,
    full_path,
    replan,
    segment_constraints,
)
from .vehicle import (
    DegenerateSpeedError,
    GammaBounds,
    Plant,
    PlantInstabilityError,
    TireModel,
    VehicleParams,
    build_vertex_model,
    control_state_from_plant,
    drive_torque,
    gamma_of_state,
    integrate_plant,
    vehicle_from_config,
    vertex_weights,
    vehicle_to_config,
)

log = logging.getLogger(__name__)

#: Tolerance of the constraint-violation abort.
VIOLATION_TOL = 1e-9


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario description."""


# ---------------------------------------------------------------- scenario types


@dataclass(frozen=True)
class ObstacleSpec:
    """One lead vehicle.

    Parameters
    ----------
    x : float
        Initial world ``X`` (the ego starts at 0).
    y : float
        Lateral road position (lane centre).
    profile : tuple of (time, speed)
        Speed schedule, linear between breakpoints and constant outside.
        Time counts from the start, or from the trigger when
        ``trigger_lane`` is set.
    trigger_lane : float, optional
        The obstacle is invisible to the radar and keeps its initial speed
        until the ego first enters the lane centred here; then its profile
        clock starts.
    length, width : float
        Vehicle dimensions (m).
    """

    x: float
    y: float
    profile: tuple = ((0.0, 20.0),)
    trigger_lane: float | None = None
    length: float = 4.5
    width: float = 1.8

    def __post_init__(self):
        prof = tuple((float(t), float(v)) for t, v in self.profile)
        if not prof or any(b[0] <= a[0] for a, b in zip(prof[:-1], prof[1:])):
            raise ScenarioError("obstacle profile needs increasing breakpoint times")
        object.__setattr__(self, "profile", prof)

    def speed(self, t_since: float) -> float:
        return float(np.interp(t_since, [p[0] for p in self.profile], [p[1] for p in self.profile]))

    def distance(self, t0: float, t1: float) -> float:
        """Distance covered between profile times ``t0`` and ``t1`` (exact
        for the piecewise-linear schedule)."""
        knots = [t0] + [p[0] for p in self.profile if t0 < p[0] < t1] + [t1]
        return float(sum(0.5 * (self.speed(a) + self.speed(b)) * (b - a) for a, b in zip(knots[:-1], knots[1:])))


@dataclass(frozen=True)
class ConstraintSpec:
    """Operational bounds checked every step (signed margins in the trace).

    ``min_gap`` applies to obstacles that overlap the ego laterally.
    """

    u_lower: tuple = (-0.5, -2.0)
    u_upper: tuple = (0.5, 2.0)
    x1: tuple = (-10.0, 10.0)
    x3: tuple = (-math.pi / 2, math.pi / 2)
    x4: tuple = (-2.0, 2.0)
    x5: tuple = (-3.0, 3.0)
    min_gap: float = 12.0


@dataclass(frozen=True)
class SynthesisSpec:
    """Envelope used for the ellipsoid synthesis.

    Parameters
    ----------
    state_lower, state_upper : tuple of 6 floats
        Synthesis state box (tighter than the operational bounds where the
        quasi-LPV envelope needs it).
    psi_max, r_max : float
        Scheduling envelope for yaw and yaw rate.
    disturbance_lower, disturbance_upper : tuple of 2 floats
        Disturbance box ``D`` used by the certificates.
    """

    state_lower: tuple = (-5.0, -2.0, -0.05, -0.1, -3.0, -1000.0)
    state_upper: tuple = (5.0, 2.0, 0.05, 0.1, 3.0, 1000.0)
    psi_max: float = 0.05
    r_max: float = 0.1
    disturbance_lower: tuple = (0.0, -1.5)
    disturbance_upper: tuple = (0.0, 1.5)


@dataclass(frozen=True)
class Contingency:
    """Scenario logic for the alternative waypoints after a trigger.

    Parameters
    ----------
    lane : float
        Lane used to pass.
    behind_gap : float
        The lateral move ends this far behind the new obstacle (m).
    pass_gap : float
        The return move starts this far ahead of the new obstacle (m).
    margin : float
        Longitudinal clearance of ``behind``/``ahead`` rows.
    """

    lane: float = 4.0
    behind_gap: float = 25.0
    pass_gap: float = 22.0
    margin: float = 6.0


@dataclass(frozen=True)
class Scenario:
    """Complete closed-loop experiment."""

    name: str
    lane_centers: tuple
    lane_width: float
    ego_y: float
    obstacles: tuple
    waypoints: tuple
    v_bar: float = 20.0
    ts: float = 0.1
    duration: float = 60.0
    plant_dt: float = 0.001
    detection_range: float = 100.0
    constraints: ConstraintSpec = field(default_factory=ConstraintSpec)
    synthesis: SynthesisSpec = field(default_factory=SynthesisSpec)
    contingency: Contingency | None = None
    planner: PlannerSettings = field(default_factory=PlannerSettings)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    tires: TireModel = field(default_factory=TireModel)

    def __post_init__(self):
        if not self.obstacles:
            raise ScenarioError("a scenario needs a tracked lead (obstacle 0)")
        if self.obstacles[0].trigger_lane is not None:
            raise ScenarioError("the tracked lead must be visible from the start")
        if len(self.waypoints) < 2:
            raise ScenarioError("at least a start and a goal waypoint are required")
        if self.ts <= 0 or self.duration < 0 or self.plant_dt <= 0:
            raise ScenarioError("ts and plant_dt must be positive and duration nonnegative")
        steps = self.ts / self.plant_dt
        if abs(steps - round(steps)) > 1e-9:
            raise ScenarioError("ts must be a whole number of plant steps")
        x0 = self.x0
        c = self.constraints
        for k, key in ((0, "x1"), (2, "x3"), (3, "x4"), (4, "x5")):
            lo, hi = getattr(c, key)
            if not lo <= x0[k] <= hi:
                raise ScenarioError(f"initial state violates the {key} bound")
        goal = self.waypoints[-1].state
        if np.any(goal[:4] != 0.0):
            raise ScenarioError("the goal must be an equilibrium (x1..x4 = 0)")

    @property
    def x0(self) -> np.ndarray:
        return np.array([0.0, 0.0, 0.0, 0.0, self.ego_y, -self.obstacles[0].x])

    @property
    def goal(self) -> np.ndarray:
        return self.waypoints[-1].state.copy()

    @property
    def input_box(self) -> BoxSet:
        return BoxSet(self.constraints.u_lower, self.constraints.u_upper)

    @property
    def state_box(self) -> BoxSet:
        return BoxSet(self.synthesis.state_lower, self.synthesis.state_upper)

    @property
    def gamma_bounds(self) -> GammaBounds:
        s = self.synthesis
        return GammaBounds.from_state_box(s.psi_max, s.r_max, s.state_lower[0], s.state_upper[0], self.v_bar)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "road": {"lane_centers": list(self.lane_centers), "lane_width": self.lane_width},
            "ego": {"y": self.ego_y, "v_bar": self.v_bar},
            "sim": {
                "ts": self.ts,
                "duration": self.duration,
                "plant_dt": self.plant_dt,
                "detection_range": self.detection_range,
            },
            "obstacles": {
                str(k + 1): {
                    "x": o.x,
                    "y": o.y,
                    "profile": [list(p) for p in o.profile],
                    **({} if o.trigger_lane is None else {"trigger_lane": o.trigger_lane}),
                    "length": o.length,
                    "width": o.width,
                }
                for k, o in enumerate(self.obstacles)
            },
            "constraints": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.constraints).items()},
            "synthesis": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.synthesis).items()},
            "waypoints": {"initial": [w.to_dict() for w in self.waypoints]},
            **({} if self.contingency is None else {"contingency": asdict(self.contingency)}),
            "planner": self.planner.to_dict(),
            **vehicle_to_config(self.vehicle, self.tires),
        }


def _section(cls, rec: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(rec) - known)
    if unknown:
        raise ScenarioError(f"unknown keys in [{where}]: {', '.join(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in rec.items()})


_SECTIONS = {
    "name",
    "road",
    "ego",
    "sim",
    "obstacles",
    "constraints",
    "synthesis",
    "disturbance",
    "waypoints",
    "contingency",
    "planner",
    "vehicle",
    "tires",
}


def scenario_from_dict(cfg: dict) -> Scenario:
    """Build a scenario from the TOML/JSON layout.

    Raises
    ------
    ScenarioError
        On unknown sections or keys, or inconsistent values.
    """
    unknown = sorted(set(cfg) - _SECTIONS)
    if unknown:
        raise ScenarioError(f"unknown sections: {', '.join(unknown)}")
    try:
        road = dict(cfg["road"])
        ego = dict(cfg.get("ego", {}))
        sim = dict(cfg.get("sim", {}))
        obs_cfg = cfg["obstacles"]
        wp_cfg = cfg["waypoints"]
    except KeyError as exc:
        raise ScenarioError(f"missing section {exc.args[0]!r}") from None
    obstacles = []
    for key in sorted(obs_cfg, key=lambda k: int(k)):
        rec = dict(obs_cfg[key])
        rec["profile"] = tuple(tuple(p) for p in rec.get("profile", ((0.0, 20.0),)))
        obstacles.append(_section(ObstacleSpec, rec, f"obstacles.{key}"))
    synth = dict(cfg.get("synthesis", {}))
    dist = dict(cfg.get("disturbance", {}))
    if dist:
        extra = sorted(set(dist) - {"lower", "upper"})
        if extra:
            raise ScenarioError(f"unknown keys in [disturbance]: {', '.join(extra)}")
        synth["disturbance_lower"] = dist.get("lower", SynthesisSpec.disturbance_lower)
        synth["disturbance_upper"] = dist.get("upper", SynthesisSpec.disturbance_upper)
    extra = sorted(set(wp_cfg) - {"initial"})
    if extra:
        raise ScenarioError(f"unknown keys in [waypoints]: {', '.join(extra)}")
    waypoints = tuple(Waypoint.from_dict(w) for w in wp_cfg["initial"])
    veh = {k: cfg[k] for k in ("vehicle", "tires") if k in cfg}
    try:
        params, tires = vehicle_from_config(veh)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc
    for where, rec, allowed in (
        ("road", road, {"lane_centers", "lane_width"}),
        ("ego", ego, {"y", "v_bar"}),
        ("sim", sim, {"ts", "duration", "plant_dt", "detection_range"}),
    ):
        extra = sorted(set(rec) - allowed)
        if extra:
            raise ScenarioError(f"unknown keys in [{where}]: {', '.join(extra)}")
    kwargs = {
        "name": str(cfg.get("name", "scenario")),
        "lane_centers": tuple(float(v) for v in road["lane_centers"]),
        "lane_width": float(road["lane_width"]),
        "ego_y": float(ego.get("y", road["lane_centers"][0])),
        "obstacles": tuple(obstacles),
        "waypoints": waypoints,
        "constraints": _section(ConstraintSpec, dict(cfg.get("constraints", {})), "constraints"),
        "synthesis": _section(SynthesisSpec, synth, "synthesis"),
        "planner": _section(PlannerSettings, dict(cfg.get("planner", {})), "planner"),
        "vehicle": params,
        "tires": tires,
    }
    if "v_bar" in ego:
        kwargs["v_bar"] = float(ego["v_bar"])
    for key in ("ts", "duration", "plant_dt", "detection_range"):
        if key in sim:
            kwargs[key] = float(sim[key])
    if "contingency" in cfg:
        kwargs["contingency"] = _section(Contingency, dict(cfg["contingency"]), "contingency")
    try:
        return Scenario(**kwargs)
    except TypeError as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path) -> Scenario:
    """Read a scenario from a ``.toml`` or ``.json`` file.

    Raises
    ------
    ScenarioError
        On parse errors or invalid content.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".json":
            cfg = json.loads(text)
        else:
            from ._toml import TOMLDecodeError, loads

            try:
                cfg = loads(text)
            except TOMLDecodeError as exc:
                raise ScenarioError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return scenario_from_dict(cfg)


def scenario_hash(scn: Scenario) -> str:
    """Hash of everything the synthesis depends on."""
    d = scn.to_dict()
    keep = ("obstacles", "synthesis", "waypoints", "planner", "vehicle", "tires", "constraints")
    rec = {k: d[k] for k in keep if k in d}
    rec["ts"] = scn.ts
    rec["v_bar"] = scn.v_bar
    return config_hash(rec)


def build_scenario_1() -> Scenario:
    """Two 4 m lanes, lead at +50 m, overtake on the left and return."""
    wp = (
        Waypoint([0, 0, 0, 0, -2, -50]),
        Waypoint([0, 0, 0, 0, 2, -25], ((0, "behind"),), margin=6.0),
        Waypoint([0, 0, 0, 0, 2, 20], ((0, "left"),)),
        Waypoint([0, 0, 0, 0, -2, 35], ((0, "ahead"),), margin=6.0),
        Waypoint([0, 0, 0, 0, -2, 50], ((0, "ahead"),), margin=6.0),
    )
    return Scenario(
        name="scenario-1",
        lane_centers=(-2.0, 2.0),
        lane_width=4.0,
        ego_y=-2.0,
        obstacles=(ObstacleSpec(50.0, -2.0, ((0.0, 20.0),)),),
        waypoints=wp,
        duration=60.0,
    )


def build_scenario_2() -> Scenario:
    """Three lanes; lead 2 appears in the middle lane during the pass."""
    wp = (
        Waypoint([0, 0, 0, 0, -4, -40]),
        Waypoint([0, 0, 0, 0, 0, -25], ((0, "behind"),), margin=6.0),
        Waypoint([0, 0, 0, 0, 0, 20], ((0, "left"),)),
        Waypoint([0, 0, 0, 0, -4, 35], ((0, "ahead"),), margin=6.0),
        Waypoint([0, 0, 0, 0, -4, 50], ((0, "ahead"),), margin=6.0),
    )
    synth = SynthesisSpec(
        state_lower=(-5.0, -2.0, -0.05, -0.1, -5.0, -1000.0),
        state_upper=(5.0, 2.0, 0.05, 0.1, 5.0, 1000.0),
    )
    return Scenario(
        name="scenario-2",
        lane_centers=(-4.0, 0.0, 4.0),
        lane_width=4.0,
        ego_y=-4.0,
        obstacles=(
            ObstacleSpec(40.0, -4.0, ((0.0, 20.0),)),
            ObstacleSpec(70.0, 0.0, ((0.0, 19.0), (2.0, 20.0)), trigger_lane=0.0),
        ),
        waypoints=wp,
        duration=100.0,
        constraints=ConstraintSpec(x5=(-5.0, 5.0)),
        synthesis=synth,
        contingency=Contingency(),
    )


# ---------------------------------------------------------------- synthesis glue


def scenario_model(scn: Scenario):
    return build_vertex_model(scn.vehicle, scn.gamma_bounds, scn.ts)


def disturbance_cover(scn: Scenario, vm):
    s = scn.synthesis
    return cover_box_image(vm.gd, BoxSet(s.disturbance_lower, s.disturbance_upper))


def segment_set(scn: Scenario, vm, obstacles, waypoints) -> list:
    cov = disturbance_cover(scn, vm)
    return [
        segment_constraints(scn.state_box, scn.input_box, cov, obstacles, waypoints[k + 1])
        for k in range(len(waypoints) - 1)
    ]


def planning_box(scn: Scenario, k: int, rel_x: float, t_since, margin_x: float = 1.5) -> ObstacleBox:
    """Keep-out box of obstacle ``k`` in the control frame.

    ``rel_x`` is the obstacle's current offset from the tracked lead. The
    box is stretched over the offsets predicted from the known speed
    profiles until the profiles settle.
    """
    o, lead = scn.obstacles[k], scn.obstacles[0]
    t0 = 0.0 if t_since is None else t_since
    t_end = max(t0, o.profile[-1][0], lead.profile[-1][0])
    shifts = [0.0]
    for t in np.linspace(t0, t_end, 21)[1:]:
        shifts.append(o.distance(t0, t) - lead.distance(t0, t))
    lo, hi = rel_x + min(shifts), rel_x + max(shifts)
    half = 0.5 * (hi - lo)
    return ObstacleBox(
        0.5 * (lo + hi),
        o.y,
        l_lead=o.length,
        w_lead=o.width,
        eps_x=margin_x + half,
        profile=o.profile,
    )


def initial_obstacles(scn: Scenario) -> list:
    """Boxes of the obstacles visible at the start, in scenario order."""
    lead = scn.obstacles[0]
    return [
        planning_box(scn, k, o.x - lead.x, 0.0)
        for k, o in enumerate(scn.obstacles)
        if o.trigger_lane is None
    ]


def synthesize(scn: Scenario, settings: PlannerSettings | None = None) -> FullPath:
    """Offline path bundle for the initial waypoints.

    Raises
    ------
    StallError
        With the failing segment index.
    """
    vm = scenario_model(scn)
    obstacles = initial_obstacles(scn)
    cons = segment_set(scn, vm, obstacles, scn.waypoints)
    meta = {"scenario": scn.name, "scenario_hash": scenario_hash(scn)}
    return full_path(scn.waypoints, vm, cons, settings or scn.planner, obstacles, meta)


def _nearest(values, y: float) -> float:
    values = np.asarray(values, dtype=float)
    return float(values[np.argmin(np.abs(values - y))])


def contingency_waypoints(scn: Scenario, x_now, boxes, new: int, settle: float = 0.5) -> tuple:
    """Alternative waypoints after obstacle ``boxes[new]`` invalidated the path.

    Start at the lane-centre equilibrium the fallback mode settles to,
    move to the contingency lane behind the new obstacle, pass every
    obstacle there and return to the goal ahead of all of them.
    """
    c = scn.contingency
    ob = boxes[new]
    lane_now = _nearest(scn.lane_centers, x_now[4])
    x6_start = float(x_now[5] + x_now[0] / settle)
    w1 = min(ob.x_rel - c.behind_gap, max(x6_start, ob.x_rel - c.behind_gap - 10.0))

    def lateral(k):
        return "left" if c.lane > boxes[k].y_rel else "right"

    side1 = tuple((k, "behind" if k == new else lateral(k)) for k in range(len(boxes)))
    side2 = tuple((k, lateral(k)) for k in range(len(boxes)))
    side3 = tuple((k, "ahead") for k in range(len(boxes)))
    goal = scn.goal
    return (
        Waypoint([0, 0, 0, 0, lane_now, x6_start]),
        Waypoint([0, 0, 0, 0, c.lane, w1], side1, margin=c.margin),
        Waypoint([0, 0, 0, 0, c.lane, ob.x_rel + c.pass_gap], side2),
        Waypoint(goal, side3, margin=c.margin),
    )


# ---------------------------------------------------------------- radar and world


@dataclass(frozen=True)
class RadarReading:
    """Measurement of one obstacle (ego minus obstacle, world frame)."""

    x_rel: float
    y_rel: float
    v_rel: float
    detected: bool


@dataclass
class World:
    """Obstacle positions and trigger clocks."""

    scn: Scenario
    X: np.ndarray = None
    trigger_time: list = None

    def __post_init__(self):
        self.X = np.array([o.x for o in self.scn.obstacles], dtype=float)
        self.trigger_time = [0.0 if o.trigger_lane is None else None for o in self.scn.obstacles]

    def since(self, k: int, t: float):
        t0 = self.trigger_time[k]
        return None if t0 is None else t - t0

    def speed(self, k: int, t: float) -> float:
        o = self.scn.obstacles[k]
        s = self.since(k, t)
        return o.profile[0][1] if s is None else o.speed(s)

    def visible(self, k: int) -> bool:
        return self.trigger_time[k] is not None

    def update_triggers(self, t: float, ego_y: float) -> None:
        for k, o in enumerate(self.scn.obstacles):
            if self.trigger_time[k] is None and abs(ego_y - o.trigger_lane) < 0.5 * self.scn.lane_width:
                self.trigger_time[k] = t

    def advance(self, t: float, dt: float) -> None:
        for k, o in enumerate(self.scn.obstacles):
            s = self.since(k, t)
            if s is None:
                self.X[k] += o.profile[0][1] * dt
            else:
                self.X[k] += o.distance(s, s + dt)


def radar(scn: Scenario, world: World, plant_state, t: float, rng=None, noise: bool = False) -> list:
    """Readings for every obstacle; exact unless ``noise`` is set.

    Noise is uniform within the box margins ``eps_x = 1.5`` and
    ``eps_y = 0.2`` and drawn from ``rng``.
    """
    s = plant_state
    vx_world = s[0] * math.cos(s[2]) - s[1] * math.sin(s[2])
    out = []
    for k, o in enumerate(scn.obstacles):
        xr = s[8] - world.X[k]
        yr = s[9] - o.y
        vr = vx_world - world.speed(k, t)
        if noise and rng is not None:
            xr += rng.uniform(-1.5, 1.5)
            yr += rng.uniform(-0.2, 0.2)
        det = world.visible(k) and abs(xr) <= scn.detection_range
        out.append(RadarReading(float(xr), float(yr), float(vr), bool(det)))
    return out


# ---------------------------------------------------------------- trace


@dataclass
class Trace:
    """Per-step records plus run-level results.

    ``rows`` hold the numeric columns of :attr:`columns`; ``modes`` the
    controller mode per row. Wall-clock quantities live in ``solve_ms``
    and ``summary`` only, so the CSV is reproducible byte for byte.
    """

    scenario: str
    ts: float
    columns: tuple
    rows: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    solve_ms: list = field(default_factory=list)
    events: list = field(default_factory=list)
    status: str = "completed"
    violation: dict | None = None
    summary: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows], dtype=float)

    @property
    def states(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, 6))
        return np.stack([self.column(f"x{k}") for k in range(1, 7)], axis=1)

    def to_csv(self) -> str:
        lines = ["t,mode," + ",".join(self.columns[1:])]
        for row, mode in zip(self.rows, self.modes):
            vals = [_fmt(row[0]), mode] + [_fmt(v) for v in row[1:]]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> dict:
        """Write ``trace.csv``, ``timing.csv`` and ``summary.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"trace": out / "trace.csv", "timing": out / "timing.csv", "summary": out / "summary.json"}
        paths["trace"].write_text(self.to_csv(), encoding="utf-8")
        timing = ["t,solve_ms"] + [f"{_fmt(r[0])},{_fmt(ms)}" for r, ms in zip(self.rows, self.solve_ms)]
        paths["timing"].write_text("\n".join(timing) + "\n", encoding="utf-8")
        paths["summary"].write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return paths


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9g}"


def read_trace_csv(path) -> tuple:
    """``(columns, modes, data)`` from a trace CSV; ``data`` excludes ``mode``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    mode_idx = header.index("mode")
    cols = tuple(h for h in header if h != "mode")
    modes, data = [], []
    for line in lines[1:]:
        parts = line.split(",")
        modes.append(parts[mode_idx])
        data.append([float(p) for j, p in enumerate(parts) if j != mode_idx])
    return cols, modes, np.array(data, dtype=float).reshape(len(data), len(cols))


def rmse(actual, reference) -> np.ndarray:
    """Per-state root mean square error ``sqrt(mean((x - x_ref)^2))``.

    Parameters
    ----------
    actual : Trace or (T, n) array
    reference : (T, n) array

    Raises
    ------
    ValueError
        On a length or width mismatch.
    """
    a = actual.states if isinstance(actual, Trace) else np.asarray(actual, dtype=float)
    r = np.asarray(reference, dtype=float)
    if a.shape != r.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {r.shape}")
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:] or (0,))
    return np.sqrt(np.mean((a - r) ** 2, axis=0))


def timing_report(trace_or_ms, ts: float | None = None) -> dict:
    """Mean, median, p99 and max controller time per step and the fraction
    of the sampling period used by the mean."""
    if isinstance(trace_or_ms, Trace):
        ms = np.asarray(trace_or_ms.solve_ms, dtype=float)
        ts = trace_or_ms.ts if ts is None else ts
    else:
        ms = np.asarray(trace_or_ms, dtype=float)
    ts = 0.1 if ts is None else ts
    if ms.size == 0:
        return {"steps": 0, "mean_ms": 0.0, "median_ms": 0.0, "p99_ms": 0.0, "max_ms": 0.0, "fraction_of_ts": 0.0}
    mean = float(np.mean(ms))
    return {
        "steps": int(ms.size),
        "mean_ms": mean,
        "median_ms": float(np.median(ms)),
        "p99_ms": float(np.percentile(ms, 99)),
        "max_ms": float(np.max(ms)),
        "fraction_of_ts": mean / (1e3 * ts),
    }


# ---------------------------------------------------------------- run


@dataclass(frozen=True)
class RunOptions:
    """Run switches.

    Parameters
    ----------
    seed : int
        Seed of the radar-noise generator.
    noise : bool
        Bounded uniform radar noise.
    replan : bool
        Allow the re-plan trigger (needs a scenario contingency).
    plant : str
        ``"sixdof"`` or ``"model"`` (discrete control model as plant, for
        property tests).
    """

    seed: int = 0
    noise: bool = False
    replan: bool = True
    plant: str = "sixdof"


def _columns(scn: Scenario) -> tuple:
    cols = ["t", "s", "i", "u1", "u2", "worst_membership", "cost"]
    cols += ["vx", "vy", "psi", "r", "w11", "w12", "w21", "w22", "X", "Y"]
    cols += [f"x{k}" for k in range(1, 7)] + ["ego_speed"]
    for k in range(len(scn.obstacles)):
        cols += [f"ob{k + 1}_xrel", f"ob{k + 1}_yrel", f"ob{k + 1}_vrel", f"ob{k + 1}_detected"]
    cols += ["m_u1", "m_u2", "m_x1", "m_x3", "m_x4", "m_x5"]
    cols += [f"m_sep{k + 1}" for k in range(len(scn.obstacles))]
    return tuple(cols)


def constraint_margins(scn: Scenario, x, u, readings) -> dict:
    """Signed margins of the operational bounds (negative = violated).

    The separation margin of an obstacle is
    ``max(|x_rel| - min_gap, |y_rel| - (w_ego + w_obs) / 2)``: the gap
    bound only binds while the vehicles overlap laterally.
    """
    c = scn.constraints
    m = {
        "m_u1": min(u[0] - c.u_lower[0], c.u_upper[0] - u[0]),
        "m_u2": min(u[1] - c.u_lower[1], c.u_upper[1] - u[1]),
    }
    for k, key in ((0, "x1"), (2, "x3"), (3, "x4"), (4, "x5")):
        lo, hi = getattr(c, key)
        m[f"m_{key}"] = min(x[k] - lo, hi - x[k])
    w_ego = 1.8
    for k, (o, rd) in enumerate(zip(scn.obstacles, readings)):
        lat = abs(rd.y_rel) - 0.5 * (w_ego + o.width)
        m[f"m_sep{k + 1}"] = max(abs(rd.x_rel) - c.min_gap, lat)
    return m


def _lead_in_lane(scn: Scenario, readings, plant_state):
    best = None
    for rd in readings:
        if rd.detected and rd.x_rel < 0 and abs(rd.y_rel) < 0.5 * scn.lane_width:
            if best is None or rd.x_rel > best.x_rel:
                best = rd
    if best is None:
        return None
    return LeadMeasurement(gap=abs(best.x_rel), gap_rate=-best.v_rel)


def run(scn: Scenario, bundle: FullPath | None, opts: RunOptions | None = None, progress=None) -> Trace:
    """Closed-loop simulation.

    Returns a :class:`Trace` whose ``status`` is ``completed``,
    ``violation``, ``instability`` or ``infeasible``; aborts stop the
    loop and record the cause.
    """
    opts = opts or RunOptions()
    rng = np.random.default_rng(opts.seed)
    vm = bundle.model if bundle is not None else scenario_model(scn)
    cov = disturbance_cover(scn, vm)
    ctl = Controller(vm, scn.input_box, cov, bundle, ControllerSettings(lane_centers=tuple(scn.lane_centers)))
    plant = Plant(scn.vehicle, scn.tires)
    s = plant.cruise_state(scn.v_bar + 0.0, X=0.0, Y=scn.ego_y)
    x_model = scn.x0.copy()
    world = World(scn)
    cols = _columns(scn)
    trace = Trace(scn.name, scn.ts, cols)
    nsteps = int(round(scn.duration / scn.ts))
    known = {0} | {k for k, o in enumerate(scn.obstacles) if o.trigger_lane is None}
    boxes = list(bundle.obstacles) if bundle is not None else []
    box_owner = sorted(known)
    pending = None
    replans = 0
    min_xrel = [math.inf] * len(scn.obstacles)
    ref = []
    warmup()
    t_wall = time.perf_counter()
    for step in range(nsteps):
        t = step * scn.ts
        world.update_triggers(t, s[9] if opts.plant == "sixdof" else x_model[4])
        if opts.plant == "sixdof":
            readings = radar(scn, world, s, t, rng, opts.noise)
            x = control_state_from_plant(s, s[8] - readings[0].x_rel, scn.v_bar)
        else:
            ego = np.array([scn.v_bar + x_model[0], x_model[1], x_model[2], x_model[3], 0, 0, 0, 0, 0, x_model[4]])
            ego[8] = world.X[0] + x_model[5]
            readings = radar(scn, world, ego, t, rng, opts.noise)
            x = x_model.copy()
        # re-plan trigger: a newly detected obstacle meets the active corridor
        if opts.replan and scn.contingency is not None and ctl.path is not None:
            cur_s = locate(x, ctl.path)
            remaining = [f for f in ctl.path.families if cur_s is None or f.index <= cur_s[0]]
            for k, rd in enumerate(readings):
                if k in known or not rd.detected:
                    continue
                rel = readings[0].x_rel - rd.x_rel
                box = planning_box(scn, k, rel, world.since(k, t))
                if not corridor_intersects(ctl.path, box, remaining):
                    continue
                known.add(k)
                replans += 1
                ctl.set_path(None)
                new_boxes = list(boxes) + [box]
                owner = box_owner + [k]
                wps = contingency_waypoints(scn, x, new_boxes, len(new_boxes) - 1)
                cons = segment_set(scn, vm, new_boxes, wps)
                w0 = time.perf_counter()
                event = {"t": t, "obstacle": k + 1, "state": x.tolist()}
                try:
                    fp = replan(bundle, x, new_boxes, wps, vm, cons, scn.planner, dict(bundle.meta))
                    ctl.set_path(fp)
                    event["result"] = "swapped"
                except NoContainingEllipsoidError as exc:
                    pending = exc.path
                    event["result"] = "pending" if exc.path is not None else f"failed: {exc}"
                event["wall_s"] = time.perf_counter() - w0
                if pending is not None or ctl.path is not None:
                    fp_new = ctl.path if ctl.path is not None else pending
                    event["families"] = len(fp_new.families)
                    boxes, box_owner, bundle = new_boxes, owner, fp_new
                trace.events.append(event)
                log.info("re-plan at t=%.1f: %s", t, event["result"])
                break
        if pending is not None and locate(x, pending) is not None:
            ctl.set_path(pending)
            trace.events.append({"t": t, "result": "adopted", "wall_s": 0.0})
            pending = None
        lead = _lead_in_lane(scn, readings, s)
        try:
            dec = ctl.step(x, lead)
        except InfeasibleOneStepError as exc:
            trace.status = "infeasible"
            trace.violation = {"t": t, "row": "one-step", "detail": str(exc), "location": list(exc.location or ())}
            break
        u = dec.u
        margins = constraint_margins(scn, x, u, readings)
        in_path = dec.s >= 0
        row = [t, dec.s, dec.i, u[0], u[1], dec.worst_membership, dec.cost]
        row += list(s if opts.plant == "sixdof" else np.full(10, np.nan))
        row += list(x) + [scn.v_bar + x[0]]
        for rd in readings:
            row += [rd.x_rel, rd.y_rel, rd.v_rel, float(rd.detected)]
        row += [margins[c] for c in cols[len(row) :]]
        trace.rows.append(row)
        trace.modes.append(dec.mode.value)
        trace.solve_ms.append(dec.solve_ms)
        if in_path:
            ref.append(ctl.path.families[dec.s].x_eq)
        else:
            ref.append(np.full(6, np.nan))
        for k, rd in enumerate(readings):
            if abs(rd.y_rel) < 0.5 * (1.8 + scn.obstacles[k].width):
                min_xrel[k] = min(min_xrel[k], abs(rd.x_rel))
        bad = [
            name
            for name, v in margins.items()
            if v < -VIOLATION_TOL and (in_path or name.startswith("m_sep") or name.startswith("m_u"))
        ]
        if bad:
            trace.status = "violation"
            trace.violation = {"t": t, "row": bad[0][2:], "margin": margins[bad[0]], "mode": dec.mode.value}
            break
        if progress is not None:
            progress(step, nsteps)
        # advance plant and world
        try:
            if opts.plant == "sixdof":
                torque = drive_torque(u[1], s[0], scn.vehicle)
                s = integrate_plant(s, [u[0], torque, torque], scn.plant_dt, plant, scn.ts)
            else:
                x_model = _model_step(vm, x_model, u, world, t, scn)
        except (PlantInstabilityError, DegenerateSpeedError) as exc:
            trace.status = "instability"
            trace.violation = {"t": t, "row": "plant", "detail": str(exc)}
            break
        world.advance(t, scn.ts)
    trace.summary = _summary(scn, trace, replans, min_xrel, ref, time.perf_counter() - t_wall)
    return trace


def _model_step(vm, x, u, world: World, t: float, scn: Scenario):
    """Control-model plant: the scheduled polytope point of the current
    state, with the tracked lead's speed deviation as ``d2``."""
    _, rho, _ = gamma_of_state(x, scn.vehicle, scn.gamma_bounds)
    w = vertex_weights(rho)
    phi = np.einsum("j,jab->ab", w, vm.phi_stack)
    d2 = world.speed(0, t) - scn.v_bar
    return phi @ x + vm.g @ u + vm.gd @ np.array([0.0, d2])


def _summary(scn: Scenario, trace: Trace, replans: int, min_xrel, ref, wall: float) -> dict:
    out = {
        "scenario": scn.name,
        "status": trace.status,
        "steps": len(trace.rows),
        "sim_time": len(trace.rows) * scn.ts,
        "replan_count": replans,
        "events": trace.events,
        "violation": trace.violation,
        "wall_s": wall,
        "timing": timing_report(trace),
    }
    overlap = [v for v in min_xrel if np.isfinite(v)]
    out["min_abs_xrel"] = min(overlap) if overlap else None
    out["min_abs_xrel_per_obstacle"] = [v if np.isfinite(v) else None for v in min_xrel]
    if trace.rows:
        xs = trace.states
        goal = scn.goal
        out["final_state"] = xs[-1].tolist()
        out["final_lateral_error"] = float(abs(xs[-1][4] - goal[4]))
        out["final_longitudinal_error"] = float(abs(xs[-1][5] - goal[5]))
        out["max_abs_x5"] = float(np.max(np.abs(xs[:, 4])))
        r = np.asarray(ref, dtype=float)
        mask = np.all(np.isfinite(r), axis=1)
        out["rmse_to_equilibrium"] = rmse(xs[mask], r[mask]).tolist() if mask.any() else None
        modes = {}
        for m in trace.modes:
            modes[m] = modes.get(m, 0) + 1
        out["mode_counts"] = modes
        s_col, i_col = trace.column("s"), trace.column("i")
        out["index_monotone"] = _index_monotone(s_col, i_col)
    else:
        out["final_state"] = None
    return out


def _index_monotone(s_col, i_col) -> bool:
    """True if ``i`` never increases while ``s`` stays the same."""
    for k in range(1, len(s_col)):
        if s_col[k] == s_col[k - 1] and s_col[k] >= 0 and i_col[k] > i_col[k - 1]:
            return False
    return True


__all__ = [
    "Contingency",
    "ConstraintSpec",
    "ObstacleSpec",
    "RadarReading",
    "RunOptions",
    "Scenario",
    "ScenarioError",
    "SynthesisSpec",
    "Trace",
    "World",
    "build_scenario_1",
    "build_scenario_2",
    "constraint_margins",
    "contingency_waypoints",
    "disturbance_cover",
    "initial_obstacles",
    "load_scenario",
    "planning_box",
    "radar",
    "read_trace_csv",
    "rmse",
    "run",
    "scenario_from_dict",
    "scenario_hash",
    "scenario_model",
    "segment_set",
    "synthesize",
    "timing_report",
]
