"""Vehicle models.

Two models are kept apart:

* the 6-DOF four-wheel plant with Magic Formula tires, used as simulation
  truth and integrated with fixed-step RK4;
* the 6-state control model, its exact quasi-LPV rewrite and the
  8-vertex discrete polytope used for synthesis.

Control state ``x = [dvx, vy, psi, r, y, xrel]``: longitudinal speed
deviation from ``v_bar``, body lateral speed, yaw, yaw rate, lateral road
position, and longitudinal offset ``X_ego - X_lead``. Inputs
``u = [delta_f, ax_des]``, disturbances ``d = [Ydot_lead, dvx_lead]``.

Plant state (10 entries): ``[vx, vy, psi, r, w11, w12, w21, w22, X, Y]``.
Wheel index ``ij``: ``i`` = 1 front, 2 rear; ``j`` = 1 left, 2 right.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._accel import njit
from .synthesis import VertexModel

GRAVITY = 9.81
#: Plant state layout.
PLANT_FIELDS = ("vx", "vy", "psi", "r", "w11", "w12", "w21", "w22", "X", "Y")
CONTROL_FIELDS = ("dvx", "vy", "psi", "r", "y", "xrel")
_MIN_SPEED = 0.1
_BLOWUP = 1e6


class DegenerateSpeedError(ValueError):
    """Raised when a slip denominator is too close to zero."""


class PlantInstabilityError(RuntimeError):
    """Raised when a plant state leaves the ``1e6`` guard."""


@dataclass(frozen=True)
class VehicleParams:
    """Vehicle constants (SI units).

    Defaults describe a mid-size sedan; they are typical published values,
    not identified data.
    """

    m: float = 1575.0
    iz: float = 2875.0
    lf: float = 1.2
    lr: float = 1.6
    track: float = 1.6
    wheel_radius: float = 0.3
    wheel_inertia: float = 1.2
    caf: float = 19000.0
    car: float = 19000.0
    drag: float = 0.4
    v_bar: float = 20.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0.0:
                raise ValueError(f"vehicle parameter {f.name} must be positive")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr

    def axle_loads(self) -> tuple[float, float]:
        """Static vertical load per wheel, front and rear (N)."""
        w = self.m * GRAVITY / (2.0 * self.wheelbase)
        return w * self.lr, w * self.lf

    def pack(self) -> np.ndarray:
        return np.array(
            [self.m, self.iz, self.lf, self.lr, self.track, self.wheel_radius, self.wheel_inertia, self.drag]
        )


@dataclass(frozen=True)
class PacejkaCoeffs:
    """Magic Formula coefficients for one force direction.

    ``F(k) = D sin(C atan(S k' - E (S k' - atan(S k')))) + S_V`` with
    ``k' = k + S_H``.
    """

    stiffness: float = 10.0
    shape: float = 1.9
    peak: float = 1.0
    curvature: float = 0.97
    h_shift: float = 0.0
    v_shift: float = 0.0

    def __post_init__(self):
        if not self.peak > 0.0:
            raise ValueError("Magic Formula peak D must be positive")
        if not self.shape > 0.0:
            raise ValueError("Magic Formula shape C must be positive")

    def pack(self) -> np.ndarray:
        return np.array([self.stiffness, self.shape, self.peak, self.curvature, self.h_shift, self.v_shift])


@dataclass(frozen=True)
class TireModel:
    """Per-direction Magic Formula shapes; peak ``D = mu F_z`` per wheel.

    With ``match_cornering`` the lateral stiffness factor of each wheel is
    set so that the small-slip cornering stiffness ``S C D`` equals the
    control model's ``C_af`` (front) or ``C_ar`` (rear), and the lateral
    ``stiffness`` field is ignored.
    """

    mu: float = 1.0
    longitudinal: PacejkaCoeffs = field(default_factory=PacejkaCoeffs)
    lateral: PacejkaCoeffs = field(default_factory=PacejkaCoeffs)
    match_cornering: bool = True

    def __post_init__(self):
        if not self.mu > 0.0:
            raise ValueError("friction coefficient must be positive")

    def pack(self, p: VehicleParams) -> np.ndarray:
        """Row per wheel (11, 12, 21, 22): longitudinal then lateral coefficients."""
        fz_f, fz_r = p.axle_loads()
        out = np.empty((4, 12))
        for w, fz in enumerate((fz_f, fz_f, fz_r, fz_r)):
            lon = self.longitudinal.pack()
            lat = self.lateral.pack()
            lon[2] = self.mu * fz
            lat[2] = self.mu * fz
            if self.match_cornering:
                lat[0] = (p.caf if w < 2 else p.car) / (lat[1] * lat[2])
            out[w, :6] = lon
            out[w, 6:] = lat
        return out


@dataclass(frozen=True)
class GammaBounds:
    """Scheduling-parameter envelope ``gamma_min <= gamma <= gamma_max``."""

    g1: tuple = (-np.pi / 2, np.pi / 2)
    g2: tuple = (-2.0, 2.0)
    g3: tuple = (0.03, 0.1)

    def __post_init__(self):
        for name in ("g1", "g2", "g3"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not lo < hi:
                raise ValueError(f"{name} bounds must satisfy min < max")
            object.__setattr__(self, name, (lo, hi))
        if self.g3[0] <= 0.0:
            raise ValueError("gamma_3 bounds must be positive")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.g1[0], self.g2[0], self.g3[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.g1[1], self.g2[1], self.g3[1]])

    @classmethod
    def from_state_box(cls, psi_max: float, r_max: float, dvx_lo: float, dvx_hi: float, v_bar: float):
        """Envelope implied by ``|psi| <= psi_max``, ``|r| <= r_max`` and a
        speed-deviation interval."""
        return cls((-psi_max, psi_max), (-r_max, r_max), (1.0 / (v_bar + dvx_hi), 1.0 / (v_bar + dvx_lo)))


# ---------------------------------------------------------------- tires


@njit
def _magic(k, S, C, D, E, SH, SV):
    ks = S * (k + SH)
    return D * np.sin(C * np.arctan(ks - E * (ks - np.arctan(ks)))) + SV


def magic_formula(k, c: PacejkaCoeffs):
    """Magic Formula force for slip ``k`` (shifted by ``S_H`` first)."""
    return _magic(np.asarray(k, dtype=float), c.stiffness, c.shape, c.peak, c.curvature, c.h_shift, c.v_shift)


@njit
def _wheel_kinematics(vx, vy, r, delta, lf, lr, half_track):
    """Slip angles and wheel-plane longitudinal speeds, order 11, 12, 21, 22."""
    den = np.empty(4)
    den[0] = vx - half_track * r
    den[1] = vx + half_track * r
    den[2] = den[0]
    den[3] = den[1]
    alpha = np.empty(4)
    alpha[0] = delta - np.arctan((vy + lf * r) / den[0])
    alpha[1] = delta - np.arctan((vy + lf * r) / den[1])
    alpha[2] = np.arctan((lr * r - vy) / den[2])
    alpha[3] = np.arctan((lr * r - vy) / den[3])
    vw = np.empty(4)
    cd = np.cos(delta)
    sd = np.sin(delta)
    vw[0] = den[0] * cd + (vy + lf * r) * sd
    vw[1] = den[1] * cd + (vy + lf * r) * sd
    vw[2] = den[2]
    vw[3] = den[3]
    return alpha, vw, den


@njit
def _slip_ratio(rw, vw):
    if rw > vw:
        return (rw - vw) / rw
    return (rw - vw) / vw


def _check_speeds(values):
    if np.min(np.abs(values)) < _MIN_SPEED:
        raise DegenerateSpeedError("wheel speed denominator below 0.1 m/s")


def slip_angles(s, delta: float, p: VehicleParams) -> np.ndarray:
    """Slip angles of wheels 11, 12, 21, 22 (rad).

    Raises
    ------
    DegenerateSpeedError
        If ``|vx -+ B r / 2| < 0.1``.
    """
    s = np.asarray(s, dtype=float)
    alpha, _, den = _wheel_kinematics(s[0], s[1], s[3], float(delta), p.lf, p.lr, 0.5 * p.track)
    _check_speeds(den)
    return alpha


def slip_ratios(s, delta: float, p: VehicleParams) -> np.ndarray:
    """Slip ratios of wheels 11, 12, 21, 22.

    Acceleration branch (``R w > v``): ``(R w - v) / (R w)``;
    braking branch: ``(R w - v) / v``, with ``v`` the wheel-plane speed.
    """
    s = np.asarray(s, dtype=float)
    _, vw, _ = _wheel_kinematics(s[0], s[1], s[3], float(delta), p.lf, p.lr, 0.5 * p.track)
    _check_speeds(vw)
    rw = p.wheel_radius * s[4:8]
    return np.array([_slip_ratio(rw[k], vw[k]) for k in range(4)])


# ---------------------------------------------------------------- 6-DOF plant


@njit
def _sixdof(s, delta, torque_front, vp, tp):
    """Plant derivative; returns (derivative, ok flag)."""
    m, iz, lf, lr, track, R, iw, cdrag = vp[0], vp[1], vp[2], vp[3], vp[4], vp[5], vp[6], vp[7]
    vx, vy, psi, r = s[0], s[1], s[2], s[3]
    out = np.zeros(10)
    alpha, vw, den = _wheel_kinematics(vx, vy, r, delta, lf, lr, 0.5 * track)
    for k in range(4):
        if abs(den[k]) < 0.1 or abs(vw[k]) < 0.1:
            return out, False
    fx = np.empty(4)
    fy = np.empty(4)
    for k in range(4):
        sig = _slip_ratio(R * s[4 + k], vw[k])
        c = tp[k]
        fx[k] = _magic(sig, c[0], c[1], c[2], c[3], c[4], c[5])
        fy[k] = _magic(alpha[k], c[6], c[7], c[8], c[9], c[10], c[11])
    cd = np.cos(delta)
    sd = np.sin(delta)
    fx1 = fx[0] + fx[1]
    fy1 = fy[0] + fy[1]
    f_air = cdrag * vx * abs(vx)
    out[0] = (fx[2] + fx[3] + fx1 * cd - fy1 * sd - f_air) / m + r * vy
    out[1] = (fy[2] + fy[3] + fx1 * sd + fy1 * cd) / m - r * vx
    out[2] = r
    mz = (fx1 * sd + fy1 * cd) * lf
    mz += ((fx[1] - fx[0]) * cd + (fy[0] - fy[1]) * sd) * 0.5 * track
    mz += -(fy[2] + fy[3]) * lr + (fx[3] - fx[2]) * 0.5 * track
    out[3] = mz / iz
    out[4] = (torque_front[0] - fx[0] * R) / iw
    out[5] = (torque_front[1] - fx[1] * R) / iw
    out[6] = -fx[2] * R / iw
    out[7] = -fx[3] * R / iw
    cp = np.cos(psi)
    sp = np.sin(psi)
    out[8] = vx * cp - vy * sp
    out[9] = vx * sp + vy * cp
    return out, True


@njit
def _rk4(s, delta, torque_front, vp, tp, dt, nsteps):
    """Fixed-step RK4; status 0 ok, 1 degenerate speed, 2 blow-up."""
    x = s.copy()
    for _ in range(nsteps):
        k1, ok1 = _sixdof(x, delta, torque_front, vp, tp)
        k2, ok2 = _sixdof(x + 0.5 * dt * k1, delta, torque_front, vp, tp)
        k3, ok3 = _sixdof(x + 0.5 * dt * k2, delta, torque_front, vp, tp)
        k4, ok4 = _sixdof(x + dt * k3, delta, torque_front, vp, tp)
        if not (ok1 and ok2 and ok3 and ok4):
            return x, 1
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if np.max(np.abs(x)) > 1e6:
            return x, 2
    return x, 0


@dataclass(frozen=True)
class Plant:
    """Packed plant parameters, ready for the kernels."""

    params: VehicleParams = field(default_factory=VehicleParams)
    tires: TireModel = field(default_factory=TireModel)

    def __post_init__(self):
        object.__setattr__(self, "_vp", self.params.pack())
        object.__setattr__(self, "_tp", self.tires.pack(self.params))

    def cruise_state(self, speed: float, X: float = 0.0, Y: float = 0.0, psi: float = 0.0) -> np.ndarray:
        """Straight driving with free-rolling wheels."""
        w = speed / self.params.wheel_radius
        return np.array([speed, 0.0, psi, 0.0, w, w, w, w, X, Y], dtype=float)


def sixdof_derivatives(s, u, plant: Plant) -> np.ndarray:
    """Time derivative of the plant state.

    Parameters
    ----------
    s : array_like, shape (10,)
    u : array_like
        ``(delta, T11, T12)``: front steering and front drive torques.

    Raises
    ------
    DegenerateSpeedError
    """
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    out, ok = _sixdof(s, u[0], u[1:3].copy(), plant._vp, plant._tp)
    if not ok:
        raise DegenerateSpeedError("wheel speed denominator below 0.1 m/s")
    return out


def integrate_plant(s, u, dt: float, plant: Plant, duration: float | None = None) -> np.ndarray:
    """Integrate the plant with constant input.

    Parameters
    ----------
    dt : float
        RK4 step.
    duration : float, optional
        Total time; defaults to one step ``dt``. Must be a whole number of
        steps.

    Raises
    ------
    PlantInstabilityError
        If any state exceeds ``1e6``.
    DegenerateSpeedError
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    duration = dt if duration is None else duration
    nsteps = int(round(duration / dt))
    if nsteps < 0 or abs(nsteps * dt - duration) > 1e-9 * max(1.0, duration):
        raise ValueError("duration must be a whole number of steps")
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    x, status = _rk4(s, u[0], u[1:3].copy(), plant._vp, plant._tp, dt, nsteps)
    if status == 1:
        raise DegenerateSpeedError("wheel speed denominator below 0.1 m/s")
    if status == 2:
        raise PlantInstabilityError("plant state exceeded 1e6")
    return x


def drive_torque(ax_des: float, vx: float, p: VehicleParams) -> float:
    """Per-wheel front torque for a desired acceleration, ``R (m a + drag) / 2``."""
    return p.wheel_radius * (p.m * ax_des + p.drag * vx * abs(vx)) / 2.0


# ---------------------------------------------------------------- control model


def control_model_derivatives(x, u, d, p: VehicleParams) -> np.ndarray:
    """Nonlinear control-model vector field.

    Raises
    ------
    DegenerateSpeedError
        If ``v_bar + x_1 <= 0.5``.
    """
    x1, x2, x3, x4, _, _ = np.asarray(x, dtype=float)
    u1, u2 = np.asarray(u, dtype=float)
    d1, d2 = np.asarray(d, dtype=float)
    v = p.v_bar + x1
    if v <= 0.5:
        raise DegenerateSpeedError("v_bar + x1 must exceed 0.5 m/s")
    cf, cr, m, iz, lf, lr = p.caf, p.car, p.m, p.iz, p.lf, p.lr
    return np.array(
        [
            x2 * x4 + u2,
            -(2 * cf + 2 * cr) / (m * v) * x2 + (2 * cf / m) * u1 + (-v - (2 * cf * lf - 2 * cr * lr) / (m * v)) * x4,
            x4,
            -(2 * lf * cf - 2 * lr * cr) / (iz * v) * x2
            + (2 * lf * cf / iz) * u1
            - (2 * lf**2 * cf + 2 * lr**2 * cr) / (iz * v) * x4,
            x2 + v * x3 - d1,
            x1 - d2,
        ]
    )


def gamma_of_state(x, p: VehicleParams, gb: GammaBounds | None = None):
    """Scheduling parameters and their normalized values.

    Returns
    -------
    gamma : ndarray, shape (3,)
        ``(x_3, x_4, 1 / (v_bar + x_1))``.
    rho : ndarray, shape (3,)
        ``(gamma - gamma_min) / (gamma_max - gamma_min)`` clipped to [0, 1].
    outside : bool
        True when clipping was needed.
    """
    gb = gb or GammaBounds()
    x = np.asarray(x, dtype=float)
    gamma = np.array([x[2], x[3], 1.0 / (p.v_bar + x[0])])
    raw = (gamma - gb.lower) / (gb.upper - gb.lower)
    rho = np.clip(raw, 0.0, 1.0)
    return gamma, rho, bool(np.any(raw != rho))


def continuous_matrices(gamma, p: VehicleParams):
    """``Phi(gamma)``, ``G`` and ``G_d`` of the quasi-LPV form."""
    g1, g2, g3 = gamma
    cf, cr, m, iz, lf, lr, vb = p.caf, p.car, p.m, p.iz, p.lf, p.lr, p.v_bar
    A = np.zeros((6, 6))
    A[0, 1] = g2
    A[1, 0] = -g2
    A[1, 1] = -g3 * (2 * cf + 2 * cr) / m
    A[1, 3] = -(vb + (2 * cf * lf - 2 * cr * lr) / m * g3)
    A[2, 3] = 1.0
    A[3, 1] = -(2 * lf * cf - 2 * lr * cr) / iz * g3
    # yaw damping adds both axles; a difference would make the model
    # yaw-unstable while the plant is not
    A[3, 3] = -(2 * lf**2 * cf + 2 * lr**2 * cr) / iz * g3
    A[4, 0] = g1
    A[4, 1] = 1.0
    A[4, 2] = vb
    A[5, 0] = 1.0
    B = np.zeros((6, 2))
    B[0, 1] = 1.0
    B[1, 0] = 2 * cf / m
    B[3, 0] = 2 * lf * cf / iz
    Bd = np.zeros((6, 2))
    Bd[4, 0] = -1.0
    Bd[5, 1] = -1.0
    return A, B, Bd


def vertex_gammas(gb: GammaBounds) -> np.ndarray:
    """Corner parameters in binary order ``(rho_1 rho_2 rho_3) = 000 .. 111``."""
    out = np.empty((8, 3))
    for j in range(8):
        bits = ((j >> 2) & 1, (j >> 1) & 1, j & 1)
        out[j] = [gb.upper[k] if bits[k] else gb.lower[k] for k in range(3)]
    return out


def vertex_weights(rho) -> np.ndarray:
    """Tensor-product weights ``w_j = prod_k (rho_k or 1 - rho_k)``."""
    rho = np.asarray(rho, dtype=float)
    w = np.empty(8)
    for j in range(8):
        bits = ((j >> 2) & 1, (j >> 1) & 1, j & 1)
        w[j] = np.prod([rho[k] if bits[k] else 1.0 - rho[k] for k in range(3)])
    return w


def build_vertex_model(p: VehicleParams, gb: GammaBounds, ts: float) -> VertexModel:
    """Forward-Euler discretization of the 8 polytope vertices."""
    phis = []
    for gamma in vertex_gammas(gb):
        A, B, Bd = continuous_matrices(gamma, p)
        phis.append(np.eye(6) + ts * A)
    _, B, Bd = continuous_matrices(np.zeros(3), p)
    return VertexModel(tuple(phis), ts * B, ts * Bd, ts)


def control_state_from_plant(s, lead_X: float, v_bar: float) -> np.ndarray:
    """Control state from a plant state and the tracked lead position."""
    s = np.asarray(s, dtype=float)
    return np.array([s[0] - v_bar, s[1], s[2], s[3], s[9], s[8] - lead_X])


# ---------------------------------------------------------------- config


def _strict(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {', '.join(unknown)}")
    return cls(**section)


def vehicle_from_config(cfg: dict) -> tuple[VehicleParams, TireModel]:
    """Build parameters from a ``{"vehicle": .., "tires": ..}`` mapping.

    Unknown keys raise ``ValueError``.
    """
    unknown = sorted(set(cfg) - {"vehicle", "tires"})
    if unknown:
        raise ValueError(f"unknown sections: {', '.join(unknown)}")
    p = _strict(VehicleParams, dict(cfg.get("vehicle", {})), "vehicle")
    t = dict(cfg.get("tires", {}))
    lon = _strict(PacejkaCoeffs, dict(t.pop("longitudinal", {})), "tires.longitudinal")
    lat = _strict(PacejkaCoeffs, dict(t.pop("lateral", {})), "tires.lateral")
    mu = t.pop("mu", 1.0)
    match = bool(t.pop("match_cornering", True))
    if t:
        raise ValueError(f"unknown keys in [tires]: {', '.join(sorted(t))}")
    return p, TireModel(mu, lon, lat, match)


def load_vehicle_config(path) -> tuple[VehicleParams, TireModel]:
    """Read vehicle parameters from a TOML or JSON file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        cfg = json.loads(text)
    else:
        from ._toml import loads

        cfg = loads(text)
    return vehicle_from_config(cfg)


def vehicle_to_config(p: VehicleParams, t: TireModel) -> dict:
    return {"vehicle": asdict(p), "tires": asdict(t)}
