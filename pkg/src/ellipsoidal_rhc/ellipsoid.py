"""Ellipsoid and box calculus.

Ellipsoids are stored as ``E = {x : (x - c)^T P^{-1} (x - c) <= 1}`` with
``P`` symmetric positive definite. All objects are immutable and every
operation is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

#: Relative tolerance on eigenvalue-based containment tests.
CONTAINMENT_TOL = 1e-8
#: Regularization added to rank-deficient disturbance covers.
COVER_EPS = 1e-12
_SYM_TOL = 1e-10
_COND_LIMIT = 1e14


class SingularShapeError(ValueError):
    """Raised when a shape matrix cannot be inverted reliably."""


class CenterMismatchError(ValueError):
    """Raised when a concentric operation receives two different centers."""


class InfeasibleShrinkError(ValueError):
    """Raised when a disturbance cover does not fit inside the target."""


def _as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.array(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def symmetrize(P) -> np.ndarray:
    """Return ``(P + P^T) / 2``."""
    P = np.asarray(P, dtype=float)
    return 0.5 * (P + P.T)


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """Ellipsoid with center ``c`` and shape ``P``.

    Parameters
    ----------
    center : array_like, shape (n,)
    shape : array_like, shape (n, n)
        Symmetric positive definite matrix. Asymmetry above ``1e-10``
        (relative to the largest entry) is rejected.
    """

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        c = _as_vector(self.center, "center")
        P = np.array(self.shape, dtype=float)
        if P.shape != (c.size, c.size):
            raise ValueError(f"shape must be {c.size}x{c.size}, got {P.shape}")
        if not np.all(np.isfinite(P)):
            raise ValueError("shape must be finite")
        scale = max(1.0, float(np.max(np.abs(P))))
        if np.max(np.abs(P - P.T)) > _SYM_TOL * scale:
            raise ValueError("shape must be symmetric")
        if np.linalg.eigvalsh(symmetrize(P))[0] <= 0.0:
            raise ValueError("shape must be positive definite")
        c.setflags(write=False)
        P.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", P)

    @property
    def dim(self) -> int:
        return self.center.size

    @cached_property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor ``L`` with ``P = L L^T``."""
        try:
            L = np.linalg.cholesky(symmetrize(self.shape))
        except np.linalg.LinAlgError as exc:
            raise SingularShapeError("shape is not numerically positive definite") from exc
        d = np.diag(L)
        if (d.max() / d.min()) ** 2 > _COND_LIMIT:
            raise SingularShapeError("shape condition number exceeds 1e14")
        return L

    @cached_property
    def inverse(self) -> np.ndarray:
        """``P^{-1}``, symmetrized."""
        Linv = np.linalg.inv(self.chol)
        return symmetrize(Linv.T @ Linv)

    def log_volume(self) -> float:
        """``0.5 * log det P``, the log volume up to the unit-ball constant."""
        return float(np.sum(np.log(np.diag(self.chol))))

    def contains(self, x, tol: float = 0.0) -> bool:
        return membership_value(self, x) <= 1.0 + tol

    def scaled(self, factor: float) -> Ellipsoid:
        """Same center, semi-axes multiplied by ``factor``."""
        return Ellipsoid(self.center, self.shape * factor**2)

    def translated(self, offset) -> Ellipsoid:
        return Ellipsoid(self.center + _as_vector(offset), self.shape)

    def recentered(self, center) -> Ellipsoid:
        return Ellipsoid(center, self.shape)

    def extents(self) -> np.ndarray:
        """Half-width of the bounding box along each coordinate."""
        return np.sqrt(np.diag(self.shape))

    def support(self, a) -> float:
        """Support function ``max_{x in E} a^T x``."""
        a = _as_vector(a)
        return float(a @ self.center + np.sqrt(a @ self.shape @ a))

    def sample_boundary(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Points on the boundary, uniform in the unit-sphere parameterization."""
        z = rng.standard_normal((count, self.dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return self.center + z @ self.chol.T

    def sample_interior(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Points uniformly distributed in volume."""
        z = rng.standard_normal((count, self.dim))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        r = rng.random(count) ** (1.0 / self.dim)
        return self.center + (z * r[:, None]) @ self.chol.T

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "shape": self.shape.tolist()}

    @classmethod
    def from_dict(cls, record: dict) -> Ellipsoid:
        return cls(np.array(record["center"], dtype=float), np.array(record["shape"], dtype=float))

    @classmethod
    def ball(cls, center, radius: float = 1.0) -> Ellipsoid:
        c = _as_vector(center)
        return cls(c, np.eye(c.size) * radius**2)


@dataclass(frozen=True, eq=False)
class BoxSet:
    """Axis-aligned box ``{x : lower <= x <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _as_vector(self.lower, "lower")
        hi = _as_vector(self.upper, "upper")
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same dimension")
        if np.any(lo > hi):
            raise ValueError("lower must not exceed upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_widths) -> BoxSet:
        h = np.abs(_as_vector(half_widths))
        return cls(-h, h)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def half_widths(self) -> np.ndarray:
        """Symmetrized half-widths, the larger of ``|lower|`` and ``|upper|``."""
        return np.maximum(np.abs(self.lower), np.abs(self.upper))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = _as_vector(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def contains_origin(self) -> bool:
        return self.contains(np.zeros(self.dim))

    def shifted(self, offset) -> BoxSet:
        o = _as_vector(offset)
        return BoxSet(self.lower - o, self.upper - o)

    def corners(self) -> np.ndarray:
        grids = np.meshgrid(*[(lo, hi) for lo, hi in zip(self.lower, self.upper)], indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, record: dict) -> BoxSet:
        return cls(record["lower"], record["upper"])


@dataclass(frozen=True, eq=False)
class Halfspace:
    """Halfspace ``{x : a^T x <= b}``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        a = _as_vector(self.normal, "normal")
        if np.linalg.norm(a) <= 0.0:
            raise ValueError("halfspace normal must be nonzero")
        a.setflags(write=False)
        object.__setattr__(self, "normal", a)
        object.__setattr__(self, "offset", float(self.offset))

    def value(self, x) -> float:
        """Signed slack ``b - a^T x``; nonnegative inside."""
        return float(self.offset - self.normal @ _as_vector(x))

    def contains(self, x, tol: float = 0.0) -> bool:
        return self.value(x) >= -tol

    def shifted(self, origin) -> Halfspace:
        """Same set expressed in coordinates relative to ``origin``."""
        return Halfspace(self.normal, self.offset - float(self.normal @ _as_vector(origin)))

    @classmethod
    def upper(cls, n: int, index: int, bound: float) -> Halfspace:
        """``x[index] <= bound``."""
        a = np.zeros(n)
        a[index] = 1.0
        return cls(a, bound)

    @classmethod
    def lower(cls, n: int, index: int, bound: float) -> Halfspace:
        """``x[index] >= bound``."""
        a = np.zeros(n)
        a[index] = -1.0
        return cls(a, -bound)

    def to_dict(self) -> dict:
        return {"normal": self.normal.tolist(), "offset": self.offset}

    @classmethod
    def from_dict(cls, record: dict) -> Halfspace:
        return cls(record["normal"], record["offset"])


def box_halfspaces(lower, upper) -> list[Halfspace]:
    """Halfspaces of a box; infinite bounds are skipped."""
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    n = lo.size
    rows = []
    for k in range(n):
        if np.isfinite(hi[k]):
            rows.append(Halfspace.upper(n, k, hi[k]))
        if np.isfinite(lo[k]):
            rows.append(Halfspace.lower(n, k, lo[k]))
    return rows


def membership_value(E: Ellipsoid, x) -> float:
    """Quadratic form ``(x - c)^T P^{-1} (x - c)``.

    Raises
    ------
    SingularShapeError
        If ``P`` is too ill-conditioned to invert.
    """
    x = _as_vector(x)
    if x.size != E.dim:
        raise ValueError(f"expected a vector of dimension {E.dim}, got {x.size}")
    w = np.linalg.solve(E.chol, x - E.center)
    return float(w @ w)


def _whitened(inner_shape: np.ndarray, outer: Ellipsoid) -> np.ndarray:
    Linv = np.linalg.inv(outer.chol)
    return symmetrize(Linv @ inner_shape @ Linv.T)


def _lambda_max(S: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(S))[-1])


def concentric_contains(inner: Ellipsoid, outer: Ellipsoid, tol: float = CONTAINMENT_TOL) -> bool:
    """Containment test for two ellipsoids sharing a center.

    Raises
    ------
    CenterMismatchError
        If the centers differ by more than ``1e-9``.
    """
    if inner.dim != outer.dim:
        raise ValueError("dimension mismatch")
    if np.max(np.abs(inner.center - outer.center)) > 1e-9:
        raise CenterMismatchError("ellipsoids are not concentric")
    return _lambda_max(_whitened(inner.shape, outer)) <= 1.0 + tol


def affine_image_contained(A, src: Ellipsoid, dst: Ellipsoid, tol: float = CONTAINMENT_TOL) -> bool:
    """Test ``A (src - c_src) ⊆ dst - c_dst``, i.e. ``A P_src A^T <= P_dst``."""
    A = np.asarray(A, dtype=float)
    if A.shape != (dst.dim, src.dim):
        raise ValueError(f"A must be {dst.dim}x{src.dim}, got {A.shape}")
    return _lambda_max(_whitened(A @ src.shape @ A.T, dst)) <= 1.0 + tol


def shrink_factor(E: Ellipsoid, D_cover: Ellipsoid) -> float:
    """``rho = sqrt(lambda_max(L^{-1} P_D L^{-T}))``, the relative reach of the cover."""
    return float(np.sqrt(max(_lambda_max(_whitened(D_cover.shape, E)), 0.0)))


def shrink_by_disturbance(E: Ellipsoid, D_cover: Ellipsoid) -> Ellipsoid:
    """Scalar inner approximation of ``E ⊖ D_cover``.

    Returns the concentric ellipsoid with shape ``(1 - rho)^2 P``.

    Raises
    ------
    InfeasibleShrinkError
        If ``rho >= 1``.
    """
    rho = shrink_factor(E, D_cover)
    if rho >= 1.0:
        raise InfeasibleShrinkError(f"disturbance cover reaches outside the target (rho={rho:.4g})")
    return Ellipsoid(E.center, E.shape * (1.0 - rho) ** 2)


def inner_difference(E: Ellipsoid, D_cover: Ellipsoid, beta: float) -> Ellipsoid:
    """Parametric inner approximation of ``E ⊖ D_cover``.

    For ``beta`` in (0, 1) the ellipsoid with shape
    ``(1 - beta) (P - W / beta)`` satisfies ``S ⊕ D_cover ⊆ E`` whenever it
    is positive definite, because ``S ⊕ D`` is covered by
    ``(1 + t) S + (1 + 1/t) W`` for every ``t > 0`` and ``t = beta/(1-beta)``
    gives back ``P``. With ``beta = rho`` the result contains the scalar
    shrink of :func:`shrink_by_disturbance`.

    Raises
    ------
    InfeasibleShrinkError
        If the shape is not positive definite for this ``beta``.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    S = (1.0 - beta) * (E.shape - D_cover.shape / beta)
    S = symmetrize(S)
    lam = np.linalg.eigvalsh(S)[0]
    if lam <= 0.0:
        raise InfeasibleShrinkError(f"inner difference is empty for beta={beta:.4g}")
    return Ellipsoid(E.center, S)


def cover_box_image(G_d, D: BoxSet) -> Ellipsoid:
    """Zero-centered ellipsoid containing ``{G_d d : d in D}``.

    The box is symmetrized to its larger half-widths ``h`` and covered by
    ``diag(n_d h^2)``, which passes through every corner. The cover is
    mapped through ``G_d`` and regularized by ``1e-12 I``.
    """
    G_d = np.atleast_2d(np.asarray(G_d, dtype=float))
    if G_d.shape[1] != D.dim:
        raise ValueError("G_d columns must match the box dimension")
    h = D.half_widths
    W = G_d @ np.diag(D.dim * h**2) @ G_d.T
    n = G_d.shape[0]
    return Ellipsoid(np.zeros(n), symmetrize(W) + COVER_EPS * np.eye(n))


def project_point(E: Ellipsoid, y, tol: float = 1e-10) -> np.ndarray:
    """Euclidean projection of ``y`` onto ``E``.

    Solves the secular equation ``sum_k lam_k w_k^2 / (lam_k + mu)^2 = 1``
    for the multiplier ``mu >= 0`` in the eigenbasis of ``P``.
    """
    y = _as_vector(y)
    if membership_value(E, y) <= 1.0:
        return y.copy()
    lam, V = np.linalg.eigh(symmetrize(E.shape))
    w = V.T @ (y - E.center)

    def secular(mu):
        return float(np.sum(lam * w**2 / (lam + mu) ** 2)) - 1.0

    hi = max(1.0, float(np.sqrt(lam.max()) * np.linalg.norm(w)))
    while secular(hi) > 0.0:
        hi *= 2.0
    mu = brentq(secular, 0.0, hi, xtol=tol * max(1.0, hi), rtol=4 * np.finfo(float).eps, maxiter=500)
    z = lam * w / (lam + mu)
    # normalize onto the boundary to remove root-finding residue
    z /= np.sqrt(np.sum(z**2 / lam))
    return E.center + V @ z


def slice_ellipsoid(E: Ellipsoid, keep) -> Ellipsoid:
    """Intersection of ``E`` with the affine plane through its center
    spanned by the coordinates ``keep``, as an ellipsoid in those
    coordinates."""
    keep = np.asarray(keep, dtype=int)
    H = E.inverse[np.ix_(keep, keep)]
    return Ellipsoid(E.center[keep], symmetrize(np.linalg.inv(H)))
