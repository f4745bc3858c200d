"""Small dense barrier solver for determinant maximization.

Solves problems of the form::

    maximize    log det F_obj(z)
    subject to  F_k(z) > 0,   k = 1..K

where every ``F(z) = F_0 + sum_i z_i F_i`` is affine and symmetric. A
phase-I problem (minimize ``s`` subject to ``F_k(z) + s I > 0``) finds a
strictly feasible start; phase II follows the central path of
``-t log det F_obj - sum_k log det F_k``. Blocks of equal size are stacked
so that every Newton step is a handful of batched numpy calls.

The solver is deterministic: no randomness and a fixed operation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InfeasibleLMIError(ValueError):
    """Raised when phase I proves that no strictly feasible point exists.

    Attributes
    ----------
    block : int
        Index of the block with the smallest eigenvalue at the phase-I
        optimum, the most violated constraint.
    margin : float
        Phase-I optimum ``-s``; negative means infeasible.
    """

    def __init__(self, message: str, block: int = -1, margin: float = float("nan")):
        super().__init__(message)
        self.block = block
        self.margin = margin


class SolverStallError(RuntimeError):
    """Raised when the Newton iteration cap is reached."""


@dataclass
class LMIBlock:
    """Affine symmetric matrix ``F0 + sum_i z_i Fi[i]``."""

    F0: np.ndarray
    Fi: np.ndarray
    label: str = ""

    @property
    def size(self) -> int:
        return self.F0.shape[0]


@dataclass
class SolveInfo:
    """Solver statistics."""

    newton_steps: int = 0
    phase1_margin: float = float("nan")
    objective: float = float("nan")
    gap: float = float("nan")
    history: list = field(default_factory=list)


def block_from_map(fn, nvar: int, label: str = "") -> LMIBlock:
    """Build a block from an affine map ``fn(z) -> matrix`` by evaluating it
    at the origin and at the unit vectors."""
    z = np.zeros(nvar)
    F0 = np.asarray(fn(z), dtype=float)
    Fi = np.empty((nvar,) + F0.shape)
    for i in range(nvar):
        z[i] = 1.0
        Fi[i] = np.asarray(fn(z), dtype=float) - F0
        z[i] = 0.0
    F0 = 0.5 * (F0 + F0.T)
    Fi = 0.5 * (Fi + np.swapaxes(Fi, 1, 2))
    return LMIBlock(F0, Fi, label)


class _Group:
    """Blocks of a common size, stacked."""

    def __init__(self, blocks, nvar, shift):
        self.n = blocks[0].size
        self.K = len(blocks)
        self.F0 = np.stack([b.F0 for b in blocks])
        Fi = np.stack([b.Fi for b in blocks])
        if shift:
            eye = np.broadcast_to(np.eye(self.n), (self.K, 1, self.n, self.n))
            Fi = np.concatenate([Fi, eye], axis=1)
        self.Fi = Fi
        self.p = Fi.shape[1]
        self.flat = Fi.reshape(self.K, self.p, self.n * self.n)
        self.index = [id(b) for b in blocks]

    def at(self, z):
        return self.F0 + np.einsum("kpab,p->kab", self.Fi, z)

    def logdet(self, z):
        try:
            L = np.linalg.cholesky(self.at(z))
        except np.linalg.LinAlgError:
            return None
        return 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)

    def derivs(self, z):
        F = self.at(z)
        Finv = np.linalg.inv(F)
        Finv = 0.5 * (Finv + np.swapaxes(Finv, 1, 2))
        M = np.matmul(Finv[:, None], self.Fi)
        g = -np.trace(M, axis1=2, axis2=3)
        A = M.reshape(self.K, self.p, -1)
        B = np.swapaxes(M, 2, 3).reshape(self.K, self.p, -1)
        H = np.einsum("kpa,kqa->kpq", A, B)
        return g, H

    def min_eig(self, z):
        return np.linalg.eigvalsh(self.at(z))[:, 0]


class _Barrier:
    """``t * (c^T z - w_obj log det F_obj) - sum_k log det F_k``."""

    def __init__(self, blocks, obj, nvar, shift):
        groups = {}
        for b in blocks:
            groups.setdefault(b.size, []).append(b)
        self.groups = [_Group(v, nvar, shift) for _, v in sorted(groups.items())]
        self.obj = _Group([obj], nvar, False) if obj is not None else None
        self.order = [b for _, v in sorted(groups.items()) for b in v]
        self.dim = sum(b.size for b in blocks)
        self.nvar = nvar + (1 if shift else 0)
        self.c = np.zeros(self.nvar)
        if shift:
            self.c[-1] = 1.0

    def _obj_z(self, z):
        return z[: self.obj.p] if self.obj is not None else None

    def value(self, z, t):
        total = t * float(self.c @ z)
        for g in self.groups:
            ld = g.logdet(z)
            if ld is None:
                return np.inf
            total -= float(np.sum(ld))
        if self.obj is not None:
            ld = self.obj.logdet(self._obj_z(z))
            if ld is None:
                return np.inf
            total -= t * float(ld[0])
        return total

    def derivs(self, z, t):
        grad = t * self.c.copy()
        hess = np.zeros((self.nvar, self.nvar))
        for g in self.groups:
            gk, Hk = g.derivs(z)
            grad += gk.sum(axis=0)
            hess += Hk.sum(axis=0)
        if self.obj is not None:
            p = self.obj.p
            gk, Hk = self.obj.derivs(self._obj_z(z))
            grad[:p] += t * gk[0]
            hess[:p, :p] += t * Hk[0]
        return grad, hess

    def min_eigs(self, z):
        return np.concatenate([g.min_eig(z) for g in self.groups])


def _center(bar, z, t, info, max_steps, tol=1e-9, stop=None):
    """Damped Newton minimization of the barrier at fixed ``t``."""
    f = bar.value(z, t)
    for _ in range(max_steps):
        g, H = bar.derivs(z, t)
        try:
            L = np.linalg.cholesky(H)
            dz = -np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            dz = -np.linalg.lstsq(H, g, rcond=None)[0]
        dec = float(-g @ dz)
        info.newton_steps += 1
        if dec / 2.0 <= tol * (1.0 + abs(f) * 1e-3):
            return z, f, True
        step = 1.0
        while True:
            z_new = z + step * dz
            f_new = bar.value(z_new, t)
            if f_new <= f - 0.25 * step * dec:
                break
            step *= 0.5
            if step < 1e-12:
                return z, f, True
        z, f = z_new, f_new
        if stop is not None and stop(z):
            return z, f, True
    return z, f, False


def find_feasible(blocks, z0, margin: float = 0.0, max_newton: int = 400, mu: float = 10.0):
    """Phase I: find ``z`` with every block ``> margin * I``.

    Returns
    -------
    z : ndarray
    s : float
        Phase-I objective; ``-s`` is the smallest eigenvalue bound.
    info : SolveInfo

    Raises
    ------
    InfeasibleLMIError
        If the phase-I optimum is above ``-margin``.
    """
    nvar = z0.size
    bar = _Barrier(blocks, None, nvar, shift=True)
    info = SolveInfo()
    lam = bar.min_eigs(np.concatenate([z0, [0.0]]))
    s0 = max(0.0, -float(lam.min())) + 1.0
    z = np.concatenate([z0, [s0]])
    t = 1.0

    def done(w):
        return w[-1] < -margin

    while True:
        z, _, ok = _center(bar, z, t, info, max_newton - info.newton_steps, stop=done)
        if done(z):
            # finish centering so phase II starts away from the boundary
            z, _, _ = _center(bar, z, t, info, max_newton - info.newton_steps)
            info.phase1_margin = -float(z[-1])
            return z[:-1], float(z[-1]), info
        if not ok:
            raise SolverStallError("phase I reached the Newton iteration cap")
        # central-path bound: s* >= s(t) - dim / t
        if z[-1] - bar.dim / t > -margin or bar.dim / t < 1e-10:
            lam = bar.min_eigs(np.concatenate([z[:-1], [0.0]]))
            worst = int(np.argmin(lam))
            label = bar.order[worst].label
            raise InfeasibleLMIError(
                f"LMI infeasible; tightest block {label!r} (margin {-z[-1]:.3e})",
                block=worst,
                margin=-float(z[-1]),
            )
        t *= mu


def maximize_logdet(obj, blocks, z0, gap: float = 1e-5, max_newton: int = 600, mu: float = 20.0):
    """Phase II: maximize ``log det obj(z)`` subject to ``blocks(z) > 0``.

    ``z0`` must be strictly feasible for ``blocks`` and ``obj``. The
    objective block acts on the leading ``obj.Fi.shape[0]`` variables.

    Returns
    -------
    z : ndarray
    info : SolveInfo
    """
    bar = _Barrier(blocks, obj, z0.size, shift=False)
    info = SolveInfo()
    z = z0.copy()
    if not np.isfinite(bar.value(z, 1.0)):
        raise ValueError("phase II needs a strictly feasible start")
    t = 1.0
    while True:
        z, _, ok = _center(bar, z, t, info, max_newton - info.newton_steps)
        if not ok:
            raise SolverStallError("phase II reached the Newton iteration cap")
        info.gap = bar.dim / t
        if info.gap < gap:
            break
        t *= mu
    info.objective = float(bar.obj.logdet(z[: bar.obj.p])[0])
    return z, info


def sym_basis(n: int) -> np.ndarray:
    """Basis of symmetric ``n x n`` matrices, upper-triangle order."""
    iu = np.triu_indices(n)
    E = np.zeros((iu[0].size, n, n))
    for k, (i, j) in enumerate(zip(*iu)):
        E[k, i, j] = 1.0
        E[k, j, i] = 1.0
    return E


def sym_to_vec(S: np.ndarray) -> np.ndarray:
    """Coordinates of ``S`` in :func:`sym_basis`."""
    return np.asarray(S)[np.triu_indices(S.shape[0])].copy()


def vec_to_sym(v: np.ndarray, n: int) -> np.ndarray:
    S = np.zeros((n, n))
    S[np.triu_indices(n)] = v
    return S + np.triu(S, 1).T
