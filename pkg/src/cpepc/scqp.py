"""Closed-form quadratic programs over spheres and balls.

Every solver here works in one sign convention::

    minimize  0.5 * z' diag(s) z + c' z    subject to  ||z|| = radius  (or <=)

Forms written as ``z' S z - 2 b' z`` map onto it with ``c = -b``.  The
multiplier ``lam`` returned alongside a solution satisfies the KKT system
``(diag(s) + lam I) z = -c`` with ``diag(s) + lam I`` positive semidefinite.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

GROUP_RTOL = 1e-12
SECULAR_RTOL = 1e-13


class InfeasibleBoundError(ValueError):
    """The requested error bound is below the attainable residual."""


@dataclass(frozen=True)
class ScqpProblem:
    """Diagonal quadratic ``s``, linear term ``c`` and a radius.

    ``s`` need not be sorted; the solvers sort internally and map back.
    """

    s: np.ndarray
    c: np.ndarray
    radius: float = 1.0

    def __post_init__(self):
        s = np.array(self.s, dtype=float).ravel()
        c = np.array(self.c, dtype=float).ravel()
        if s.size == 0 or s.shape != c.shape:
            raise ValueError(f"s and c must be nonempty and equal length, got {s.shape}, {c.shape}")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(c)) and np.isfinite(self.radius)):
            raise ValueError("non-finite SCQP data")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "radius", float(self.radius))

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * np.dot(self.s * z, z) + np.dot(self.c, z))


def _smallest_group(s_sorted: np.ndarray) -> int:
    """Number of leading entries tied with the smallest eigenvalue."""
    s1 = s_sorted[0]
    tol = GROUP_RTOL * max(1.0, abs(s1))
    return int(np.searchsorted(s_sorted - s1, tol, side="right"))


def _secular_root(gaps: np.ndarray, c2: np.ndarray, radius: float) -> float:
    """Root ``t > 0`` of ``sum c2 / (gaps + t)**2 = radius**2``.

    ``gaps`` are offsets from the smallest eigenvalue (>= 0).  The root is
    bracketed by ``[||c_lead|| / radius, ||c|| / radius]``; safeguarded Newton
    on ``1/radius - 1/||z(t)||`` shrinks the bracket.
    """
    r2 = radius * radius
    lo = np.sqrt(np.sum(c2[gaps == 0.0])) / radius
    hi = np.sqrt(np.sum(c2)) / radius

    t = hi
    for _ in range(500):
        w = c2 / (gaps + t) ** 2
        p = np.sum(w)
        if abs(p - r2) <= SECULAR_RTOL * r2:
            return t
        if p > r2:
            lo = t
        else:
            hi = t
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            return t
        dphi = -2.0 * np.sum(w / (gaps + t))
        nz = np.sqrt(p)
        psi = 1.0 / radius - 1.0 / nz
        dpsi = 0.5 * dphi / (nz * p)
        t_new = t - psi / dpsi if dpsi != 0.0 else np.nan
        if not (np.isfinite(t_new) and lo < t_new < hi):
            t_new = np.sqrt(lo * hi) if lo > 0 and hi > 4 * lo else 0.5 * (lo + hi)
        t = t_new
    return t


def solve_sphere(p: ScqpProblem) -> tuple[np.ndarray, float]:
    """Global minimiser on the sphere ``||z|| = radius`` and its multiplier.

    In the hard case (no linear weight on the smallest-eigenvalue subspace
    and the remaining terms leave norm to spare) the leftover norm goes to
    the first coordinate of that subspace, with a positive sign.
    """
    order = np.argsort(p.s, kind="stable")
    s = p.s[order]
    c = p.c[order]
    radius = p.radius
    K = s.size
    L = _smallest_group(s)
    s1 = s[0]
    gaps = s - s1
    gaps[:L] = 0.0
    c2 = c * c
    cnorm = np.sqrt(np.sum(c2))
    lead = np.sqrt(np.sum(c2[:L]))

    z = np.zeros(K)
    hard = lead <= 1e-14 * cnorm or cnorm == 0.0
    if hard:
        if L < K:
            rest = -c[L:] / gaps[L:]
            d2 = float(np.dot(rest, rest))
        else:
            rest = np.zeros(0)
            d2 = 0.0
        if d2 <= radius * radius:
            z[L:] = rest
            z[0] = np.sqrt(max(radius * radius - d2, 0.0))
            lam = -s1
            out = np.empty(K)
            out[order] = z
            return out, float(lam)
        c2 = c2.copy()
        c2[:L] = 0.0
    t = _secular_root(gaps, c2, radius)
    z = -c / (gaps + t)
    if hard:
        z[:L] = 0.0
    nz = np.linalg.norm(z)
    if nz > 0:
        z *= radius / nz
    lam = t - s1
    out = np.empty(K)
    out[order] = z
    return out, float(lam)


def solve_ball(p: ScqpProblem) -> tuple[np.ndarray, float]:
    """Minimiser over the ball ``||z|| <= radius`` for strictly positive ``s``.

    Returns the solution and a nonnegative multiplier (zero when interior).
    """
    if np.any(p.s <= 0):
        raise ValueError("solve_ball needs a strictly convex objective (s > 0)")
    z = -p.c / p.s
    if np.linalg.norm(z) <= p.radius:
        return z, 0.0
    z, lam = solve_sphere(p)
    return z, max(lam, 0.0)


def reduce_identical(p: ScqpProblem) -> tuple[ScqpProblem, Callable[[np.ndarray], np.ndarray]]:
    """Collapse groups of equal eigenvalues into one coordinate each.

    Returns the reduced problem (strictly increasing ``s``, ``c_j`` the norm
    of the group's linear terms) and a map from a reduced solution back to
    the full coordinates.
    """
    order = np.argsort(p.s, kind="stable")
    s = p.s[order]
    c = p.c[order]
    groups: list[list[int]] = []
    for k in range(s.size):
        if groups and abs(s[k] - s[groups[-1][0]]) <= GROUP_RTOL * max(1.0, abs(s[groups[-1][0]])):
            groups[-1].append(k)
        else:
            groups.append([k])
    s_red = np.array([s[g[0]] for g in groups])
    c_red = np.array([np.linalg.norm(c[g]) for g in groups])
    reduced = ScqpProblem(s_red, c_red, p.radius)
    K = s.size

    def expand(z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        x = np.zeros(K)
        for j, g in enumerate(groups):
            if c_red[j] != 0.0:
                x[g] = (z[j] / c_red[j]) * c[g]
            elif j == 0:
                x[g[0]] = z[0]
        out = np.empty(K)
        out[order] = x
        return out

    return reduced, expand


def solve_matrix_sphere(Q: np.ndarray, B: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Minimise ``0.5 tr(X'QX) + tr(B'X)`` over ``||X||_F = radius``.

    ``Q`` is symmetric positive semidefinite (K x K) and ``B`` is K x R.
    The problem is rotated into the eigenbasis of ``Q``, where every row of
    the rotated variable is parallel to the matching row of ``U'B``; only
    the row norms remain, a K-dimensional sphere problem.
    """
    Q = np.asarray(Q, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if Q.shape != (B.shape[0], B.shape[0]):
        raise ValueError(f"Q {Q.shape} and B {B.shape} do not conform")
    if np.max(np.abs(Q - Q.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(Q))):
        raise ValueError("Q is not symmetric")
    sig, U = np.linalg.eigh(0.5 * (Q + Q.T))
    Bt = U.T @ B
    cvec = np.linalg.norm(Bt, axis=1)
    z, _ = solve_sphere(ScqpProblem(sig, cvec, radius))
    Xt = np.zeros_like(Bt)
    nz = cvec > 0
    Xt[nz] = (z[nz] / cvec[nz])[:, None] * Bt[nz]
    for i in np.flatnonzero(~nz):
        Xt[i, 0] = z[i]
    return U @ Xt


@dataclass(frozen=True)
class BoundedRegression:
    """``min ||x||^2  s.t.  ||y - A x|| <= delta``."""

    A: np.ndarray
    y: np.ndarray
    delta: float

    def __post_init__(self):
        A = np.array(self.A, dtype=float, ndmin=2)
        y = np.array(self.y, dtype=float).ravel()
        if A.shape[0] != y.size:
            raise ValueError(f"A has {A.shape[0]} rows, y has {y.size} entries")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "delta", float(self.delta))

    def projection_residual(self) -> float:
        """Norm of the part of ``y`` outside the column space of ``A``."""
        U, s, _ = _compressed_svd(self.A)
        return float(np.linalg.norm(self.y - U @ (U.T @ self.y)))


def _compressed_svd(A: np.ndarray):
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    tol = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    keep = s > tol
    return U[:, keep], s[keep], Vt[keep].T


def solve_bounded_regression(p: BoundedRegression) -> np.ndarray:
    """Minimum-norm ``x`` whose regression error does not exceed ``delta``.

    Rank-deficient ``A`` is handled by compressing onto its column space.
    Raises :class:`InfeasibleBoundError` when ``delta`` is below the
    distance from ``y`` to the column space of ``A``.
    """
    A, y, delta = p.A, p.y, p.delta
    K = A.shape[1]
    ynorm = float(np.linalg.norm(y))
    if delta >= ynorm:
        return np.zeros(K)
    U, s, V = _compressed_svd(A)
    yh = U.T @ y
    perp2 = max(ynorm**2 - float(yh @ yh), 0.0)
    perp2 = min(perp2, float(np.sum((y - U @ yh) ** 2)))
    slack = delta * delta - perp2
    if slack < -1e-12 * ynorm**2:
        raise InfeasibleBoundError(
            f"delta={delta:g} is below the projection residual {np.sqrt(perp2):g}"
        )
    dh = np.sqrt(max(slack, 0.0))
    if dh == 0.0:
        return V @ (yh / s)
    # x = V diag(1/s) (yh - dh z); ||x||^2 is a quadratic in z on the unit sphere
    inv2 = s ** -2.0
    z, _ = solve_sphere(ScqpProblem(2.0 * dh * inv2, -2.0 * inv2 * yh, 1.0))
    return V @ ((yh - dh * z) / s)
