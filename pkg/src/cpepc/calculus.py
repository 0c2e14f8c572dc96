"""Gradients and structured Hessians of the rank-1 norm and the fit error.

Both functions act on the raw factor parameters ``theta`` (weights folded
into the factors, no unit-length constraint):

    f(theta) = sum_r prod_n ||u_r^(n)||^2
    c(theta) = ||Y - Yhat(theta)||_F^2

``theta`` stacks ``vec(U^(n))`` column-major, so entry ``(i, r)`` of mode
``n`` sits at ``offset_n + r * I_n + i``.

Every Hessian used by the SQP and Gauss-Newton solvers has the form
``a * Hf + b * Hc`` where ``Hf`` and ``Hc`` are half the exact Hessian of
``f`` and half the Gauss-Newton Hessian of ``c``.  Written in blocks of
``I_n x I_m`` sub-blocks indexed by components ``(r, s)``::

    diagonal block n:      B_n (x) I,   B_n = b Gamma_{-n} + a diag(Gamma_{-n})
    off-diagonal (n, m):   C_nm(r, s) u_s^(n) u_r^(m)'
                           C_nm = b Gamma_{-nm} + 2a I * Gamma_{-nm}

which is a block diagonal matrix plus a rank ``N R^2`` (or ``R^2``) term.
Inverses of the damped matrix go through the Woodbury identity and never
form the full matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .tensor import KruskalModel, mttkrp, reconstruct, _as_array

MATERIALIZE_LIMIT = 60


class DampingTooSmall(np.linalg.LinAlgError):
    """The damped system is singular or indefinite; increase the damping."""


@dataclass(frozen=True)
class ParamLayout:
    """Shape metadata tying a flat parameter vector to factor matrices."""

    shape: tuple[int, ...]
    rank: int

    @classmethod
    def of(cls, m: KruskalModel) -> "ParamLayout":
        return cls(tuple(m.shape), m.rank)

    @property
    def size(self) -> int:
        return self.rank * sum(self.shape)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([I * self.rank for I in self.shape])])

    def split(self, theta: np.ndarray) -> list[np.ndarray]:
        """Views of ``theta`` as ``I_n x R`` matrices (column-major)."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"expected a vector of length {self.size}, got {theta.shape}")
        return [
            theta[self.offsets[n]:self.offsets[n + 1]].reshape((I, self.rank), order="F")
            for n, I in enumerate(self.shape)
        ]

    def join(self, blocks) -> np.ndarray:
        return np.concatenate([np.ravel(B, order="F") for B in blocks])

    def pack(self, m: KruskalModel) -> np.ndarray:
        """Flatten a model, folding the weights into the first factor."""
        return self.join([m.absorbed(0)] + m.factors[1:])

    def unpack(self, theta: np.ndarray) -> KruskalModel:
        return KruskalModel(np.ones(self.rank), [B.copy() for B in self.split(theta)])


def pack(m: KruskalModel) -> np.ndarray:
    return ParamLayout.of(m).pack(m)


def _raw_factors(m: KruskalModel) -> list[np.ndarray]:
    return [m.absorbed(0)] + list(m.factors[1:])


def _grams(factors) -> list[np.ndarray]:
    return [U.T @ U for U in factors]


def _prod_except(grams, skip) -> np.ndarray:
    R = grams[0].shape[0]
    out = np.ones((R, R))
    for k, G in enumerate(grams):
        if k not in skip:
            out = out * G
    return out


def f_value(m: KruskalModel) -> float:
    """Sum of squared Frobenius norms of the rank-1 terms."""
    return m.eta_sq_norm()


def c_value(t, m: KruskalModel) -> float:
    X = _as_array(t)
    return float(np.sum((X - reconstruct(m).data) ** 2))


def grad_f(m: KruskalModel) -> np.ndarray:
    """Gradient of ``f`` with respect to ``theta`` (weights folded into mode 0)."""
    U = _raw_factors(m)
    beta = [np.sum(A * A, axis=0) for A in U]
    blocks = []
    for n, A in enumerate(U):
        b = np.prod([beta[k] for k in range(len(U)) if k != n], axis=0) if len(U) > 1 else np.ones(m.rank)
        blocks.append(2.0 * A * b)
    return ParamLayout.of(m).join(blocks)


def grad_c(t, m: KruskalModel) -> np.ndarray:
    """Gradient of ``||Y - Yhat||^2``: blocks ``2 (U^(n) Gamma_{-n} - G_n)``."""
    U = _raw_factors(m)
    raw = KruskalModel(np.ones(m.rank), U)
    grams = _grams(U)
    blocks = []
    for n, A in enumerate(U):
        blocks.append(2.0 * (A @ _prod_except(grams, {n}) - mttkrp(t, raw, n)))
    return ParamLayout.of(m).join(blocks)


def perm_matrix_RR(R: int) -> np.ndarray:
    """Permutation ``P`` with ``P @ vec(X) = vec(X.T)`` for ``R x R`` matrices."""
    idx = np.arange(R * R).reshape((R, R), order="F")
    P = np.zeros((R * R, R * R))
    P[np.ravel(idx, order="F"), np.ravel(idx.T, order="F")] = 1.0
    return P


def dvec(A: np.ndarray) -> np.ndarray:
    """Diagonal matrix of the column-major vectorization of ``A``."""
    return np.diag(np.ravel(A, order="F"))


@dataclass(frozen=True)
class StructuredHessian:
    """``a * Hf + b * Hc + mu * I`` held in factored form.

    ``factors`` are the raw factor matrices (weights folded in).  Build with
    :func:`hessian`, :func:`hess_f` or :func:`hess_c`.
    """

    factors: tuple[np.ndarray, ...]
    a: float
    b: float
    mu: float = 0.0
    grams: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(np.asarray(U, dtype=float) for U in self.factors))
        object.__setattr__(self, "grams", tuple(_grams(self.factors)))

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout(tuple(U.shape[0] for U in self.factors), self.factors[0].shape[1])

    @property
    def ndim(self) -> int:
        return len(self.factors)

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    def damped(self, mu: float) -> "StructuredHessian":
        return StructuredHessian(self.factors, self.a, self.b, mu)

    # -- structure -----------------------------------------------------
    def B(self, n: int) -> np.ndarray:
        """``I_n``-Kronecker coefficient of the diagonal block ``n`` (undamped)."""
        Gm = _prod_except(self.grams, {n})
        return self.b * Gm + self.a * np.diag(np.diag(Gm))

    def C(self, n: int, m: int) -> np.ndarray:
        """Coupling coefficients of the off-diagonal block ``(n, m)``."""
        Gnm = _prod_except(self.grams, {n, m})
        return self.b * Gnm + 2.0 * self.a * np.diag(np.diag(Gnm))

    def core(self) -> np.ndarray:
        """``C`` before division by ``Gamma_n * Gamma_m`` (R x R)."""
        G = _prod_except(self.grams, set())
        return self.b * G + 2.0 * self.a * np.diag(np.diag(G))

    def mean_diagonal(self) -> float:
        """Mean of the diagonal entries of the undamped matrix."""
        tot = sum(I * np.trace(self.B(n)) for n, I in enumerate(self.layout.shape))
        return float(tot / self.layout.size)

    # -- products --------------------------------------------------------
    def matvec(self, v: np.ndarray) -> np.ndarray:
        lay = self.layout
        V = lay.split(v)
        W = [U.T @ Vn for U, Vn in zip(self.factors, V)]
        out = []
        for n, U in enumerate(self.factors):
            acc = V[n] @ self.B(n) + self.mu * V[n]
            M = np.zeros((self.rank, self.rank))
            for m in range(self.ndim):
                if m != n:
                    M += self.C(n, m) * W[m]
            out.append(acc + U @ M.T)
        return lay.join(out)

    def materialize(self) -> np.ndarray:
        """Dense matrix, built block by block (small instances only)."""
        lay = self.layout
        if lay.size > MATERIALIZE_LIMIT:
            raise ValueError(f"refusing to materialize a {lay.size}-dimensional Hessian")
        R = self.rank
        H = np.zeros((lay.size, lay.size))
        off = lay.offsets
        for n, Un in enumerate(self.factors):
            In = Un.shape[0]
            H[off[n]:off[n + 1], off[n]:off[n + 1]] = np.kron(self.B(n), np.eye(In))
            for m, Um in enumerate(self.factors):
                if m == n:
                    continue
                Im = Um.shape[0]
                Cnm = self.C(n, m)
                blk = np.zeros((In * R, Im * R))
                for r in range(R):
                    for s in range(R):
                        blk[r * In:(r + 1) * In, s * Im:(s + 1) * Im] = Cnm[r, s] * np.outer(Un[:, s], Um[:, r])
                H[off[n]:off[n + 1], off[m]:off[m + 1]] = blk
        return H + self.mu * np.eye(lay.size)

    # -- factored forms used for verification ----------------------------
    def Z(self, n: int) -> np.ndarray:
        return np.kron(np.eye(self.rank), self.factors[n])

    def gk_form(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(Gblk, Z, K)`` with the matrix equal to ``Gblk + Z K Z'`` (+ mu I)."""
        from scipy.linalg import block_diag

        R, N = self.rank, self.ndim
        P = perm_matrix_RR(R)
        Gblk = block_diag(*[np.kron(self.B(n), np.eye(U.shape[0])) for n, U in enumerate(self.factors)])
        Z = block_diag(*[self.Z(n) for n in range(N)])
        K = np.zeros((N * R * R, N * R * R))
        for n in range(N):
            for m in range(N):
                if n != m:
                    K[n * R * R:(n + 1) * R * R, m * R * R:(m + 1) * R * R] = P @ dvec(self.C(n, m))
        return Gblk, Z, K

    def ztilde_form(self) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
        """``(Gtilde blocks, Ztilde, Psi)``; matrix = blkdiag(Gtilde) + Zt Psi Zt'."""
        R = self.rank
        P = perm_matrix_RR(R)
        Psi = P @ dvec(self.core())
        Zt = [self.Z(n) @ dvec(1.0 / self.grams[n]) for n in range(self.ndim)]
        blocks = [
            np.kron(self.B(n), np.eye(U.shape[0])) - Zt[n] @ Psi @ Zt[n].T
            for n, U in enumerate(self.factors)
        ]
        return blocks, np.vstack(Zt), Psi

    # -- inverse ---------------------------------------------------------
    def _phis(self) -> list[np.ndarray]:
        phis = []
        for n in range(self.ndim):
            A = self.B(n) + self.mu * np.eye(self.rank)
            try:
                L = np.linalg.cholesky(A)
            except np.linalg.LinAlgError as exc:
                raise DampingTooSmall(f"diagonal block {n} is not positive definite") from exc
            Li = np.linalg.inv(L)
            phis.append(Li.T @ Li)
        return phis

    @staticmethod
    def _kron_apply(X: np.ndarray, phi: np.ndarray, In: int) -> np.ndarray:
        """``(phi (x) I_In) @ X`` for a matrix ``X`` of stacked ``vec(I_n x R)`` columns."""
        R = phi.shape[0]
        k = X.shape[1]
        X3 = X.reshape((In, R, k), order="F")
        return np.einsum("irk,rs->isk", X3, phi).reshape((In * R, k), order="F")

    def _solve_gk(self, V: np.ndarray) -> np.ndarray:
        """Woodbury over ``Z K Z'`` with ``K`` never inverted (columns of ``V``)."""
        lay = self.layout
        R, N = self.rank, self.ndim
        R2 = R * R
        k = V.shape[1]
        phis = self._phis()
        off = lay.offsets
        Ainv_v = []
        w = []
        for n, U in enumerate(self.factors):
            In = U.shape[0]
            X = self._kron_apply(V[off[n]:off[n + 1]], phis[n], In)
            Ainv_v.append(X)
            # Z_n' x = vec(U' X_n)
            w.append(np.einsum("ir,isk->rsk", U, X.reshape((In, R, k), order="F")).reshape((R2, k), order="F"))
        w = np.vstack(w)
        P = perm_matrix_RR(R)
        inner = np.eye(N * R2)
        Kw = np.zeros_like(w)
        for n in range(N):
            for m in range(N):
                if n == m:
                    continue
                Knm = P * np.ravel(self.C(n, m), order="F")
                inner[n * R2:(n + 1) * R2, m * R2:(m + 1) * R2] = Knm @ np.kron(phis[m], self.grams[m])
                Kw[n * R2:(n + 1) * R2] += Knm @ w[m * R2:(m + 1) * R2]
        try:
            y = np.linalg.solve(inner, Kw)
        except np.linalg.LinAlgError as exc:
            raise DampingTooSmall("low-rank correction system is singular") from exc
        out = []
        for n, U in enumerate(self.factors):
            In = U.shape[0]
            Y3 = y[n * R2:(n + 1) * R2].reshape((R, R, k), order="F")
            ZY = np.einsum("ir,rsk->isk", U, Y3).reshape((In * R, k), order="F")
            out.append(Ainv_v[n] - self._kron_apply(ZY, phis[n], In))
        return np.vstack(out)

    def _block_inverse(self, n: int, phi: np.ndarray, Zt: np.ndarray, Psi: np.ndarray):
        """Callable applying ``(Gtilde_n + mu I)^-1`` to a matrix of columns."""
        U = self.factors[n]
        In, R = U.shape
        if R < In:
            # low-cost path: (A - Zt Psi Zt')^-1 with A^-1 = phi (x) I
            AZ = self._kron_apply(Zt, phi, In)
            W = Zt.T @ AZ
            M = np.eye(R * R) - Psi @ W
            try:
                Minv_Psi = np.linalg.solve(M, Psi)
            except np.linalg.LinAlgError as exc:
                raise DampingTooSmall(f"block {n} correction is singular") from exc
            return lambda X: self._kron_apply(X, phi, In) + AZ @ (Minv_Psi @ (AZ.T @ X))
        Gn = np.kron(self.B(n) + self.mu * np.eye(R), np.eye(In)) - Zt @ Psi @ Zt.T
        try:
            Ginv = np.linalg.inv(Gn)
        except np.linalg.LinAlgError as exc:
            raise DampingTooSmall(f"block {n} is singular") from exc
        return lambda X: Ginv @ X

    def _solve_ztilde(self, V: np.ndarray) -> np.ndarray:
        """Woodbury over ``Ztilde Psi Ztilde'`` with per-block inverses."""
        lay = self.layout
        R = self.rank
        phis = self._phis()
        P = perm_matrix_RR(R)
        Psi = P * np.ravel(self.core(), order="F")
        Zts = [np.kron(np.eye(R), U) * np.ravel(1.0 / G, order="F") for U, G in zip(self.factors, self.grams)]
        inv = [self._block_inverse(n, phis[n], Zts[n], Psi) for n in range(self.ndim)]
        off = lay.offsets
        Ainv_v = np.vstack([inv[n](V[off[n]:off[n + 1]]) for n in range(self.ndim)])
        AinvZ = np.vstack([inv[n](Zts[n]) for n in range(self.ndim)])
        Zt = np.vstack(Zts)
        inner = np.eye(R * R) + Psi @ (Zt.T @ AinvZ)
        try:
            y = np.linalg.solve(inner, Psi @ (Zt.T @ Ainv_v))
        except np.linalg.LinAlgError as exc:
            raise DampingTooSmall("low-rank correction system is singular") from exc
        return Ainv_v - AinvZ @ y

    def _gammas_well_scaled(self) -> bool:
        for G in self.grams:
            d = np.sqrt(np.abs(np.diag(G)))
            denom = np.outer(d, d)
            if np.any(denom == 0.0) or np.min(np.abs(G) / denom) < 1e-8:
                return False
        return True

    def _residual(self, V: np.ndarray, X: np.ndarray) -> np.ndarray:
        return V - np.column_stack([self.matvec(x) for x in X.T])

    def solve(self, v: np.ndarray, method: str = "auto") -> np.ndarray:
        """``(a Hf + b Hc + mu I)^-1 v`` without forming the matrix.

        ``v`` is a vector or a matrix whose columns are solved together.
        ``method`` is ``"ztilde"`` (Woodbury over the ``R^2`` correction
        with per-mode block inverses), ``"gk"`` (Woodbury over the
        ``N R^2`` correction around the Kronecker blocks) or ``"auto"``.
        Auto uses ``ztilde`` unless some Gram matrix has (near) zero
        entries, which the divided form cannot represent, and falls back to
        ``gk`` when the result fails a residual check.  A step of iterative
        refinement is applied when the residual is not already small.
        """
        v = np.asarray(v, dtype=float)
        vec = v.ndim == 1
        V = v[:, None] if vec else v
        if method not in ("auto", "gk", "ztilde"):
            raise ValueError(f"unknown method {method!r}")
        use = method
        if method == "auto":
            use = "ztilde" if self._gammas_well_scaled() else "gk"
        inner = self._solve_ztilde if use == "ztilde" else self._solve_gk
        X = inner(V)
        vnorm = max(np.linalg.norm(V), 1e-300)
        Rm = self._residual(V, X)
        rn = np.linalg.norm(Rm)
        if method == "auto" and use == "ztilde" and not rn <= 1e-6 * vnorm:
            inner = self._solve_gk
            X = inner(V)
            Rm = self._residual(V, X)
            rn = np.linalg.norm(Rm)
        if not np.all(np.isfinite(X)):
            raise DampingTooSmall("non-finite solution")
        if rn > 1e-12 * vnorm:
            X = X + inner(Rm)
            if not np.all(np.isfinite(X)):
                raise DampingTooSmall("non-finite solution")
        return X[:, 0] if vec else X


def hessian(m: KruskalModel, a: float, b: float, mu: float = 0.0) -> StructuredHessian:
    """``a * Hf + b * Hc + mu I`` where ``Hf``/``Hc`` are half the curvature of f/c."""
    return StructuredHessian(tuple(_raw_factors(m)), float(a), float(b), float(mu))


def hess_f(m: KruskalModel) -> StructuredHessian:
    """Exact Hessian of ``f``."""
    return hessian(m, 2.0, 0.0)


def hess_c(m: KruskalModel) -> StructuredHessian:
    """Gauss-Newton Hessian ``2 J'J`` of ``c``."""
    return hessian(m, 0.0, 2.0)


def lagrangian_hessian(m: KruskalModel, lam: float, mu: float = 0.0) -> StructuredHessian:
    """``Hess f + lam * Hess c`` (Gauss-Newton for ``c``) plus ``mu I``."""
    return hessian(m, 2.0, 2.0 * lam, mu)


def inv_damped_hessian_apply(h: StructuredHessian, v: np.ndarray) -> np.ndarray:
    return h.solve(v)


def solve_kkt_system(h: StructuredHessian, g_obj: np.ndarray, g_con: np.ndarray, residual: float):
    """Newton step of the equality-constrained Lagrangian system.

    Solves ``[[H, g_con], [g_con', 0]] [d; lam] = -[g_obj; residual]``
    and returns ``(d, lam)``.  ``residual`` is ``c(theta) - target``.
    """
    sol = h.solve(np.column_stack([g_con, g_obj]))
    Hg, Hf = sol[:, 0], sol[:, 1]
    curv = float(g_con @ Hg)
    if not curv > 0.0 or not np.isfinite(curv):
        raise DampingTooSmall("no positive curvature along the constraint gradient")
    lam = (residual - float(g_con @ Hf)) / curv
    d = -(Hf + lam * Hg)
    return d, lam
