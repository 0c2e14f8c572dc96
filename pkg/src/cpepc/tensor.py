"""Dense tensors, Kruskal models and the multilinear kernels used by every solver.

Layout convention: the first index runs fastest (column-major generalisation).
``unfold(t, n)`` puts index ``i_n`` on the rows and the remaining indices, in
increasing mode order, on the columns.  ``khatri_rao_skip`` multiplies the
factors in decreasing mode order so that ``unfold(reconstruct(m), n)`` equals
``U_eta[n] @ khatri_rao_skip(m.factors, n).T`` exactly.

Modes are 0-based throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor, model or factor shapes disagree."""


def _as_array(t) -> np.ndarray:
    if isinstance(t, DenseTensor):
        return t.data
    return np.asarray(t, dtype=float)


@dataclass(frozen=True)
class DenseTensor:
    """Real order-N tensor stored in double precision.

    The buffer is kept read-only so a tensor can be shared between runs
    without defensive copies.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim < 1:
            raise ShapeError("a tensor needs at least one mode")
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"every extent must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_buffer(cls, shape: Sequence[int], buffer) -> "DenseTensor":
        """Build a tensor from a flat buffer in first-index-fastest order."""
        shape = tuple(int(s) for s in shape)
        flat = np.asarray(buffer, dtype=np.float64).ravel()
        if flat.size != int(np.prod(shape)):
            raise ShapeError(
                f"buffer has {flat.size} values, shape {shape} needs {int(np.prod(shape))}"
            )
        return cls(flat.reshape(shape, order="F"))

    def to_buffer(self) -> np.ndarray:
        """Flat copy of the data in first-index-fastest order."""
        return np.ravel(self.data, order="F").copy()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def norm(self) -> float:
        return float(np.linalg.norm(self.data.ravel()))

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass
class KruskalModel:
    """Weighted sum of rank-1 terms ``sum_r w_r u_r^(1) o ... o u_r^(N)``.

    ``factors[n]`` has shape ``(I_n, R)``.  Columns are not forced to unit
    norm; call :func:`normalize` for the canonical form.
    """

    weights: np.ndarray
    factors: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64).ravel()
        self.factors = [np.array(U, dtype=np.float64, ndmin=2) for U in self.factors]
        if not self.factors:
            raise ShapeError("a Kruskal model needs at least one factor")
        R = self.weights.size
        if R < 1:
            raise ShapeError("rank must be >= 1")
        for n, U in enumerate(self.factors):
            if U.ndim != 2 or U.shape[1] != R:
                raise ShapeError(f"factor {n} has shape {U.shape}, expected (I, {R})")

    @classmethod
    def from_factors(cls, factors: Sequence[np.ndarray]) -> "KruskalModel":
        R = np.asarray(factors[0]).shape[1]
        return cls(np.ones(R), list(factors))

    @property
    def rank(self) -> int:
        return self.weights.size

    @property
    def ndim(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(U.shape[0] for U in self.factors)

    def copy(self) -> "KruskalModel":
        return KruskalModel(self.weights.copy(), [U.copy() for U in self.factors])

    def component_norms(self) -> np.ndarray:
        """Frobenius norm of every rank-1 term, whatever the internal scaling."""
        norms = np.abs(self.weights).copy()
        for U in self.factors:
            norms *= np.linalg.norm(U, axis=0)
        return norms

    def eta_sq_norm(self) -> float:
        """Sum of squared Frobenius norms of the rank-1 terms."""
        return float(np.sum(self.component_norms() ** 2))

    def absorbed(self, mode: int) -> np.ndarray:
        """Factor ``mode`` with the weights folded into its columns."""
        return self.factors[mode] * self.weights


def _check_mode(ndim: int, mode: int) -> int:
    if not 0 <= mode < ndim:
        raise IndexError(f"mode {mode} out of range for an order-{ndim} tensor")
    return mode


def unfold(t, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, shape ``(I_n, prod of the other extents)``."""
    X = _as_array(t)
    _check_mode(X.ndim, mode)
    return np.reshape(np.moveaxis(X, mode, 0), (X.shape[mode], -1), order="F")


def fold(M: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    shape = tuple(shape)
    _check_mode(len(shape), mode)
    rest = shape[:mode] + shape[mode + 1:]
    X = np.reshape(np.asarray(M, dtype=float), (shape[mode],) + rest, order="F")
    return np.moveaxis(X, 0, mode)


def khatri_rao(matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Columnwise Kronecker product ``A_0 (.) A_1 (.) ...`` (last index fastest)."""
    matrices = [np.asarray(A, dtype=float) for A in matrices]
    R = matrices[0].shape[1]
    if any(A.shape[1] != R for A in matrices):
        raise ShapeError("all matrices need the same number of columns")
    out = matrices[0]
    for A in matrices[1:]:
        out = (out[:, None, :] * A[None, :, :]).reshape(-1, R)
    return out


def khatri_rao_skip(factors: Sequence[np.ndarray], skip: int) -> np.ndarray:
    """Khatri-Rao product of every factor except ``skip``, in decreasing mode order."""
    _check_mode(len(factors), skip)
    R = np.asarray(factors[0]).shape[1]
    if any(np.asarray(U).shape[1] != R for U in factors):
        raise ShapeError("mismatched column counts")
    rest = [factors[k] for k in reversed(range(len(factors))) if k != skip]
    if not rest:
        return np.ones((1, R))
    return khatri_rao(rest)


def _check_model(X: np.ndarray, m: KruskalModel):
    if X.shape != m.shape:
        raise ShapeError(f"tensor shape {X.shape} does not match model shape {m.shape}")


def mttkrp(t, m: KruskalModel, mode: int) -> np.ndarray:
    """``unfold(t, mode) @ khatri_rao_skip(m.factors, mode)`` by progressive contraction.

    The Khatri-Rao product is never formed; the largest remaining mode is
    contracted first.
    """
    X = _as_array(t)
    _check_model(X, m)
    _check_mode(X.ndim, mode)
    R = m.rank
    order = sorted((k for k in range(X.ndim) if k != mode), key=lambda k: -X.shape[k])
    if not order:
        return X.reshape(-1, 1) * np.ones((1, R))
    axes = list(range(X.ndim))
    k0 = order[0]
    W = np.tensordot(X, m.factors[k0], axes=(k0, 0))
    axes.remove(k0)
    # W carries the surviving modes in ``axes`` plus a trailing rank axis
    for k in order[1:]:
        pos = axes.index(k)
        W = np.moveaxis(W, pos, 0)
        W = np.einsum("i...r,ir->...r", W, m.factors[k])
        axes.remove(k)
    return W


def gram_skip(m: KruskalModel, skip: int) -> np.ndarray:
    """Hadamard product of the factor Grams over every mode but ``skip``."""
    _check_mode(m.ndim, skip)
    G = np.ones((m.rank, m.rank))
    for k, U in enumerate(m.factors):
        if k != skip:
            G *= U.T @ U
    return G


def gram_full(m: KruskalModel) -> np.ndarray:
    G = np.ones((m.rank, m.rank))
    for U in m.factors:
        G *= U.T @ U
    return G


def reconstruct(m: KruskalModel) -> DenseTensor:
    shape = m.shape
    T = khatri_rao_skip(m.factors, 0)
    return DenseTensor(fold(m.absorbed(0) @ T.T, 0, shape))


def residual_norm(t, m: KruskalModel, fast: bool = False) -> float:
    """``||Y - Yhat||_F``.

    With ``fast=True`` the error is expanded through Gram and MTTKRP terms
    and never reconstructs the model; the squared value is clamped at zero
    when cancellation drives it negative.
    """
    X = _as_array(t)
    _check_model(X, m)
    if not fast:
        return float(np.linalg.norm((X - reconstruct(m).data).ravel()))
    n = X.ndim - 1
    G = mttkrp(X, m, n)
    Ue = m.absorbed(n)
    sq = (
        np.dot(X.ravel(), X.ravel())
        + np.sum((Ue @ gram_skip(m, n)) * Ue)
        - 2.0 * np.sum(G * Ue)
    )
    return float(np.sqrt(max(sq, 0.0)))


def relative_error(t, m: KruskalModel, fast: bool = False) -> float:
    X = _as_array(t)
    nrm = float(np.linalg.norm(X.ravel()))
    if nrm == 0.0:
        raise ValueError("relative error is undefined for a zero tensor")
    return residual_norm(X, m, fast=fast) / nrm


def normalize(m: KruskalModel) -> KruskalModel:
    """Unit-norm columns with nonnegative weights; reconstruction unchanged.

    A zero column sets its weight to 0 and is replaced by the first
    canonical basis vector.
    """
    weights = m.weights.copy()
    factors = []
    for U in m.factors:
        norms = np.linalg.norm(U, axis=0)
        zero = norms == 0.0
        V = U / np.where(zero, 1.0, norms)
        V[:, zero] = 0.0
        V[0, zero] = 1.0
        weights = weights * norms
        factors.append(V)
    neg = weights < 0
    if np.any(neg):
        factors[0][:, neg] *= -1.0
        weights = np.abs(weights)
    return KruskalModel(weights, factors)


def balance(m: KruskalModel) -> KruskalModel:
    """Fold the weights in so every mode carries column norm ``eta_r**(1/N)``.

    The returned model has unit weights.  Signs of negative weights are
    pushed into the first factor.
    """
    nm = normalize(m)
    N = nm.ndim
    scale = nm.weights ** (1.0 / N)
    factors = [U * scale for U in nm.factors]
    return KruskalModel(np.ones(nm.rank), factors)
