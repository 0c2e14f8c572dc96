"""Synthetic tensors: collinear factors, multiplication tensors and noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import DenseTensor, KruskalModel, reconstruct

RANGE_RETRIES = 1000


class InfeasibleGramError(ValueError):
    """The requested correlation pattern is not a valid Gram matrix."""


def splitmix64(seed: int, index: int) -> int:
    """Deterministic 64-bit mix of a master seed and a trial index."""
    mask = (1 << 64) - 1
    z = (int(seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


def _target_gram(block: int, corr, rng) -> np.ndarray:
    if np.ndim(corr) == 0:
        G = np.full((block, block), float(corr))
        np.fill_diagonal(G, 1.0)
        ev = np.linalg.eigvalsh(G)[0] if block else 1.0
        if ev <= 0:
            raise InfeasibleGramError(
                f"correlation {float(corr)} for {block} columns gives a Gram matrix with minimum eigenvalue {ev:.3g}"
            )
        return G
    lo, hi = (float(x) for x in corr)
    if not -1.0 < lo <= hi < 1.0:
        raise ValueError(f"correlation range must lie in (-1, 1), got {corr}")
    iu = np.triu_indices(block, 1)
    ev = -np.inf
    for _ in range(RANGE_RETRIES):
        G = np.eye(block)
        G[iu] = rng.uniform(lo, hi, size=len(iu[0]))
        G = np.triu(G) + np.triu(G, 1).T
        ev = np.linalg.eigvalsh(G)[0]
        if ev > 0:
            return G
    raise InfeasibleGramError(
        f"no positive definite Gram matrix found with correlations in {corr} "
        f"after {RANGE_RETRIES} draws (last minimum eigenvalue {ev:.3g})"
    )


def gen_collinear_factors(I: int, R: int, corr=0.99, block: int | None = None, seed=None) -> np.ndarray:
    """``I x R`` matrix with unit columns whose first ``block`` columns have a prescribed Gram.

    ``corr`` is either one correlation shared by every pair in the block or
    a ``(lo, hi)`` range sampled per pair.  The block is realised exactly as
    ``Q L'`` with ``L`` the Cholesky factor of the target Gram and ``Q`` a
    random orthonormal basis.  Other columns are unit-normalized Gaussian.
    """
    rng = np.random.default_rng(seed)
    block = min(I, R) if block is None else int(block)
    if not 0 <= block <= R:
        raise ValueError(f"block must be in [0, {R}], got {block}")
    if block > I:
        raise ValueError(f"a {block}-column Gram needs I >= {block}, got I = {I}")
    U = np.empty((I, R))
    if block:
        G = _target_gram(block, corr, rng)
        L = np.linalg.cholesky(G)
        Q, Rq = np.linalg.qr(rng.standard_normal((I, block)))
        Q = Q * np.sign(np.diag(Rq))
        U[:, :block] = Q @ L.T
    rest = rng.standard_normal((I, R - block))
    U[:, block:] = rest / np.linalg.norm(rest, axis=0)
    return U


@dataclass(frozen=True)
class MatmulSpec:
    m: int
    n: int
    p: int
    rank: int | None = None

    def __post_init__(self):
        if min(self.m, self.n, self.p) < 1:
            raise ValueError("m, n, p must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.m * self.n, self.n * self.p, self.p * self.m)


def gen_matmul_tensor(spec: MatmulSpec) -> DenseTensor:
    """0/1 tensor of the product of an ``m x n`` and an ``n x p`` matrix.

    Contracting mode 1 with ``vec(A')`` and mode 2 with ``vec(B')`` gives
    ``vec(AB)`` (column-major ``vec``).
    """
    m, n, p = spec.m, spec.n, spec.p
    Y = np.zeros(spec.shape)
    for i in range(m):
        for j in range(n):
            for k in range(p):
                # A[i,j] sits at vec(A')[j + n i], B[j,k] at vec(B')[k + p j],
                # (AB)[i,k] at vec(AB)[i + m k]
                Y[j + n * i, k + p * j, i + m * k] = 1.0
    return DenseTensor(Y)


def add_noise(t, snr_db: float, seed=None) -> DenseTensor:
    """Add Gaussian noise scaled so the tensor-to-noise energy ratio is exactly ``snr_db``."""
    X = np.asarray(t, dtype=float)
    if np.isinf(snr_db) and snr_db > 0:
        return t if isinstance(t, DenseTensor) else DenseTensor(X)
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    tn = float(np.linalg.norm(X.ravel()))
    if tn == 0.0:
        raise ValueError("cannot set an SNR for a zero tensor")
    N = np.random.default_rng(seed).standard_normal(X.shape)
    N *= tn / (np.linalg.norm(N.ravel()) * 10.0 ** (snr_db / 20.0))
    return DenseTensor(X + N)


def realized_snr_db(clean, noisy) -> float:
    C = np.asarray(clean, dtype=float)
    D = np.asarray(noisy, dtype=float) - C
    return float(10.0 * np.log10(np.sum(C * C) / np.sum(D * D)))


SCENARIOS = ("ex1", "ex1b", "ex2", "ex4", "ex_bcd", "ex_matmul", "custom")


def gen_benchmark_tensor(scenario: str, seed=None, *, size: int | None = None, rank: int | None = None,
                     corr=None, weights=None, matmul=(2, 2, 2)) -> tuple[DenseTensor, KruskalModel | None]:
    """Noise-free benchmark tensor and its generating model.

    ``ex1``/``ex2``: 4x4x4, rank 5, first four columns at correlation 0.99,
    unit weights.  ``ex1b``: the same with weights ``10 r``.  ``ex4``: cubic
    ``size`` (4, 7 or 12) with rank 5, 10 or 15 and the first ``size``
    columns collinear.  ``ex_bcd``: sum of two 6x6x6 rank-6 blocks with
    correlations drawn from [0.95, 0.999] in each block.  ``ex_matmul``:
    multiplication tensor (no generating model).
    """
    rng = np.random.default_rng(seed)
    if scenario in ("ex1", "ex1b", "ex2"):
        I, R = size or 4, rank or 5
        c = 0.99 if corr is None else corr
        factors = [gen_collinear_factors(I, R, c, block=min(I, R), seed=rng) for _ in range(3)]
        if weights is None:
            weights = 10.0 * np.arange(1, R + 1) if scenario == "ex1b" else np.ones(R)
        model = KruskalModel(np.asarray(weights, dtype=float), factors)
    elif scenario == "ex4":
        I = size or 4
        defaults = {4: 5, 7: 10, 12: 15}
        R = rank or defaults.get(I)
        if R is None:
            raise ValueError(f"ex4 needs an explicit rank for size {I}")
        c = 0.99 if corr is None else corr
        factors = [gen_collinear_factors(I, R, c, block=min(I, R), seed=rng) for _ in range(3)]
        model = KruskalModel(np.ones(R) if weights is None else np.asarray(weights, float), factors)
    elif scenario == "ex_bcd":
        I, Rb = size or 6, rank // 2 if rank else 6
        c = (0.95, 0.999) if corr is None else corr
        blocks = [[gen_collinear_factors(I, Rb, c, block=min(I, Rb), seed=rng) for _ in range(3)] for _ in range(2)]
        factors = [np.hstack([blocks[0][n], blocks[1][n]]) for n in range(3)]
        model = KruskalModel(np.ones(2 * Rb) if weights is None else np.asarray(weights, float), factors)
    elif scenario == "ex_matmul":
        return gen_matmul_tensor(MatmulSpec(*matmul)), None
    elif scenario == "custom":
        if size is None or rank is None:
            raise ValueError("custom scenario needs size and rank")
        c = 0.0 if corr is None else corr
        factors = [gen_collinear_factors(size, rank, c, block=min(size, rank), seed=rng) for _ in range(3)]
        model = KruskalModel(np.ones(rank) if weights is None else np.asarray(weights, float), factors)
    else:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    return reconstruct(model), model
