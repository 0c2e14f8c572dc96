"""Baseline CP solvers: alternating least squares and damped Gauss-Newton (fLM)."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .calculus import DampingTooSmall, ParamLayout, grad_c, hessian
from .tensor import (
    DenseTensor,
    KruskalModel,
    ShapeError,
    _as_array,
    balance,
    gram_skip,
    mttkrp,
    normalize,
    residual_norm,
)

# relative error treated as an exact fit: damping overflow below it is
# rounding noise, not a stall
EXACT_FIT = 1e-13

TRACE_HEADER = ("iter", "rel_error", "eta_sq_norm", "mu", "lambda", "seconds")


@dataclass
class SolverOptions:
    """Stopping and damping knobs shared by the iterative solvers.

    ``mu0=None`` picks the initial damping from the Hessian diagonal.
    ``mu_tikh`` adds ``mu_tikh * ||theta||^2`` to the fLM objective and is
    multiplied by ``tikh_decay`` after every accepted step.
    """

    max_iters: int = 1000
    tol_rel_change: float = 1e-12
    window: int = 10
    mu0: float | None = None
    mu_tikh: float = 0.0
    tikh_decay: float = 1.0
    target_error: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol_rel_change > 0:
            raise ValueError("tol_rel_change must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.mu0 is not None and not self.mu0 > 0:
            raise ValueError("mu0 must be positive")
        if self.mu_tikh < 0:
            raise ValueError("mu_tikh must be nonnegative")


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    rel_error: float
    eta_sq_norm: float
    mu: float = float("nan")
    lam: float = float("nan")
    seconds: float = 0.0
    stage: str = ""


@dataclass
class RunTrace:
    """Per-iteration history of a run plus status flags."""

    records: list[TraceRecord] = field(default_factory=list)
    stalled: bool = False
    regularized: bool = False
    flags: list[str] = field(default_factory=list)

    def add(self, rel_error: float, eta_sq_norm: float, mu=float("nan"), lam=float("nan"),
            seconds: float = 0.0, stage: str = "") -> TraceRecord:
        if not np.isfinite(rel_error):
            raise ValueError("relative error must be finite")
        it = self.records[-1].iter + 1 if self.records else 0
        rec = TraceRecord(it, float(rel_error), float(eta_sq_norm), float(mu), float(lam), float(seconds), stage)
        self.records.append(rec)
        return rec

    def extend(self, other: "RunTrace") -> None:
        """Append ``other`` with its iteration indices shifted to follow ours."""
        base = self.records[-1].iter + 1 if self.records else 0
        t0 = self.records[-1].seconds if self.records else 0.0
        start = other.records[0].iter if other.records else 0
        for r in other.records:
            self.records.append(
                TraceRecord(base + r.iter - start, r.rel_error, r.eta_sq_norm, r.mu, r.lam, t0 + r.seconds, r.stage)
            )
        self.stalled = self.stalled or other.stalled
        self.regularized = self.regularized or other.regularized
        self.flags.extend(other.flags)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def rel_errors(self) -> np.ndarray:
        return np.array([r.rel_error for r in self.records])

    @property
    def eta_sq_norms(self) -> np.ndarray:
        return np.array([r.eta_sq_norm for r in self.records])

    @property
    def final_error(self) -> float:
        return self.records[-1].rel_error if self.records else float("nan")

    def best_iter(self) -> int:
        errs = self.rel_errors
        return int(self.records[int(np.argmin(errs))].iter) if len(errs) else -1

    def to_csv(self, target=None) -> str | None:
        """Write ``iter,rel_error,eta_sq_norm,mu,lambda,seconds`` rows.

        ``target`` may be a path or a text file object; with ``None`` the
        CSV text is returned.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in self.records:
            w.writerow([r.iter, repr(r.rel_error), repr(r.eta_sq_norm), repr(r.mu), repr(r.lam), repr(r.seconds)])
        text = buf.getvalue()
        if target is None:
            return text
        if hasattr(target, "write"):
            target.write(text)
        else:
            with open(target, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return None


def _tensor_norm(X: np.ndarray) -> float:
    nrm = float(np.linalg.norm(X.ravel()))
    if nrm == 0.0:
        raise ValueError("cannot decompose a zero tensor")
    return nrm


def _check_init(X: np.ndarray, init: KruskalModel):
    if tuple(X.shape) != init.shape:
        raise ShapeError(f"initial model shape {init.shape} does not match tensor {X.shape}")


def _converged(errs: list[float], opts: SolverOptions) -> bool:
    if opts.target_error is not None and errs[-1] <= opts.target_error:
        return True
    if len(errs) > opts.window:
        return errs[-opts.window - 1] - errs[-1] < opts.tol_rel_change
    return False


def init_identity_ones(shape: Iterable[int], rank: int) -> KruskalModel:
    """Identity columns padded with all-ones columns, the same for every mode.

    For ``I = R - 1`` this is ``[I_I, 1]``.  When ``R <= I`` the first ``R``
    identity columns are used.
    """
    factors = []
    for I in shape:
        k = min(I, rank)
        U = np.ones((I, rank))
        U[:, :k] = np.eye(I)[:, :k]
        factors.append(U)
    return normalize(KruskalModel(np.ones(rank), factors))


def random_init(shape: Iterable[int], rank: int, rng) -> KruskalModel:
    """Gaussian factors with unit columns and unit weights."""
    rng = np.random.default_rng(rng)
    factors = [rng.standard_normal((I, rank)) for I in shape]
    return normalize(KruskalModel(np.ones(rank), factors))


def als_mode_update(X: np.ndarray, m: KruskalModel, mode: int) -> tuple[KruskalModel, bool]:
    """Least-squares update of one factor; returns the normalized model and a regularization flag.

    ``m`` is expected to have unit columns in every mode but ``mode``.
    """
    G = mttkrp(X, m, mode)
    Gam = gram_skip(m, mode)
    regularized = False
    try:
        L = np.linalg.cholesky(Gam)
    except np.linalg.LinAlgError:
        R = Gam.shape[0]
        mu = 1e-12 * max(np.trace(Gam), np.finfo(float).tiny) / R
        L = np.linalg.cholesky(Gam + mu * np.eye(R))
        regularized = True
    # U = G Gam^-1 via two triangular solves on the transpose
    Ut = np.linalg.solve(L.T, np.linalg.solve(L, G.T))
    U = Ut.T
    factors = list(m.factors)
    factors[mode] = U
    norms = np.linalg.norm(U, axis=0)
    zero = norms == 0.0
    factors[mode] = U / np.where(zero, 1.0, norms)
    factors[mode][:, zero] = 0.0
    factors[mode][0, zero] = 1.0
    return KruskalModel(norms, factors), regularized


def als(t, init: KruskalModel, opts: SolverOptions | None = None,
        stop_when=None) -> tuple[KruskalModel, RunTrace]:
    """Alternating least squares with per-mode renormalization.

    ``stop_when(model)`` is checked after every sweep; returning True ends
    the run early.
    """
    opts = opts or SolverOptions()
    X = _as_array(t)
    _check_init(X, init)
    ynorm = _tensor_norm(X)
    m = normalize(init)
    trace = RunTrace()
    t0 = time.perf_counter()
    errs = [residual_norm(X, m) / ynorm]
    trace.add(errs[-1], m.eta_sq_norm(), seconds=0.0, stage="als")
    for _ in range(opts.max_iters):
        for n in range(m.ndim):
            m, reg = als_mode_update(X, m, n)
            if reg and not trace.regularized:
                trace.regularized = True
                trace.flags.append("als: regularized Gram solve")
        errs.append(residual_norm(X, m) / ynorm)
        trace.add(errs[-1], m.eta_sq_norm(), seconds=time.perf_counter() - t0, stage="als")
        if _converged(errs, opts) or (stop_when is not None and stop_when(m)):
            break
    return m, trace


def flm(t, init: KruskalModel, opts: SolverOptions | None = None,
        stop_when=None) -> tuple[KruskalModel, RunTrace]:
    """Damped Gauss-Newton (Levenberg-Marquardt) on ``||Y - Yhat||^2 (+ mu_tikh ||theta||^2)``.

    A step is accepted only if the objective decreases; the damping is
    divided by 3 on success and multiplied by 10 on failure.  If the damping
    exceeds ``1e12`` times its initial value the run stops with
    ``trace.stalled`` set and returns the best model seen.  ``stop_when``
    is checked after every accepted step, as in :func:`als`.
    """
    opts = opts or SolverOptions()
    X = _as_array(t)
    _check_init(X, init)
    ynorm = _tensor_norm(X)
    m = balance(init)
    lay = ParamLayout.of(m)
    theta = lay.pack(m)
    mu_t = opts.mu_tikh

    def objective(th, mu_t):
        mm = lay.unpack(th)
        r = residual_norm(X, mm)
        return r * r + mu_t * float(th @ th), r

    phi, res = objective(theta, mu_t)
    trace = RunTrace()
    t0 = time.perf_counter()
    errs = [res / ynorm]
    mu = opts.mu0
    if mu is None:
        mu = 1e-4 * max(hessian(m, 0.0, 2.0).mean_diagonal(), 1e-300)
    mu0 = mu
    trace.add(errs[-1], m.eta_sq_norm(), mu=mu, seconds=0.0, stage="flm")
    gtol = 1e-15 * ynorm * ynorm
    for _ in range(opts.max_iters):
        if errs[-1] <= 1e-15:
            break
        g = grad_c(X, m) + 2.0 * mu_t * theta
        if np.linalg.norm(g) <= gtol:
            break
        accepted = False
        while mu <= 1e12 * mu0:
            h = hessian(m, 0.0, 2.0, mu + 2.0 * mu_t)
            try:
                d = -h.solve(g)
            except DampingTooSmall:
                mu *= 10.0
                continue
            cand = theta + d
            phi_c, res_c = objective(cand, mu_t)
            if np.isfinite(phi_c) and phi_c < phi:
                accepted = True
                mu /= 3.0
                m = balance(lay.unpack(cand))
                theta = lay.pack(m)
                res = res_c
                mu_t *= opts.tikh_decay
                phi = res * res + mu_t * float(theta @ theta)
                break
            mu *= 10.0
        if not accepted:
            if errs[-1] > EXACT_FIT:
                trace.stalled = True
                trace.flags.append("flm: damping overflow")
            break
        errs.append(res / ynorm)
        trace.add(errs[-1], m.eta_sq_norm(), mu=mu, seconds=time.perf_counter() - t0, stage="flm")
        if _converged(errs, opts) or (stop_when is not None and stop_when(m)):
            break
    return normalize(m), trace
