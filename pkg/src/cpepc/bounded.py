"""CP fitting under a bound on the rank-1 norm: ``min ||Y - Yhat|| s.t. ||eta|| <= epsilon``."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .calculus import DampingTooSmall, ParamLayout, c_value, grad_c, grad_f, hessian, solve_kkt_system
from .cpd import EXACT_FIT, RunTrace
from .epc import _floored_eig, _with_mode
from .scqp import ScqpProblem, solve_ball
from .tensor import KruskalModel, _as_array, balance, gram_skip, mttkrp, normalize, residual_norm


@dataclass
class BoundConfig:
    """Bound on ``||eta||_2`` and its adaptation schedule.

    With ``adaptive=True`` the bound is multiplied by ``grow_factor`` when
    the relative error improves by less than ``stall_tol`` (relative) over
    ``stall_window`` iterations, and divided by ``shrink_factor`` (never
    below the current norm) when the error drops tenfold over a window.
    """

    epsilon: float
    grow_factor: float = 2.0
    shrink_factor: float = 1.5
    stall_window: int = 20
    stall_tol: float = 1e-6
    adaptive: bool = False
    max_iters: int = 500
    tol: float = 1e-12
    tol_c: float = 1e-8

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not (self.grow_factor > 1 and self.shrink_factor > 1):
            raise ValueError("grow and shrink factors must exceed 1")
        if self.stall_window < 1 or self.max_iters < 1:
            raise ValueError("stall_window and max_iters must be >= 1")


class _BoundSchedule:
    def __init__(self, cfg: BoundConfig):
        self.cfg = cfg
        self.eps = float(cfg.epsilon)
        self.errs: list[float] = []

    def update(self, err: float, eta_norm: float) -> float:
        cfg = self.cfg
        self.errs.append(err)
        if not cfg.adaptive or len(self.errs) <= cfg.stall_window:
            return self.eps
        old = self.errs[-cfg.stall_window - 1]
        if old - err < cfg.stall_tol * old:
            self.eps *= cfg.grow_factor
            self.errs = [err]
        elif err < old / 10.0:
            self.eps = max(self.eps / cfg.shrink_factor, eta_norm)
            self.errs = [err]
        return self.eps

    def widen(self) -> float:
        self.eps *= self.cfg.grow_factor
        self.errs = self.errs[-1:]
        return self.eps


def bals_mode_update(t, m: KruskalModel, mode: int, epsilon: float, return_details: bool = False):
    """Best fit of one factor subject to ``||U_eta||_F <= epsilon``.

    The other factors must have unit columns.  The multiplier in the
    details is the canonical one, so an active update equals
    ``G (Gamma_{-n} + lam I)^-1``.
    """
    X = _as_array(t)
    G = mttkrp(X, m, mode)
    sig, V = _floored_eig(gram_skip(m, mode))
    F = G @ V
    fn = np.linalg.norm(F, axis=0)
    z, lam = solve_ball(ScqpProblem(sig, -fn, epsilon))
    Xr = np.zeros_like(F)
    nz = fn > 0
    Xr[:, nz] = F[:, nz] * (z[nz] / fn[nz])
    for r in np.flatnonzero(~nz):
        Xr[0, r] = z[r]
    out = _with_mode(m, mode, Xr @ V.T)
    if return_details:
        return out, {"G": G, "sigma": sig, "V": V, "F": F, "lam": lam, "active": lam > 0}
    return out


def bals(t, m: KruskalModel, cfg: BoundConfig) -> tuple[KruskalModel, RunTrace]:
    """Alternating fit with the norm bound enforced in every mode update."""
    X = _as_array(t)
    ynorm = float(np.linalg.norm(X.ravel()))
    m = normalize(m)
    sched = _BoundSchedule(cfg)
    eps = sched.eps
    trace = RunTrace()
    t0 = time.perf_counter()
    err = residual_norm(X, m) / ynorm
    trace.add(err, m.eta_sq_norm(), lam=eps, stage="bals")
    errs = [err]
    for _ in range(cfg.max_iters):
        for n in range(m.ndim):
            m = bals_mode_update(X, m, n, eps)
        err = residual_norm(X, m) / ynorm
        errs.append(err)
        trace.add(err, m.eta_sq_norm(), lam=eps, seconds=time.perf_counter() - t0, stage="bals")
        eps = sched.update(err, np.sqrt(m.eta_sq_norm()))
        if not cfg.adaptive and len(errs) > 10 and errs[-11] - errs[-1] < cfg.tol:
            break
        if err <= 1e-15:
            break
    return m, trace


def _stationary(X, m: KruskalModel, feasible: bool, rtol: float = 1e-6) -> bool:
    """First-order optimality for min c s.t. f <= eps^2 at a feasible point."""
    if not feasible:
        return False
    gc, gf = grad_c(X, m), grad_f(m)
    gn = float(np.linalg.norm(gc))
    # only a descent direction of c that raises f is blocked by the bound
    lam = max(-float(gc @ gf), 0.0) / max(float(gf @ gf), 1e-300)
    return float(np.linalg.norm(gc + lam * gf)) <= rtol * max(gn, 1e-300)


def bsqp(t, m: KruskalModel, cfg: BoundConfig) -> tuple[KruskalModel, RunTrace]:
    """Damped SQP for the bounded problem with the roles of f and c swapped.

    Each step first tries the unconstrained damped Gauss-Newton step; if the
    linearized bound holds the step is taken with zero multiplier,
    otherwise the equality-constrained system is solved.  A candidate that
    overshoots the bound is rescaled onto it before the acceptance test.  Steps are
    accepted when they keep the bound (within ``tol_c * epsilon^2``) and
    lower the residual, or, from an infeasible point, reduce the excess.
    With an adaptive bound, a damping overflow while the bound is active
    also widens it.  The trace's ``lambda`` column holds the multiplier and
    every change of the bound is recorded in the flags.
    """
    X = _as_array(t)
    ynorm = float(np.linalg.norm(X.ravel()))
    m = balance(m)
    lay = ParamLayout.of(m)
    theta = lay.pack(m)
    sched = _BoundSchedule(cfg)
    eps = sched.eps
    f = m.eta_sq_norm()
    c = c_value(X, m)
    lam = 0.0
    mu = 1e-4 * max(hessian(m, 0.0, 2.0).mean_diagonal(), 1e-300)
    mu0 = mu
    trace = RunTrace()
    t0 = time.perf_counter()
    trace.add(np.sqrt(c) / ynorm, f, mu=mu, lam=lam, stage="bsqp")
    best = (c, m) if f <= eps * eps * (1 + cfg.tol_c) else (np.inf, m)
    errs = [np.sqrt(c) / ynorm]

    def escape(f, eps2) -> bool:
        """Damping overflowed: widen an active adaptive bound, else stop."""
        nonlocal eps
        if cfg.adaptive and f >= eps2 * (1 - 1e-6):
            eps = sched.widen()
            trace.flags.append(f"bsqp: bound raised to {eps:.6g} at iteration {it}")
            return True
        if errs[-1] > EXACT_FIT and not _stationary(X, m, f <= eps2 * (1 + cfg.tol_c)):
            trace.stalled = True
            trace.flags.append("bsqp: damping overflow")
        return False

    it = 0
    while it < cfg.max_iters:
        eps2 = eps * eps
        gf = grad_f(m)
        gc = grad_c(X, m)
        h = hessian(m, 2.0 * max(lam, 0.0), 2.0, mu)
        try:
            d = -h.solve(gc)
            lam_new = 0.0
            if f + float(gf @ d) > eps2:
                d, lam_new = solve_kkt_system(h, gc, gf, f - eps2)
        except DampingTooSmall:
            mu *= 10.0
            if mu > 1e12 * mu0:
                mu = mu0
                if not escape(f, eps * eps):
                    break
            continue
        cand_theta = theta + d
        f_c = lay.unpack(cand_theta).eta_sq_norm()
        if f_c > eps2:
            # f is homogeneous of degree 2N in theta, so a uniform rescale
            # puts an overshooting step back on the bound exactly
            cand_theta = cand_theta * (eps2 / f_c) ** (0.5 / m.ndim)
        cand = lay.unpack(cand_theta)
        f_c = cand.eta_sq_norm()
        c_c = c_value(X, cand)
        slack = cfg.tol_c * eps2
        if f <= eps2 + slack:
            ok = f_c <= eps2 + slack and c_c < c
        else:
            ok = f_c < f
        if not (ok and np.isfinite(c_c) and np.isfinite(f_c)):
            mu *= 10.0
            if mu > 1e12 * mu0:
                mu = mu0
                if not escape(f, eps2):
                    break
            continue
        it += 1
        mu /= 3.0
        m = balance(cand)
        theta = lay.pack(m)
        f, c, lam = f_c, c_c, max(lam_new, 0.0)
        err = np.sqrt(c) / ynorm
        errs.append(err)
        trace.add(err, f, mu=mu, lam=lam, seconds=time.perf_counter() - t0, stage="bsqp")
        if f <= eps2 * (1 + cfg.tol_c) and c < best[0]:
            best = (c, m)
        new_eps = sched.update(err, np.sqrt(f))
        if new_eps != eps:
            trace.flags.append(f"bsqp: bound {'raised' if new_eps > eps else 'lowered'} to {new_eps:.6g}"
                               f" at iteration {it}")
        eps = new_eps
        if err <= 1e-15:
            break
        if (not cfg.adaptive and np.isfinite(best[0]) and len(errs) > 10
                and errs[-11] - errs[-1] < cfg.tol):
            break
    if not np.isfinite(best[0]):
        trace.stalled = True
        trace.flags.append("bsqp: bound never satisfied")
        return normalize(m), trace
    return normalize(best[1]), trace
