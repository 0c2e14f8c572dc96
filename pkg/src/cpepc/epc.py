"""Error preserving correction: reduce the rank-1 norm without losing fit.

Given a model with residual at most ``delta`` the correction solves

    min ||eta||^2    subject to    ||Y - Yhat|| <= delta

either one factor at a time in closed form (:func:`acep`) or all at once
with a damped SQP iteration (:func:`scep`).  :func:`cpd_epc` interleaves a
fitting solver with corrections.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .calculus import (
    DampingTooSmall,
    ParamLayout,
    c_value,
    grad_c,
    grad_f,
    lagrangian_hessian,
    solve_kkt_system,
)
from .cpd import RunTrace, SolverOptions, als, flm, random_init
from .scqp import ScqpProblem, solve_sphere
from .tensor import (
    KruskalModel,
    _as_array,
    balance,
    gram_skip,
    mttkrp,
    normalize,
    residual_norm,
)

EIG_FLOOR = 1e-12


class InfeasibleStartError(ValueError):
    """The starting model violates the error bound."""


# correction points for long fits of the weighted collinear tensor (``ex1b``)
LONG_SCHEDULE = (10, 20, 50, 100, 2000)


@dataclass
class EpcConfig:
    """Settings for the correction solvers and the fit/correct driver.

    ``delta=None`` uses the residual of the model handed in.  ``schedule``
    lists fit iterations after which a correction is applied; corrections
    also run when the fit stalls or when ``||eta||^2 >= trigger_ratio *
    ||Y||^2``.
    """

    delta: float | None = None
    delta_growth: float = 1.1
    max_correction_iters: int = 200
    switch_to_sqp_after: int = 5
    tol: float = 1e-10
    tol_c: float = 1e-8
    schedule: tuple[int, ...] = (10, 20, 50, 100)
    trigger_ratio: float = 10.0
    max_corrections: int = 50
    max_stalls: int = 5

    def __post_init__(self):
        if self.delta is not None and self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.delta_growth < 1.0:
            raise ValueError("delta_growth must be >= 1")
        if self.max_correction_iters < 1:
            raise ValueError("max_correction_iters must be >= 1")
        if self.switch_to_sqp_after < 0:
            raise ValueError("switch_to_sqp_after must be >= 0")
        if self.trigger_ratio <= 0:
            raise ValueError("trigger_ratio must be positive")
        self.schedule = tuple(sorted(int(s) for s in self.schedule))


def _floored_eig(Gam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sig, V = np.linalg.eigh(0.5 * (Gam + Gam.T))
    if not np.all(np.isfinite(sig)):
        raise np.linalg.LinAlgError("non-finite eigenvalues of the Gram product")
    top = max(float(sig[-1]), np.finfo(float).tiny)
    return np.maximum(sig, EIG_FLOOR * top), V


def _with_mode(m: KruskalModel, mode: int, U_eta: np.ndarray) -> KruskalModel:
    """Replace factor ``mode`` (weights absorbed) and renormalize that mode."""
    norms = np.linalg.norm(U_eta, axis=0)
    zero = norms == 0.0
    U = U_eta / np.where(zero, 1.0, norms)
    U[:, zero] = 0.0
    U[0, zero] = 1.0
    factors = list(m.factors)
    factors[mode] = U
    return KruskalModel(norms, factors)


def acep_mode_update(t, m: KruskalModel, mode: int, delta: float, ynorm2: float | None = None,
                     return_details: bool = False):
    """Minimum-norm update of one factor that keeps the residual at ``delta``.

    ``m`` must have unit columns in every mode except possibly ``mode``.
    With ``return_details`` a dict holding ``delta_n``, the multiplier and
    the intermediate matrices is returned alongside the model.
    """
    X = _as_array(t)
    if ynorm2 is None:
        ynorm2 = float(np.sum(X * X))
    G = mttkrp(X, m, mode)
    sig, V = _floored_eig(gram_skip(m, mode))
    F = G @ V
    A = F / np.sqrt(sig)
    a2 = float(np.sum(A * A))
    dn2 = delta * delta + a2 - ynorm2
    details = {"G": G, "sigma": sig, "V": V, "F": F, "lam": np.nan}
    if dn2 <= 0.0:
        U_eta = (F / sig) @ V.T
        dn = 0.0
    else:
        dn = np.sqrt(dn2)
        if dn * dn >= a2:
            U_eta = np.zeros_like(G)
        else:
            fn = np.linalg.norm(F, axis=0)
            z, lam = solve_sphere(ScqpProblem(dn / sig, -fn * sig ** -1.5, 1.0))
            Z = np.zeros_like(F)
            nz = fn > 0
            Z[:, nz] = F[:, nz] * (z[nz] / fn[nz])
            for r in np.flatnonzero(~nz):
                Z[0, r] = z[r]
            U_eta = ((A - dn * Z) / np.sqrt(sig)) @ V.T
            details["lam"] = lam
    details["delta_n"] = dn
    out = _with_mode(m, mode, U_eta)
    if return_details:
        return out, details
    return out


def _check_feasible(X, m, delta, ynorm):
    res = residual_norm(X, m)
    if res > delta + 1e-10 * ynorm:
        raise InfeasibleStartError(f"starting residual {res:.6g} exceeds the bound {delta:.6g}")
    return res


def acep(t, m: KruskalModel, cfg: EpcConfig | None = None) -> tuple[KruskalModel, RunTrace]:
    """Alternating correction: cyclic :func:`acep_mode_update` sweeps.

    Stops when ``||eta||^2`` changes by less than ``cfg.tol`` (relative)
    over a sweep or after ``cfg.max_correction_iters`` sweeps.
    """
    cfg = cfg or EpcConfig()
    X = _as_array(t)
    ynorm2 = float(np.sum(X * X))
    ynorm = np.sqrt(ynorm2)
    m = normalize(m)
    delta = residual_norm(X, m) if cfg.delta is None else float(cfg.delta)
    res = _check_feasible(X, m, delta, ynorm)
    trace = RunTrace()
    t0 = time.perf_counter()
    eta2 = m.eta_sq_norm()
    trace.add(res / ynorm, eta2, stage="acep")
    for _ in range(cfg.max_correction_iters):
        for n in range(m.ndim):
            m = acep_mode_update(X, m, n, delta, ynorm2)
        new = m.eta_sq_norm()
        trace.add(residual_norm(X, m) / ynorm, new, seconds=time.perf_counter() - t0, stage="acep")
        done = eta2 - new <= cfg.tol * max(eta2, np.finfo(float).tiny)
        eta2 = new
        if done:
            break
    return m, trace


def scep(t, m: KruskalModel, cfg: EpcConfig | None = None) -> tuple[KruskalModel, RunTrace]:
    """All-at-once correction by damped SQP on ``min f s.t. c = delta^2``.

    The run starts with ``cfg.switch_to_sqp_after`` ACEP sweeps.  A step is
    accepted when, from a feasible point, it stays feasible (within
    ``tol_c * ||Y||^2``) and lowers ``f``, or, from an infeasible point, it
    reduces the violation.  The best feasible iterate is returned; if none
    was seen the least-violating one is returned and the trace is flagged.
    """
    cfg = cfg or EpcConfig()
    X = _as_array(t)
    ynorm2 = float(np.sum(X * X))
    ynorm = np.sqrt(ynorm2)
    m = normalize(m)
    delta = residual_norm(X, m) if cfg.delta is None else float(cfg.delta)
    trace = RunTrace()
    t0 = time.perf_counter()
    if cfg.switch_to_sqp_after > 0:
        _check_feasible(X, m, delta, ynorm)
        warm = replace(cfg, delta=delta, max_correction_iters=cfg.switch_to_sqp_after)
        m, tr = acep(X, m, warm)
        trace.extend(tr)
    target = delta * delta
    tol_c = cfg.tol_c * ynorm2
    m = balance(m)
    lay = ParamLayout.of(m)
    theta = lay.pack(m)
    f = m.eta_sq_norm()
    c = c_value(X, m)
    gf = grad_f(m)
    gc = grad_c(X, m)
    gcn = float(gc @ gc)
    lam = max(0.0, -float(gf @ gc) / gcn) if gcn > 0 else 0.0
    mu = 1e-4 * max(lagrangian_hessian(m, lam).mean_diagonal(), 1e-300)
    mu0 = mu
    best = (f, m) if c - target <= tol_c else None
    least = (max(c - target, 0.0), m)
    if not trace.records:
        trace.add(np.sqrt(c) / ynorm, f, mu=mu, lam=lam, stage="scep")
    fs = [f]
    it = 0
    while it < cfg.max_correction_iters:
        viol = c - target
        h = lagrangian_hessian(m, max(lam, 0.0), mu)
        try:
            d, lam_new = solve_kkt_system(h, gf, gc, viol)
        except DampingTooSmall:
            mu *= 10.0
            if mu > 1e12 * mu0:
                trace.flags.append("scep: no acceptable step")
                break
            continue
        cand_theta = _restore(X, lay, theta + d, target, tol_c)
        cand = lay.unpack(cand_theta)
        f_c = cand.eta_sq_norm()
        c_c = c_value(X, cand)
        if viol <= tol_c:
            ok = c_c - target <= tol_c and f_c < f
        else:
            ok = max(c_c - target, 0.0) < viol
        if not (ok and np.isfinite(f_c) and np.isfinite(c_c)):
            mu *= 10.0
            if mu > 1e12 * mu0:
                trace.flags.append("scep: no acceptable step")
                break
            continue
        it += 1
        mu /= 3.0
        m = balance(cand)
        theta = lay.pack(m)
        f, c, lam = f_c, c_c, lam_new
        gf = grad_f(m)
        gc = grad_c(X, m)
        trace.add(np.sqrt(c) / ynorm, f, mu=mu, lam=lam, seconds=time.perf_counter() - t0, stage="scep")
        if c - target <= tol_c:
            if best is None or f < best[0]:
                best = (f, m)
        elif c - target < least[0]:
            least = (c - target, m)
        fs.append(f)
        if len(fs) > 5 and c - target <= tol_c and fs[-6] - fs[-1] <= cfg.tol * fs[-6]:
            break
    if best is None:
        trace.flags.append("scep: no feasible iterate")
        return normalize(least[1]), trace
    return normalize(best[1]), trace


def _restore(X, lay: ParamLayout, theta: np.ndarray, target: float, tol_c: float, steps: int = 3):
    """Second-order correction: minimum-norm steps back onto ``c = target``.

    The SQP step satisfies the linearized constraint only; a few
    Gauss-Newton iterations on the scalar equation pull the candidate back
    to the error level before the acceptance test.
    """
    for _ in range(steps):
        mm = lay.unpack(theta)
        excess = c_value(X, mm) - target
        if excess <= tol_c:
            break
        g = grad_c(X, mm)
        gg = float(g @ g)
        if not gg > 0:
            break
        theta = theta - (excess / gg) * g
    return theta


FIT_SOLVERS: dict[str, Callable] = {"flm": flm, "als": als}
CORRECTORS: dict[str, Callable] = {"acep": acep, "scep": scep}


def cpd_epc(t, R: int, opts: SolverOptions | None = None, cfg: EpcConfig | None = None, *,
            init: KruskalModel | None = None, fit: str = "flm", correction: str = "acep"):
    """Fit a rank-``R`` model, applying corrections as the fit proceeds.

    The fitting solver (``"flm"`` or ``"als"``) runs in segments.  A
    segment ends at the next scheduled iteration, when the fit stalls or
    converges, or when ``||eta||^2 >= cfg.trigger_ratio * ||Y||^2``; the
    correction (``"acep"`` or ``"scep"``) then runs with ``delta`` equal to
    the current residual.  When a correction is followed by a fit that makes
    no progress the bound is widened by ``cfg.delta_growth``.  ``opts``
    bounds the total number of fit iterations.
    """
    opts = opts or SolverOptions()
    cfg = cfg or EpcConfig()
    if fit not in FIT_SOLVERS:
        raise ValueError(f"unknown fit solver {fit!r}")
    if correction not in CORRECTORS:
        raise ValueError(f"unknown correction {correction!r}")
    X = _as_array(t)
    ynorm2 = float(np.sum(X * X))
    ynorm = np.sqrt(ynorm2)
    m = normalize(init) if init is not None else random_init(X.shape, R, opts.rng_seed)
    if m.rank != R:
        raise ValueError(f"initial model has rank {m.rank}, expected {R}")
    fit_fn = FIT_SOLVERS[fit]
    corr_fn = CORRECTORS[correction]
    threshold = cfg.trigger_ratio * ynorm2
    trace = RunTrace()
    done_iters = 0
    mu = opts.mu0
    growth = 1.0
    last_stop_err = np.inf
    n_corr = 0
    best = (np.inf, m)
    tr = RunTrace()
    pending = [s for s in cfg.schedule]
    no_progress = 0
    while done_iters < opts.max_iters:
        nxt = next((s for s in pending if s > done_iters), None)
        seg = opts.max_iters - done_iters if nxt is None else min(nxt, opts.max_iters) - done_iters
        seg_opts = replace(opts, max_iters=seg, mu0=mu)
        m, tr = fit_fn(X, m, seg_opts, stop_when=lambda mm: mm.eta_sq_norm() >= threshold)
        trace.extend(tr)
        steps = len(tr) - 1
        done_iters += max(steps, 1)
        mu = tr.records[-1].mu if fit == "flm" and np.isfinite(tr.records[-1].mu) else None
        err = tr.final_error
        if err < best[0]:
            best = (err, m)
        if err <= (opts.target_error or 0.0) or err <= 1e-15:
            break
        scheduled = nxt is not None and done_iters >= nxt
        if scheduled:
            pending = [s for s in pending if s > done_iters]
        stopped_early = steps < seg
        triggered = m.eta_sq_norm() >= threshold
        if not (scheduled or stopped_early or triggered):
            continue
        if stopped_early and not triggered:
            # the fit stalled or converged: widen the bound when the previous
            # correction did not lead anywhere, give up after repeated failures
            if err >= last_stop_err * (1 - 1e-3):
                no_progress += 1
                growth *= cfg.delta_growth
            else:
                no_progress = 0
            last_stop_err = min(err, last_stop_err)
            if no_progress >= cfg.max_stalls:
                break
        if n_corr >= cfg.max_corrections:
            if stopped_early:
                break
            continue
        delta = residual_norm(X, m) * growth
        m, ctr = corr_fn(X, m, replace(cfg, delta=delta))
        trace.extend(ctr)
        trace.flags.append(f"correction at iteration {done_iters}: delta={delta:.6g}")
        n_corr += 1
        mu = None
    trace.stalled = tr.stalled if done_iters else False
    final_err = residual_norm(X, m) / ynorm
    if best[0] < final_err:
        m = best[1]
    return normalize(m), trace
