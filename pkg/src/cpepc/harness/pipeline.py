"""Chained solver pipelines such as ``als:10+flm+epc``.

A pipeline is a ``+``-separated list of stages.  Each stage is one of
``als``, ``flm``, ``acep``, ``scep``, ``bals`` or ``bsqp`` with an optional
``:iters`` budget.  The token ``epc`` directly after ``als`` or ``flm``
turns that fit into the corrected driver :func:`cpepc.epc.cpd_epc`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..bounded import BoundConfig, bals, bsqp
from ..cpd import RunTrace, SolverOptions, als, flm, init_identity_ones, random_init
from ..epc import EpcConfig, acep, cpd_epc, scep
from ..tensor import KruskalModel, _as_array, residual_norm

FITS = ("als", "flm")
CORRECTIONS = ("acep", "scep")
BOUNDED = ("bals", "bsqp")
STAGES = FITS + CORRECTIONS + BOUNDED


class PipelineError(ValueError):
    """Malformed pipeline string."""


@dataclass(frozen=True)
class Stage:
    name: str
    iters: int | None = None
    corrected: bool = False

    def __str__(self) -> str:
        s = self.name if self.iters is None else f"{self.name}:{self.iters}"
        return s + "+epc" if self.corrected else s


def parse_pipeline(spec: str) -> list[Stage]:
    tokens = [tok.strip().lower() for tok in spec.split("+")]
    if not tokens or any(not tok for tok in tokens):
        raise PipelineError(f"empty stage in pipeline {spec!r}")
    stages: list[Stage] = []
    for tok in tokens:
        name, _, count = tok.partition(":")
        if name == "epc":
            if count:
                raise PipelineError("'epc' takes no iteration count; put it on the fit stage")
            if not stages or stages[-1].name not in FITS or stages[-1].corrected:
                raise PipelineError("'epc' must follow an 'als' or 'flm' stage")
            stages[-1] = replace(stages[-1], corrected=True)
            continue
        if name not in STAGES:
            raise PipelineError(f"unknown stage {name!r}; choose from {', '.join(STAGES + ('epc',))}")
        iters = None
        if count:
            try:
                iters = int(count)
            except ValueError:
                raise PipelineError(f"bad iteration count in {tok!r}") from None
            if iters < 1:
                raise PipelineError(f"iteration count must be >= 1 in {tok!r}")
        stages.append(Stage(name, iters))
    return stages


def initial_model(shape, rank: int, init: str = "random", seed=None) -> KruskalModel:
    if init == "random":
        return random_init(shape, rank, seed)
    if init == "identity":
        return init_identity_ones(shape, rank)
    raise ValueError(f"unknown init {init!r}; use 'random' or 'identity'")


def run_pipeline(t, stages, init: KruskalModel, *, max_iters: int = 1000, delta: float | None = None,
                 epsilon: float | None = None, corrector: str = "acep",
                 target_error: float | None = None) -> tuple[KruskalModel, RunTrace]:
    """Run ``stages`` in order, each starting from the previous model.

    Stages without an explicit budget get ``max_iters``.  Corrections use
    ``delta`` or, by default, the residual at the start of the stage.
    Bounded stages use ``epsilon`` as a fixed bound or, by default, start
    from the current norm of the rank-1 terms and adapt it.  The stall
    flag of the returned trace is that of the last stage.
    """
    if isinstance(stages, str):
        stages = parse_pipeline(stages)
    X = _as_array(t)
    m = init
    trace = RunTrace()
    last = RunTrace()
    for st in stages:
        n = st.iters or max_iters
        if st.name in FITS:
            opts = SolverOptions(max_iters=n, target_error=target_error)
            if st.corrected:
                m, last = cpd_epc(X, m.rank, opts, EpcConfig(), init=m, fit=st.name, correction=corrector)
            else:
                m, last = (als if st.name == "als" else flm)(X, m, opts)
        elif st.name in CORRECTIONS:
            d = delta if delta is not None else residual_norm(X, m)
            cfg = EpcConfig(delta=d, max_correction_iters=n)
            m, last = (acep if st.name == "acep" else scep)(X, m, cfg)
        else:
            if epsilon is not None:
                cfg = BoundConfig(epsilon=epsilon, max_iters=n)
            else:
                eps = max(math.sqrt(m.eta_sq_norm()), 1e-12)
                cfg = BoundConfig(epsilon=eps, adaptive=True, max_iters=n)
            m, last = (bals if st.name == "bals" else bsqp)(X, m, cfg)
        trace.extend(last)
    trace.stalled = last.stalled
    return m, trace


def best_of_restarts(t, stages, rank: int, seeds, *, init: str = "random",
                     **kwargs) -> tuple[KruskalModel, RunTrace, int]:
    """Run the pipeline from several starting points and keep the best fit.

    Returns the model, its trace and the index of the winning restart.
    Stops early once ``target_error`` (if given) is met.
    """
    X = _as_array(t)
    ynorm = float(np.linalg.norm(X.ravel()))
    best = None
    for k, seed in enumerate(seeds):
        m0 = initial_model(X.shape, rank, init, seed)
        m, tr = run_pipeline(X, stages, m0, **kwargs)
        err = residual_norm(X, m) / ynorm
        if best is None or err < best[0]:
            best = (err, m, tr, k)
        target = kwargs.get("target_error")
        if target is not None and err <= target:
            break
        if init == "identity":
            break
    return best[1], best[2], best[3]
