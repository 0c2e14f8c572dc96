"""Monte-Carlo success-ratio runs over independent random trials."""
from __future__ import annotations

import csv
import io
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..cpd import RunTrace
from ..tensor import residual_norm
from .generators import add_noise, gen_benchmark_tensor, splitmix64
from .io import ExperimentConfig
from .pipeline import best_of_restarts, parse_pipeline

THRESHOLDS = (1e-4, 1e-5, 1e-6, 1e-8)
DEFAULT_RANKS = {"ex1": 5, "ex1b": 5, "ex2": 5, "ex_bcd": 12}


@dataclass
class TrialResult:
    trial: int
    seed: int
    pipeline: str
    final_error: float
    best_iter: int
    eta_sq_norm: float
    seconds: float
    stalled: bool = False
    failure: str | None = None


@dataclass
class MonteCarloResult:
    pipelines: list[str]
    trials: list[TrialResult] = field(default_factory=list)
    traces: dict[tuple[str, int], RunTrace] = field(default_factory=dict)

    def success_ratios(self, thresholds=THRESHOLDS) -> dict[str, dict[float, float]]:
        """Fraction of trials per pipeline whose final error is at most each threshold.

        Failed trials count as unsuccessful.
        """
        out = {}
        for p in self.pipelines:
            errs = np.array([r.final_error for r in self.trials if r.pipeline == p])
            out[p] = {thr: float(np.mean(errs <= thr)) if errs.size else float("nan") for thr in thresholds}
        return out

    def mean_eta_sq(self, pipeline: str) -> float:
        vals = [r.eta_sq_norm for r in self.trials if r.pipeline == pipeline and r.failure is None]
        return float(np.mean(vals)) if vals else float("nan")

    def table_csv(self, thresholds=THRESHOLDS) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pipeline", "trials"] + [f"success@{thr:g}" for thr in thresholds] + ["mean_eta_sq_norm"])
        ratios = self.success_ratios(thresholds)
        for p in self.pipelines:
            n = sum(r.pipeline == p for r in self.trials)
            w.writerow([p, n] + [repr(ratios[p][thr]) for thr in thresholds] + [repr(self.mean_eta_sq(p))])
        return buf.getvalue()

    def trials_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "seed", "pipeline", "final_error", "best_iter", "eta_sq_norm", "seconds", "stalled",
                    "failure"])
        for r in self.trials:
            w.writerow([r.trial, r.seed, r.pipeline, repr(r.final_error), r.best_iter, repr(r.eta_sq_norm),
                        repr(r.seconds), int(r.stalled), r.failure or ""])
        return buf.getvalue()


def trial_seed(master: int, trial: int) -> int:
    return splitmix64(master, trial)


def trial_tensor(cfg: ExperimentConfig, seed: int):
    """Tensor for one trial: the scenario generator plus optional noise."""
    corr = tuple(cfg.corr) if isinstance(cfg.corr, list) else cfg.corr
    Y, model = gen_benchmark_tensor(cfg.scenario, seed, size=cfg.size, rank=cfg.rank, corr=corr,
                                weights=cfg.weights, matmul=tuple(cfg.matmul))
    if cfg.snr_db is not None and np.isfinite(cfg.snr_db):
        Y = add_noise(Y, cfg.snr_db, splitmix64(seed, 1))
    return Y, model


def model_rank(cfg: ExperimentConfig, model) -> int:
    if cfg.rank is not None:
        return cfg.rank
    if model is not None:
        return model.rank
    if cfg.scenario in DEFAULT_RANKS:
        return DEFAULT_RANKS[cfg.scenario]
    raise ValueError(f"scenario {cfg.scenario!r} needs an explicit rank")


def run_trial(cfg: ExperimentConfig, trial: int) -> list[tuple[TrialResult, RunTrace | None]]:
    """All pipelines on one trial; every pipeline starts from the same initial models."""
    seed = trial_seed(cfg.rng_seed, trial)
    out = []
    try:
        Y, model = trial_tensor(cfg, seed)
        R = model_rank(cfg, model)
    except Exception as exc:  # generator failures are recorded per trial
        msg = f"{type(exc).__name__}: {exc}"
        return [(TrialResult(trial, seed, p, float("inf"), -1, float("nan"), 0.0, failure=msg), None)
                for p in cfg.pipelines]
    ynorm = Y.norm()
    init_seeds = [splitmix64(seed, 2 + k) for k in range(cfg.restarts)]
    for p in cfg.pipelines:
        t0 = time.perf_counter()
        try:
            m, tr, _ = best_of_restarts(Y, parse_pipeline(p), R, init_seeds, init=cfg.init,
                                        max_iters=cfg.max_iters, delta=cfg.delta, epsilon=cfg.epsilon)
            err = residual_norm(Y, m) / ynorm
            res = TrialResult(trial, seed, p, err, tr.best_iter(), m.eta_sq_norm(),
                              time.perf_counter() - t0, tr.stalled)
            out.append((res, tr))
        except Exception as exc:  # a failed run never aborts the batch
            msg = f"{type(exc).__name__}: {exc}"
            if not isinstance(exc, (ValueError, ArithmeticError, np.linalg.LinAlgError)):
                msg += "\n" + traceback.format_exc(limit=3)
            out.append((TrialResult(trial, seed, p, float("inf"), -1, float("nan"),
                                    time.perf_counter() - t0, failure=msg), None))
    return out


def _run_trial_star(args):
    return run_trial(*args)


def run_monte_carlo(cfg: ExperimentConfig, workers: int = 1) -> MonteCarloResult:
    """Run ``cfg.num_trials`` trials of every pipeline.

    Trial ``k`` uses the seed ``splitmix64(cfg.rng_seed, k)`` whatever the
    number of workers, and results are collected in trial order, so the
    output does not depend on ``workers``.  Per-trial traces are written to
    ``cfg.trace_dir`` when it is set.
    """
    for p in cfg.pipelines:
        parse_pipeline(p)
    result = MonteCarloResult(list(cfg.pipelines))
    jobs = [(cfg, k) for k in range(cfg.num_trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_trial_star, jobs))
    else:
        batches = [_run_trial_star(j) for j in jobs]
    for batch in batches:
        for res, tr in batch:
            result.trials.append(res)
            if tr is not None:
                result.traces[(res.pipeline, res.trial)] = tr
    if cfg.trace_dir:
        d = Path(cfg.trace_dir)
        d.mkdir(parents=True, exist_ok=True)
        for (p, k), tr in result.traces.items():
            safe = p.replace("+", "_").replace(":", "-")
            tr.to_csv(d / f"trial{k:04d}_{safe}.csv")
    return result
