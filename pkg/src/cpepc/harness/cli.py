"""Command-line interface: ``cpepc generate | decompose | correct | bench``.

Exit codes: 0 success, 2 bad input, 3 solver stalled, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from ..tensor import ShapeError, residual_norm
from .generators import SCENARIOS, InfeasibleGramError, MatmulSpec, add_noise, gen_benchmark_tensor, gen_matmul_tensor
from .io import ExperimentConfig, TensorFileError, read_config, read_dten, read_model, write_dten, write_model
from .montecarlo import run_monte_carlo
from .pipeline import PipelineError, best_of_restarts, parse_pipeline, run_pipeline

EXIT_OK, EXIT_INPUT, EXIT_STALLED, EXIT_IO = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def _triple(text: str) -> tuple[int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected m,n,p integers, got {text!r}") from None
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return vals


def _snr(text: str) -> float:
    val = float(text)
    if math.isnan(val):
        raise argparse.ArgumentTypeError("SNR must be a number or inf")
    return val


def _positive_int(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return val


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpepc", description="CP decomposition with error preserving correction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a benchmark tensor to a .dten file")
    g.add_argument("--scenario", choices=SCENARIOS, default="ex1")
    g.add_argument("--matmul", type=_triple, help="m,n,p of a matrix multiplication tensor")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=_positive_int)
    g.add_argument("--rank", type=_positive_int)
    g.add_argument("--snr", type=_snr, help="signal-to-noise ratio in dB (inf for none)")
    g.add_argument("-o", "--out", required=True)
    g.add_argument("--model", help="also write the generating model as JSON")

    def solver_flags(q, algo_default):
        q.add_argument("--algo", default=algo_default,
                       help="stage pipeline, e.g. flm, flm+epc, als:10+acep+flm, bsqp")
        q.add_argument("--max-iters", type=_positive_int, default=1000)
        q.add_argument("--delta", type=float, help="error bound for acep/scep stages")
        q.add_argument("--epsilon", type=float, help="norm bound for bals/bsqp stages")
        q.add_argument("--corrector", choices=("acep", "scep"), default="acep",
                       help="correction used by an 'epc' stage")
        q.add_argument("--trace", help="write the iteration trace as CSV")
        q.add_argument("-o", "--out", help="write the final model as JSON")

    d = sub.add_parser("decompose", help="fit a CP model to a .dten tensor")
    d.add_argument("tensor")
    d.add_argument("--rank", type=_positive_int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--init", choices=("random", "identity"), default="random")
    d.add_argument("--restarts", type=_positive_int, default=1)
    d.add_argument("--target-error", type=float)
    solver_flags(d, "flm")

    c = sub.add_parser("correct", help="apply a correction to an existing model")
    c.add_argument("tensor")
    c.add_argument("--model", required=True, help="model JSON to correct")
    solver_flags(c, "acep")

    b = sub.add_parser("bench", help="Monte-Carlo success ratios")
    b.add_argument("--config", help="experiment config JSON; flags below override it")
    b.add_argument("--scenario", choices=SCENARIOS)
    b.add_argument("--matmul", type=_triple)
    b.add_argument("--size", type=_positive_int)
    b.add_argument("--rank", type=_positive_int)
    b.add_argument("--algo", action="append", help="pipeline to compare (repeatable)")
    b.add_argument("--trials", type=_positive_int)
    b.add_argument("--snr", type=_snr)
    b.add_argument("--seed", type=int)
    b.add_argument("--max-iters", type=_positive_int)
    b.add_argument("--restarts", type=_positive_int)
    b.add_argument("--init", choices=("random", "identity"))
    b.add_argument("--delta", type=float)
    b.add_argument("--epsilon", type=float)
    b.add_argument("--workers", type=_positive_int, default=1)
    b.add_argument("--trace", help="directory for per-trial trace CSVs")
    b.add_argument("-o", "--out", help="write the success-ratio table as CSV")
    return p


def _report(t, m, tr, stream=None):
    stream = stream or sys.stdout
    err = residual_norm(t, m) / t.norm()
    print(f"rel_error={err:.6e} eta_sq_norm={m.eta_sq_norm():.6g} iterations={len(tr)}"
          f" stalled={int(tr.stalled)}", file=stream)
    for flag in tr.flags:
        if not flag.startswith("correction at"):
            print(f"note: {flag}", file=stream)


def _finish(args, t, m, tr) -> int:
    if args.trace:
        tr.to_csv(args.trace)
    if args.out:
        write_model(args.out, m)
    _report(t, m, tr)
    return EXIT_STALLED if tr.stalled else EXIT_OK


def cmd_generate(args) -> int:
    if args.matmul is not None:
        Y, model = gen_matmul_tensor(MatmulSpec(*args.matmul)), None
    else:
        Y, model = gen_benchmark_tensor(args.scenario, args.seed, size=args.size, rank=args.rank)
    if args.snr is not None and math.isfinite(args.snr):
        Y = add_noise(Y, args.snr, args.seed)
    write_dten(args.out, Y)
    if args.model and model is not None:
        write_model(args.model, model)
    print(f"wrote {args.out} shape={'x'.join(map(str, Y.shape))} norm={Y.norm():.6g}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    stages = parse_pipeline(args.algo)
    t = read_dten(args.tensor)
    rng = np.random.SeedSequence(args.seed)
    seeds = [args.seed] + [int(s.generate_state(1)[0]) for s in rng.spawn(args.restarts - 1)]
    m, tr, k = best_of_restarts(t, stages, args.rank, seeds, init=args.init, max_iters=args.max_iters,
                                delta=args.delta, epsilon=args.epsilon, corrector=args.corrector,
                                target_error=args.target_error)
    if args.restarts > 1:
        print(f"best restart: {k}")
    return _finish(args, t, m, tr)


def cmd_correct(args) -> int:
    stages = parse_pipeline(args.algo)
    t = read_dten(args.tensor)
    m0 = read_model(args.model)
    if m0.shape != t.shape:
        raise ShapeError(f"model shape {m0.shape} does not match tensor {t.shape}")
    m, tr = run_pipeline(t, stages, m0, max_iters=args.max_iters, delta=args.delta, epsilon=args.epsilon,
                         corrector=args.corrector)
    print(f"eta_sq_norm before={m0.eta_sq_norm():.6g}")
    return _finish(args, t, m, tr)


def cmd_bench(args) -> int:
    cfg = read_config(args.config) if args.config else ExperimentConfig()
    overrides = {
        "scenario": args.scenario, "size": args.size, "rank": args.rank, "pipelines": args.algo,
        "num_trials": args.trials, "snr_db": args.snr, "rng_seed": args.seed, "max_iters": args.max_iters,
        "restarts": args.restarts, "init": args.init, "delta": args.delta, "epsilon": args.epsilon,
        "trace_dir": args.trace, "output": args.out,
    }
    if args.matmul is not None:
        overrides["matmul"] = list(args.matmul)
        overrides["scenario"] = overrides["scenario"] or "ex_matmul"
    d = json.loads(cfg.to_json())
    d.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ExperimentConfig.from_dict(d)
    res = run_monte_carlo(cfg, workers=args.workers)
    table = res.table_csv()
    if cfg.output:
        with open(cfg.output, "w", encoding="utf-8", newline="") as fh:
            fh.write(table)
    sys.stdout.write(table)
    for r in res.trials:
        if r.failure:
            print(f"trial {r.trial} ({r.pipeline}) failed: {r.failure}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "decompose": cmd_decompose, "correct": cmd_correct, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (TensorFileError, OSError) as exc:
        print(f"cpepc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PipelineError, ShapeError, InfeasibleGramError, ValueError, KeyError) as exc:
        print(f"cpepc: bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
