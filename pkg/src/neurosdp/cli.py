"""Command-line interface: sampling, training, evaluation, scans, oracle runs and benchmarks."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bell, csvio, moments, neural, oracle

log = logging.getLogger("neurosdp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _level(text: str) -> str:
    try:
        tag = moments.parse_level(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if tag not in moments.LEVELS:
        raise argparse.ArgumentTypeError(f"level must be one of {', '.join(moments.LEVELS)}")
    return tag


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def workers(requested: int | None) -> int:
    """Worker count: the request (default: CPU count) capped by ``NEUROSDP_THREADS``."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("NEUROSDP_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def _load_model(path, level=None, mode=None) -> neural.ModelFile:
    model = neural.ModelFile.load(path)
    if level is not None and model.level != level:
        raise UsageError(f"{path} is a {model.level} model, not {level}")
    if mode is not None and model.mode != mode:
        raise UsageError(f"{path} is a {model.mode} model, not {mode}")
    return model


# --- commands ------------------------------------------------------------------

def cmd_sample(args) -> int:
    if args.sampler == "isotropic":
        if args.q is None:
            raise UsageError("--sampler isotropic needs --q")
        probs = np.tile(bell.isotropic(args.q).probs, (args.n, 1))
    else:
        sampler = bell.Sampler(args.sampler, args.seed, chains=args.chains,
                               burn_in=args.burn_in, thinning=args.thinning)
        probs = sampler.draw(args.n)
    csvio.write_behaviors(args.out, probs)
    log.info("wrote %d behaviors to %s", len(probs), args.out)
    return EXIT_OK


def train_config(args) -> neural.TrainConfig:
    overrides = dict(
        rounds=args.rounds, samples_per_round=args.samples_per_round, minibatch=args.minibatch,
        lr0=args.lr0, lr_decay=args.lr_decay, decay_start_round=args.decay_start_round,
        momentum=args.momentum, activity_l2=args.activity_l2, delta=args.delta,
        sampler=args.sampler, seed=args.seed, depth=args.depth, width=args.width,
        calibration_samples=args.calibration_samples, grad_clip=args.grad_clip,
        dual_basis=args.dual_basis, chains=args.chains,
    )
    if args.no_norm_constraint:
        overrides["norm_constraint"] = False
    return neural.TrainConfig.for_mode(args.mode, **overrides)


def cmd_train(args) -> int:
    cfg = train_config(args)
    out = Path(args.out)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".loss.csv")

    def progress(r, loss):
        if r == 1 or r % args.log_every == 0 or r == cfg.rounds:
            log.info("round %d/%d mean loss %.6g", r, cfg.rounds, loss)

    model = neural.train(args.level, args.mode, cfg, progress=progress)
    model.save(out)
    csvio.write_table(trace_path, ["round", "mean_loss"],
                      ((i + 1, v) for i, v in enumerate(model.loss_trace)))
    log.info("wrote %s and %s", out, trace_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.primal_model and not args.dual_model:
        raise UsageError("give --primal-model and/or --dual-model")
    primal = _load_model(args.primal_model, args.level, "primal") if args.primal_model else None
    dual = _load_model(args.dual_model, args.level, "dual") if args.dual_model else None
    probs = csvio.read_behaviors(args.input)
    tags, lp, ld = oracle.verdict_batch(primal, dual, probs)
    n = len(tags)
    counts = {t: int(np.sum(tags == t)) for t in (oracle.FEASIBLE, oracle.INFEASIBLE, oracle.INCONCLUSIVE)}
    summary = (f"summary n={n} feasible={counts[oracle.FEASIBLE]} infeasible={counts[oracle.INFEASIBLE]} "
               f"inconclusive={counts[oracle.INCONCLUSIVE]} "
               f"primal_rate={counts[oracle.FEASIBLE] / n:.6f} dual_rate={counts[oracle.INFEASIBLE] / n:.6f}")
    rows = ((i, lp[i], ld[i], tags[i]) for i in range(n))
    csvio.write_table(args.out, ["id", "lambda_min_primal", "lambda_min_dual", "verdict"], rows, [summary])
    print(summary)
    return EXIT_OK


def _oracle_kwargs(args) -> dict:
    kw = {"method": args.oracle_method}
    if args.oracle_iters is not None:
        kw["iters"] = args.oracle_iters
    return kw


def cmd_scan(args) -> int:
    if not args.q_from < args.q_to:
        raise UsageError("--from must be smaller than --to")
    qs = np.linspace(args.q_from, args.q_to, args.steps)
    probs = bell.isotropic_batch(qs)
    primal = _load_model(args.primal_model, args.level, "primal") if args.primal_model else None
    dual = _load_model(args.dual_model, args.level, "dual") if args.dual_model else None
    lp = neural.predict(primal, probs)[1] if primal else np.full(len(qs), np.nan)
    ld = neural.predict(dual, probs)[1] if dual else np.full(len(qs), np.nan)
    res = oracle.solve_many(args.level, probs, workers(args.workers), **_oracle_kwargs(args))
    rows = ((q, a, b, r.t_star) for q, a, b, r in zip(qs, lp, ld, res))
    csvio.write_table(args.out, ["q", "nn_primal_lambda_min", "nn_dual_lambda_min", "oracle_t_star"], rows)
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.input:
        probs = csvio.read_behaviors(args.input)
        ids = [str(i) for i in range(len(probs))]
    elif args.q:
        probs = bell.isotropic_batch(args.q)
        ids = [repr(float(q)) for q in args.q]
    else:
        raise UsageError("give --input or --q")
    res = oracle.solve_many(args.level, probs, workers(args.workers), **_oracle_kwargs(args))
    rows = ((i, args.level, r.t_star, r.iterations, r.converged) for i, r in zip(ids, res))
    csvio.write_table(args.out, ["q_or_id", "level", "t_star", "iterations", "converged"], rows)
    return EXIT_OK


def bench(model: neural.ModelFile, probs, oracle_kw: dict, warmup: int = 100) -> dict:
    """Mean single-sample wall time of network inference and of the oracle on the same rows."""
    for row in probs[:warmup]:
        neural.predict(model, row)
    t0 = time.perf_counter()
    for row in probs:
        neural.predict(model, row)
    nn = (time.perf_counter() - t0) / len(probs)
    layout = model.layout
    t0 = time.perf_counter()
    for row in probs:
        oracle.max_min_eig(layout, row, **oracle_kw)
    orc = (time.perf_counter() - t0) / len(probs)
    return {"nn": nn, "oracle": orc, "ratio": orc / nn}


def cmd_bench(args) -> int:
    if args.n < 100:
        raise UsageError("--n must be at least 100")
    model = _load_model(args.model, args.level)
    probs = bell.Sampler(args.sampler, args.seed, chains=args.chains).draw(args.n)
    res = bench(model, probs, _oracle_kwargs(args))
    header = ["level", "mode", "n", "nn_seconds_per_sample", "oracle_seconds_per_sample", "ratio"]
    row = [model.level, model.mode, args.n, res["nn"], res["oracle"], res["ratio"]]
    text = csvio.render(header, [row])
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"{model.level} {model.mode}: nn {res['nn'] * 1e6:.1f} us/sample, "
          f"oracle {res['oracle'] * 1e3:.2f} ms/sample, ratio {res['ratio']:.1f}")
    return EXIT_OK


def cmd_layout(args) -> int:
    text = moments.build_layout(args.level).dump()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurosdp", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="draw behaviors to a CSV file")
    s.add_argument("--sampler", required=True, choices=bell.SAMPLERS + ("isotropic",))
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--q", type=float, help="mixing parameter for --sampler isotropic")
    s.add_argument("--chains", type=_positive_int, default=100, help="parallel hit-and-run chains")
    s.add_argument("--burn-in", type=int, default=1000)
    s.add_argument("--thinning", type=_positive_int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    t = sub.add_parser("train", help="train a primal or dual network")
    t.add_argument("--level", type=_level, required=True)
    t.add_argument("--mode", choices=neural.MODES, required=True)
    t.add_argument("--sampler", choices=bell.SAMPLERS, help="default: hitrun (primal), vertex (dual)")
    t.add_argument("--rounds", type=_positive_int)
    t.add_argument("--samples-per-round", type=_positive_int)
    t.add_argument("--minibatch", type=_positive_int)
    t.add_argument("--lr0", type=float, help="default: 0.005 (primal), 1e-4 (dual)")
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--decay-start-round", type=int)
    t.add_argument("--momentum", type=float)
    t.add_argument("--activity-l2", type=float)
    t.add_argument("--delta", type=float)
    t.add_argument("--depth", type=_positive_int)
    t.add_argument("--width", type=_positive_int, help="hidden width (default 3 x output width)")
    t.add_argument("--calibration-samples", type=_positive_int)
    t.add_argument("--grad-clip", type=float)
    t.add_argument("--chains", type=_positive_int)
    t.add_argument("--dual-basis", choices=moments.DUAL_BASES)
    t.add_argument("--no-norm-constraint", action="store_true",
                   help="leave the identity cell out of the dual constraints")
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=_positive_int, default=10)
    t.add_argument("--out", required=True, help="model file")
    t.add_argument("--trace", help="loss-trace CSV (default: <out>.loss.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="certify behaviors with trained networks")
    e.add_argument("--primal-model")
    e.add_argument("--dual-model")
    e.add_argument("--level", type=_level)
    e.add_argument("--input", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    def oracle_flags(sp):
        sp.add_argument("--oracle-iters", type=_positive_int)
        sp.add_argument("--oracle-method", choices=("barrier", "subgradient"), default="barrier")

    c = sub.add_parser("scan", help="isotropic-line scan")
    c.add_argument("--level", type=_level, required=True)
    c.add_argument("--from", dest="q_from", type=float, default=0.5)
    c.add_argument("--to", dest="q_to", type=float, default=1.0)
    c.add_argument("--steps", type=_positive_int, default=101)
    c.add_argument("--primal-model")
    c.add_argument("--dual-model")
    c.add_argument("--workers", type=_positive_int)
    oracle_flags(c)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_scan)

    o = sub.add_parser("oracle", help="reference solver on behaviors or isotropic points")
    o.add_argument("--level", type=_level, required=True)
    o.add_argument("--input")
    o.add_argument("--q", type=float, nargs="+")
    o.add_argument("--iters", dest="oracle_iters", type=_positive_int)
    o.add_argument("--method", dest="oracle_method", choices=("barrier", "subgradient"), default="barrier")
    o.add_argument("--workers", type=_positive_int)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle)

    b = sub.add_parser("bench", help="time network inference against the oracle")
    b.add_argument("--model", required=True)
    b.add_argument("--level", type=_level)
    b.add_argument("--n", type=int, default=1000)
    b.add_argument("--sampler", choices=bell.SAMPLERS, default="hitrun")
    b.add_argument("--chains", type=_positive_int, default=100)
    b.add_argument("--seed", type=int, default=0)
    oracle_flags(b)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    ly = sub.add_parser("layout", help="print the moment-matrix layout of a level")
    ly.add_argument("--level", type=_level, required=True)
    ly.add_argument("--out")
    ly.set_defaults(func=cmd_layout)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (neural.DivergenceError, FloatingPointError) as exc:
        print(f"neurosdp: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError, KeyError, oracle.IntegrityError) as exc:
        print(f"neurosdp: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
