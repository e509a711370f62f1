"""Command-line entry point: ``chord-churn {theory,simulate,compare,validate}``.

Data goes to stdout or files, progress and logs to stderr.  Exit codes:
0 success, 1 failed validation or aborted runs, 2 bad flags.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analytics, experiment, oracles
from .simulator import SimConfig, Simulation, SimulationAborted

logger = logging.getLogger("chord_churn")

OUTDIR_ENV = "CHORD_CHURN_OUTDIR"
PAPER_REPLICATES = 100


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def __post_init__(self) -> None:
        self.passed = bool(self.passed)  # numpy bools do not serialize


class UsageError(Exception):
    pass


# -- flag types -----------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def _nonneg_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not math.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError(f"must be a finite number >= 0, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = _nonneg_float(text)
    if value == 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return value


def _float_list(item) -> "callable":
    def parse(text: str) -> list[float]:
        return [item(part) for part in text.split(",") if part.strip()]

    return parse


# -- parser -------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser, grid: bool = False) -> None:
    if grid:
        p.add_argument("--r", type=_float_list(_nonneg_float), default=[500.0],
                       help="stabilization/failure rate ratio; comma-separated list")
        p.add_argument("--alpha", type=_float_list(_fraction), default=[0.5],
                       help="fraction of stabilizations spent on successors; comma-separated list")
    else:
        p.add_argument("--r", type=_nonneg_float, default=500.0, help="stabilization/failure rate ratio")
        p.add_argument("--alpha", type=_fraction, default=0.5, help="fraction of stabilizations on successors")
    p.add_argument("--n", "--n0", dest="n", type=_positive_int, default=1000, help="(initial) node count")
    p.add_argument("--bits", type=_positive_int, default=20, help="key space is 2**bits")
    p.add_argument("--S", type=_positive_int, default=6, help="successor list length")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--burnin-events", type=_nonneg_int, default=None)
    p.add_argument("--measure-events", type=_nonneg_int, default=None)
    p.add_argument("--probes", type=_nonneg_int, default=100, help="probe lookups per sample")
    p.add_argument("--seed", type=_nonneg_int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chord-churn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("theory", help="evaluate the analytical predictions")
    _add_model_flags(p)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--with-cost", action="store_true", help="include the full C_t table (JSON only)")
    p.add_argument("--out", type=Path, default=None, help="write to a file instead of stdout")

    p = sub.add_parser("simulate", help="run one simulation and stream its samples")
    _add_model_flags(p)
    _add_run_flags(p)
    p.add_argument("--lambda-f", type=_positive_float, default=1.0)
    p.add_argument("--sample-every", type=_positive_int, default=None, help="events between samples (default N_now)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", type=Path, default=None, help="write to a file instead of stdout")

    p = sub.add_parser("compare", help="theory-vs-simulation sweep")
    _add_model_flags(p, grid=True)
    _add_run_flags(p)
    p.add_argument("--replicates", type=_positive_int, default=10)
    p.add_argument("--paper-scale", action="store_true", help=f"use {PAPER_REPLICATES} replicates")
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel worker processes")
    p.add_argument("--outdir", type=Path, default=None,
                   help=f"output directory (default ${OUTDIR_ENV} or ./results)")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="what to echo on stdout")

    p = sub.add_parser("validate", help="Monte Carlo oracle suite and invariant checks")
    p.add_argument("--quick", action="store_true", help="smaller samples for a fast smoke check")
    p.add_argument("--samples", type=_positive_int, default=None, help="samples per oracle (default 1e5, quick 2e4)")
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


# -- commands -------------------------------------------------------------------


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        experiment.atomic_write(out, text)
        logger.info("wrote %s", out)


def _churn_params(args) -> analytics.ChurnParams:
    try:
        return analytics.ChurnParams(N=args.n, bits=args.bits, alpha=args.alpha, r=args.r, S=args.S)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_theory(args) -> int:
    p = _churn_params(args)
    try:
        tp = analytics.theory_point(p, keep_cost=args.with_cost)
    except analytics.NoSteadyState as exc:
        logger.error("%s", exc)
        return 1
    if args.format == "json":
        text = json.dumps(tp.to_dict(with_cost=args.with_cost), indent=2) + "\n"
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quantity", "k", "value"])
        for name, value in (("rho", tp.rho), ("w1", tp.w1), ("d1", tp.d1), ("I", tp.inconsistency),
                            ("C1", tp.c1), ("L", tp.L)):
            w.writerow([name, "", value])
        for k in range(1, p.M + 1):
            w.writerow(["f_k", k, tp.f[k - 1]])
            w.writerow(["p_join", k, tp.p_join[k - 1]])
            for order in range(1, analytics.SHARE_ORDERS + 1):
                w.writerow([f"p_share{order}", k, tp.p_share[k - 1, order - 1]])
        text = buf.getvalue()
    _emit(text, args.out)
    return 0


def cmd_simulate(args) -> int:
    try:
        cfg = SimConfig(
            n0=args.n, bits=args.bits, S=args.S, r=args.r, alpha=args.alpha, lambda_f=args.lambda_f,
            seed=args.seed, burnin_events=args.burnin_events, measure_events=args.measure_events,
            probe_lookups_per_sample=args.probes, sample_every=args.sample_every,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sim = Simulation(cfg)
    logger.info("burn-in: %d events", cfg.effective_burnin)
    samples = []
    status = 0
    to_stdout = args.out is None and args.format == "csv"
    writer = csv.writer(sys.stdout, lineterminator="\n") if to_stdout else None
    try:
        sim.advance(cfg.effective_burnin)
        logger.info("measuring: %d events", cfg.effective_measure)
        if writer:
            writer.writerow(experiment.sample_header(cfg.M))
        for s in sim.measure(cfg.effective_measure):
            samples.append(s)
            if writer:
                writer.writerow(experiment.sample_record(s))
                sys.stdout.flush()
    except SimulationAborted as exc:
        logger.error("run aborted after %d events: %s", sim.events, exc)
        status = 1
    summary = experiment.run_summary(cfg, samples)
    summary["aborted"] = bool(status)
    if args.format == "json":
        _emit(json.dumps(summary, indent=2) + "\n", args.out if not status else None)
    elif args.out is not None and not status:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(experiment.sample_header(cfg.M))
        for s in samples:
            w.writerow(experiment.sample_record(s))
        _emit(buf.getvalue(), args.out)
    if samples:
        logger.info("w1=%.5f d1=%.5f I=%.5f L=%.3f over %d samples", summary["w1"], summary["d1"],
                    summary["I"] or math.nan, summary["L"] or math.nan, len(samples))
    return status


def cmd_compare(args) -> int:
    replicates = PAPER_REPLICATES if args.paper_scale else args.replicates
    try:
        spec = experiment.SweepSpec(
            r=tuple(args.r), alpha=tuple(args.alpha), n0=args.n, bits=args.bits, S=args.S,
            replicates=replicates, base_seed=args.seed, burnin_events=args.burnin_events,
            measure_events=args.measure_events, probe_lookups_per_sample=args.probes,
        )
        for r, a in spec.points():
            spec.churn_params(r, a)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    outdir = args.outdir or Path(os.environ.get(OUTDIR_ENV, "results"))
    logger.info("sweep: %d grid points x %d replicates, %d jobs", len(spec.points()), replicates, args.jobs)
    rows = experiment.run_sweep(spec, jobs=args.jobs, progress=lambda msg: logger.info("%s", msg))
    report = experiment.summarize(rows)
    if report.degraded:
        logger.error("degraded grid points (aborted runs): %s", report.degraded)
        return 1
    experiment.write_outputs(report, outdir)
    logger.info("wrote results under %s", outdir)
    if args.format == "json":
        sys.stdout.write(experiment.report_to_json(report))
    else:
        sys.stdout.write(experiment.rows_to_csv(rows))
    for metric, entry in report.summary.items():
        if "worst" in entry:
            logger.info("%-4s median rel_error %.3f, worst %.3f (tolerance %s)", metric,
                        entry["median"], entry["worst"], entry["tolerance"])
    return 0


def validation_checks(samples: int, seed: int, quick: bool = False) -> list[Check]:
    """Oracle cross-checks at 3 standard errors, plus exact invariants."""
    rng = np.random.default_rng(seed)
    checks: list[Check] = []

    def z_check(name: str, est: oracles.Estimate, value: float, proportion: bool = True) -> None:
        z = est.proportion_zscore(value) if proportion else est.zscore(value)
        checks.append(Check(name, abs(z) <= 3.0, f"theory={value:.6g} oracle={est.mean:.6g}±{est.stderr:.2g} z={z:+.2f}"))

    small = analytics.ChurnParams(N=64, bits=12, alpha=0.5, r=500)
    for k in (3, 6, 9) if quick else (3, 5, 7, 9, 12):
        for order in range(1, analytics.SHARE_ORDERS + 1):
            z_check(f"share_prob k={k} order={order}", oracles.share_prob_oracle(k, order, small, samples, rng),
                    analytics.share_prob(k, order, small))

    big = analytics.ChurnParams(N=1000, bits=20, alpha=0.5, r=500)
    for k in (10, 13) if quick else (6, 10, 13, 16):
        z_check(f"join_replication_prob k={k}", oracles.join_replication_oracle(k, big, samples, rng),
                analytics.join_replication_prob(k, big))

    f = analytics.fk_vector(big)
    for k in (12,) if quick else (8, 12, 16):
        h = analytics.fallback_table(k, big, f)
        means, errs = oracles.fallback_oracle(k, big, f, samples, rng)
        for i in range(1, k + 1):
            z_check(f"fallback_prob k={k} i={i}", oracles.Estimate(means[i - 1], errs[i - 1], samples), h[i - 1])

    static = analytics.ChurnParams(N=32, bits=10, alpha=0.5, r=500)
    table = analytics.lookup_cost_table(static, f=np.zeros(static.M), d=[0.0] * static.S)
    z_check("static lookup cost", oracles.static_cost_oracle(static, samples, rng), float(table[1:].mean()),
            proportion=False)

    for p in (big, small):
        fv = analytics.fk_vector(p)
        worst = max(abs(analytics.fk_balance_residual(fv[k - 1], k, p)) for k in range(1, p.M + 1))
        checks.append(Check(f"f_k root residual N={p.N} bits={p.bits}", worst < 1e-9, f"max |residual| = {worst:.2e}"))
        dev = max(abs(analytics.fallback_table(k, p, fv).sum() - 1.0) for k in range(1, p.M + 1))
        checks.append(Check(f"sum_i h_k(i) = 1 N={p.N} bits={p.bits}", dev < 1e-12, f"max deviation {dev:.2e}"))
        cost = analytics.lookup_cost_table(p, fv)
        c1 = analytics.c1_theory(p)
        checks.append(Check(f"C_t >= 1 N={p.N} bits={p.bits}", cost[1:].min() >= 1.0, f"min C_t = {cost[1:].min():.4f}"))
        d1 = analytics.d1_theory(p)
        # The series exceeds 1 + d1 by its higher-order terms, about d1**2.
        checks.append(Check(f"C_1 = 1 + d1 N={p.N} bits={p.bits}", abs(cost[1] - (1 + d1)) <= 2 * d1 * d1 + 1e-12,
                            f"C_1 = {cost[1]:.6f}, series = {c1:.6f}"))
    return checks


def cmd_validate(args) -> int:
    samples = args.samples or (20_000 if args.quick else 100_000)
    logger.info("oracle suite with %d samples per check", samples)
    checks = validation_checks(samples, args.seed, quick=args.quick)
    if args.format == "json":
        sys.stdout.write(json.dumps([c.__dict__ for c in checks], indent=2) + "\n")
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["check", "passed", "detail"])
        for c in checks:
            w.writerow([c.name, int(c.passed), c.detail])
    failed = [c for c in checks if not c.passed]
    logger.info("%d/%d checks passed", len(checks) - len(failed), len(checks))
    for c in failed:
        logger.error("FAILED %s: %s", c.name, c.detail)
    return 1 if failed else 0


COMMANDS = {"theory": cmd_theory, "simulate": cmd_simulate, "compare": cmd_compare, "validate": cmd_validate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"chord-churn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
