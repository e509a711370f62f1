"""Replicated simulation runs compared against the analytical predictions.

A sweep runs every (r, alpha) grid point ``replicates`` times with seeds
``base_seed + i``, time-averages each run's post-burn-in samples, pools the
replicate means and pairs them with the analytics values.  Rows can be
written as CSV, as a JSON report, and as gnuplot-ready data files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import analytics
from .simulator import SimConfig, Simulation, SimulationAborted

logger = logging.getLogger(__name__)

CSV_FIELDS = ("r", "alpha", "n0", "bits", "metric", "k", "theory", "sim_mean", "sim_stderr", "rel_error")
METRICS = ("w1", "d1", "I", "f_k", "L")
REL_EPS = 1e-12

# Relative-error tolerances per metric; f_k rows only count where the
# prediction exceeds FK_FLOOR.
TOLERANCES = {"w1": 0.15, "d1": 0.20, "I": 0.20, "f_k": 0.20, "L": 0.10}
FK_FLOOR = 0.002


@dataclass(frozen=True)
class SweepSpec:
    r: tuple[float, ...] = (500.0,)
    alpha: tuple[float, ...] = (0.5,)
    n0: int = 1000
    bits: int = 20
    S: int = 6
    replicates: int = 10
    base_seed: int = 0
    burnin_events: int | None = None
    measure_events: int | None = None
    probe_lookups_per_sample: int = 100

    def __post_init__(self) -> None:
        object.__setattr__(self, "r", tuple(float(x) for x in self.r))
        object.__setattr__(self, "alpha", tuple(float(x) for x in self.alpha))
        if not self.r or not self.alpha:
            raise ValueError("r and alpha grids must be non-empty")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        # Fail fast on bad grid values rather than inside a worker.
        for r, a in self.points():
            self.config(r, a, 0)

    def points(self) -> list[tuple[float, float]]:
        return [(r, a) for r in self.r for a in self.alpha]

    def config(self, r: float, alpha: float, replicate: int) -> SimConfig:
        return SimConfig(
            n0=self.n0,
            bits=self.bits,
            S=self.S,
            r=r,
            alpha=alpha,
            seed=self.base_seed + replicate,
            burnin_events=self.burnin_events,
            measure_events=self.measure_events,
            probe_lookups_per_sample=self.probe_lookups_per_sample,
        )

    def churn_params(self, r: float, alpha: float) -> analytics.ChurnParams:
        return analytics.ChurnParams(N=self.n0, bits=self.bits, alpha=alpha, r=r, S=self.S)


@dataclass
class ComparisonRow:
    r: float
    alpha: float
    n0: int
    bits: int
    metric: str
    k: int | None
    theory: float
    sim_mean: float
    sim_stderr: float
    rel_error: float
    replicates: int = 0
    aborted: int = 0

    @property
    def degraded(self) -> bool:
        return self.aborted > 0

    def csv_record(self) -> dict:
        rec = {name: getattr(self, name) for name in CSV_FIELDS}
        rec["k"] = "" if self.k is None else self.k
        return rec


@dataclass
class ReplicateSummary:
    """Time averages of one run's post-burn-in samples."""

    seed: int
    samples: int
    w1: float
    d1: float
    I: float
    L: float
    f: list[float]
    n_mean: float
    failed_probes: int
    gaps: list[int] | None = field(default=None, repr=False)


@dataclass
class Report:
    rows: list[ComparisonRow]
    summary: dict[str, dict]
    flags: list[ComparisonRow]
    degraded: list[tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "summary": self.summary,
            "flags": [_row_dict(row) for row in self.flags],
            "degraded": [{"r": r, "alpha": a} for r, a in self.degraded],
            "rows": [_row_dict(row) for row in self.rows],
        }


def rel_error(sim: float, theory: float) -> float:
    return abs(sim - theory) / max(theory, REL_EPS)


def run_replicate(cfg: SimConfig, keep_gaps: bool = False) -> ReplicateSummary:
    """Burn in, measure, and average one run.  Raises SimulationAborted."""
    sim = Simulation(cfg)
    sim.advance(cfg.effective_burnin)
    samples = list(sim.measure(cfg.effective_measure))
    if not samples:
        raise ValueError("measurement window produced no samples; raise measure_events")
    costs = [s.probe_cost_mean for s in samples if s.probes]
    f = np.mean([s.f for s in samples], axis=0)
    return ReplicateSummary(
        seed=cfg.seed,
        samples=len(samples),
        w1=float(np.mean([s.w1 for s in samples])),
        d1=float(np.mean([s.d1 for s in samples])),
        I=float(np.mean([s.probe_inconsistency for s in samples if s.probes] or [math.nan])),
        L=float(np.mean(costs)) if costs else math.nan,
        f=f.tolist(),
        n_mean=float(np.mean([s.n_now for s in samples])),
        failed_probes=sum(s.failed_probes for s in samples),
        gaps=sim.net.gaps().tolist() if keep_gaps else None,
    )


def _run_task(task: tuple) -> tuple[tuple[float, float, int], ReplicateSummary | str]:
    r, a, i, cfg, keep_gaps = task
    try:
        return (r, a, i), run_replicate(cfg, keep_gaps)
    except SimulationAborted as exc:
        return (r, a, i), f"aborted: {exc}"


def pooled(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error across replicates (nan stderr for one value)."""
    x = np.asarray([v for v in values if not math.isnan(v)], dtype=float)
    if len(x) == 0:
        return math.nan, math.nan
    if len(x) == 1:
        return float(x[0]), math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


def run_replicates(
    spec: SweepSpec,
    jobs: int = 1,
    progress: Callable[[str], None] | None = None,
    keep_gaps: bool = False,
) -> dict[tuple[float, float], list[ReplicateSummary | str]]:
    """All replicate runs of a sweep, keyed by grid point, in replicate order.

    Failed runs appear as an ``"aborted: ..."`` string in their slot.
    """
    tasks = [(r, a, i, spec.config(r, a, i), keep_gaps) for r, a in spec.points() for i in range(spec.replicates)]
    results: dict[tuple[float, float, int], ReplicateSummary | str] = {}
    if jobs <= 1 or len(tasks) == 1:
        for task in tasks:
            key, res = _run_task(task)
            results[key] = res
            if progress:
                progress(f"r={key[0]:g} alpha={key[1]:g} replicate {key[2]}: done")
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, res in pool.map(_run_task, tasks):
                results[key] = res
                if progress:
                    progress(f"r={key[0]:g} alpha={key[1]:g} replicate {key[2]}: done")
    out: dict[tuple[float, float], list] = {}
    for r, a in spec.points():
        out[(r, a)] = [results[(r, a, i)] for i in range(spec.replicates)]
    return out


def compare_point(
    spec: SweepSpec,
    r: float,
    alpha: float,
    reps: Sequence[ReplicateSummary | str],
    theory: analytics.TheoryPoint | None = None,
) -> list[ComparisonRow]:
    """Theory-vs-simulation rows for one grid point."""
    ok = [x for x in reps if isinstance(x, ReplicateSummary)]
    aborted = len(reps) - len(ok)
    if aborted:
        logger.warning("r=%g alpha=%g: %d of %d replicates aborted", r, alpha, aborted, len(reps))
    p = spec.churn_params(r, alpha)
    if theory is None:
        theory = _theory_or_nan(p)

    def row(metric: str, k: int | None, th: float, values: list[float]) -> ComparisonRow:
        mean, se = pooled(values)
        return ComparisonRow(
            r=r, alpha=alpha, n0=spec.n0, bits=spec.bits, metric=metric, k=k,
            theory=float(th), sim_mean=mean, sim_stderr=se, rel_error=rel_error(mean, th),
            replicates=len(ok), aborted=aborted,
        )

    rows = [
        row("w1", None, theory.w1, [x.w1 for x in ok]),
        row("d1", None, theory.d1, [x.d1 for x in ok]),
        row("I", None, theory.inconsistency, [x.I for x in ok]),
    ]
    for k in range(1, p.M + 1):
        rows.append(row("f_k", k, theory.f[k - 1], [x.f[k - 1] for x in ok]))
    rows.append(row("L", None, theory.L, [x.L for x in ok]))
    return rows


def _theory_or_nan(p: analytics.ChurnParams) -> analytics.TheoryPoint:
    try:
        return analytics.theory_point(p)
    except analytics.NoSteadyState as exc:
        logger.warning("no steady state for r=%g alpha=%g: %s", p.r, p.alpha, exc)
        nan = math.nan
        return analytics.TheoryPoint(
            params=p, rho=p.rho, w1=analytics.w1_theory(p), d1=analytics.d1_theory(p),
            inconsistency=analytics.inconsistency_theory(p), f=np.full(p.M, nan),
            p_join=np.full(p.M, nan), p_share=np.full((p.M, analytics.SHARE_ORDERS), nan),
            c1=nan, L=nan,
        )


def run_sweep(
    spec: SweepSpec,
    jobs: int = 1,
    progress: Callable[[str], None] | None = None,
) -> list[ComparisonRow]:
    """Rows for every grid point, sorted by (r, alpha) then metric order."""
    reps = run_replicates(spec, jobs=jobs, progress=progress)
    rows: list[ComparisonRow] = []
    for r, a in sorted(reps):
        rows.extend(compare_point(spec, r, a, reps[(r, a)]))
    return rows


def _counts_toward(row: ComparisonRow) -> bool:
    if math.isnan(row.theory) or math.isnan(row.sim_mean):
        return False
    if row.metric == "f_k":
        return row.theory > FK_FLOOR
    return True


def summarize(rows: Iterable[ComparisonRow], tolerances: dict[str, float] | None = None) -> Report:
    """Worst and median relative error per metric, plus out-of-tolerance rows."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to summarize")
    tol = dict(TOLERANCES if tolerances is None else tolerances)
    summary: dict[str, dict] = {}
    flags: list[ComparisonRow] = []
    for metric in dict.fromkeys(row.metric for row in rows):
        picked = [row for row in rows if row.metric == metric and _counts_toward(row)]
        errs = np.array([row.rel_error for row in picked])
        entry = {"rows": len(picked), "tolerance": tol.get(metric)}
        if len(errs):
            worst = picked[int(np.argmax(errs))]
            entry.update(worst=float(errs.max()), median=float(np.median(errs)),
                         worst_at={"r": worst.r, "alpha": worst.alpha, "k": worst.k})
        summary[metric] = entry
        if metric in tol:
            flags.extend(row for row in picked if row.rel_error > tol[metric])
    degraded = sorted({(row.r, row.alpha) for row in rows if row.degraded})
    for row in rows:
        if math.isnan(row.sim_mean) and (row.r, row.alpha) not in degraded:
            degraded.append((row.r, row.alpha))
    return Report(rows=rows, summary=summary, flags=flags, degraded=degraded)


# -- output -------------------------------------------------------------------


def _row_dict(row: ComparisonRow) -> dict:
    out = asdict(row)
    for key, value in out.items():
        if isinstance(value, float) and not math.isfinite(value):
            out[key] = None
    return out


def atomic_write(path: str | os.PathLike, text: str) -> Path:
    """Write ``text`` to ``path`` via a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def rows_to_csv(rows: Iterable[ComparisonRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.csv_record())
    return buf.getvalue()


def report_to_json(report: Report) -> str:
    return json.dumps(report.to_dict(), indent=2, allow_nan=False) + "\n"


def gnuplot_files(rows: Iterable[ComparisonRow]) -> dict[str, str]:
    """Two-column data files keyed by file name.

    Scalar metrics give ``r value`` per alpha; dead fingers give
    ``k value`` per (alpha, r).  Each series comes as a ``_sim`` and a
    ``_theory`` file.
    """
    series: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        if row.metric == "f_k":
            stem = f"f_k_alpha{row.alpha:g}_r{row.r:g}"
            x = float(row.k)
        else:
            stem = f"{row.metric}_alpha{row.alpha:g}"
            x = row.r
        series.setdefault(stem + "_sim", []).append((x, row.sim_mean))
        series.setdefault(stem + "_theory", []).append((x, row.theory))
    files = {}
    for stem, points in series.items():
        lines = [f"# {stem}"] + [f"{x:g} {y:.10g}" for x, y in sorted(points)]
        files[stem + ".dat"] = "\n".join(lines) + "\n"
    return files


def write_outputs(report: Report, outdir: str | os.PathLike) -> list[Path]:
    outdir = Path(outdir)
    written = [
        atomic_write(outdir / "comparison.csv", rows_to_csv(report.rows)),
        atomic_write(outdir / "report.json", report_to_json(report)),
    ]
    for name, text in gnuplot_files(report.rows).items():
        written.append(atomic_write(outdir / "gnuplot" / name, text))
    return written


SAMPLE_FIELDS = ("time", "n_now", "w1", "d1", "probe_inconsistency", "probe_cost_mean",
                 "probes", "failed_probes")


def sample_header(M: int) -> list[str]:
    return list(SAMPLE_FIELDS) + [f"f{k}" for k in range(1, M + 1)]


def sample_record(sample) -> list:
    return [getattr(sample, name) for name in SAMPLE_FIELDS] + list(sample.f)


def run_summary(cfg: SimConfig, samples: Sequence) -> dict:
    """JSON-ready summary of one simulate run."""
    def avg(values: list[float]) -> float | None:
        values = [v for v in values if not math.isnan(v)]
        return float(np.mean(values)) if values else None

    return {
        "config": asdict(cfg),
        "burnin_events": cfg.effective_burnin,
        "measure_events": cfg.effective_measure,
        "samples": len(samples),
        "w1": avg([s.w1 for s in samples]),
        "d1": avg([s.d1 for s in samples]),
        "I": avg([s.probe_inconsistency for s in samples if s.probes]),
        "L": avg([s.probe_cost_mean for s in samples if s.probes]),
        "f": np.mean([s.f for s in samples], axis=0).tolist() if samples else [],
        "failed_probes": sum(s.failed_probes for s in samples),
    }
