"""Convergence traces, error metrics and solver-side bookkeeping.

A trace is a flat long-format table with one row per
``(iteration, pair, metric)``.  Rows with ``pair == -1`` hold whole-subspace
aggregates (currently the spectral norm ``||V2^T U||``).
"""
import csv
import io
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

CSV_HEADER = ["iter", "pair", "metric", "value", "wall_s", "matvecs", "flag"]
METRICS = ("eig_err", "residual", "subspace_err")
AGGREGATE_PAIR = -1

FLAG_CONVERGED = "converged"
FLAG_NOT_CONVERGED = "not_converged"
FLAG_BREAKDOWN = "breakdown"
FLAG_WRONG_PAIR = "wrong_pair"


@dataclass(frozen=True)
class TraceRow:
    iter: int
    pair: int
    metric: str
    value: float
    wall_s: float
    matvecs: int
    flag: str = ""


@dataclass
class ConvergenceTrace:
    rows: List[TraceRow] = field(default_factory=list)
    converged: bool = False
    breakdown_sweeps: List[int] = field(default_factory=list)
    wrong_pair: bool = False

    # -- access ------------------------------------------------------------
    def series(self, metric, pair=0):
        """``(iters, values)`` arrays for one metric and pair."""
        sel = [r for r in self.rows if r.metric == metric and r.pair == pair]
        return np.array([r.iter for r in sel], dtype=int), np.array([r.value for r in sel])

    def first_iter_below(self, metric, threshold, pair=0):
        """First iteration whose value is ``<= threshold``; None if never."""
        for r in self.rows:
            if r.metric == metric and r.pair == pair and r.value <= threshold:
                return r.iter
        return None

    def first_row_below(self, metric, threshold, pair=0):
        for r in self.rows:
            if r.metric == metric and r.pair == pair and r.value <= threshold:
                return r
        return None

    @property
    def last_iter(self):
        return self.rows[-1].iter if self.rows else 0

    @property
    def total_matvecs(self):
        return self.rows[-1].matvecs if self.rows else 0

    @property
    def total_wall(self):
        return self.rows[-1].wall_s if self.rows else 0.0

    def final_worst(self, metric):
        rows = [r for r in self.rows if r.iter == self.last_iter and r.metric == metric and r.pair >= 0]
        return max((r.value for r in rows), default=float("nan"))

    def status_flags(self):
        flags = [FLAG_CONVERGED if self.converged else FLAG_NOT_CONVERGED]
        if self.wrong_pair:
            flags.append(FLAG_WRONG_PAIR)
        return flags

    def _row_flag(self, row):
        tokens = []
        if row.iter in self.breakdown_sweeps:
            tokens.append(FLAG_BREAKDOWN)
        if row.iter == self.last_iter:
            tokens.extend(self.status_flags())
        return "|".join(tokens)

    def offset(self, matvecs=0, wall_s=0.0):
        """Copy with every row shifted by a fixed setup cost."""
        rows = [
            TraceRow(r.iter, r.pair, r.metric, r.value, r.wall_s + wall_s, r.matvecs + matvecs)
            for r in self.rows
        ]
        return ConvergenceTrace(rows, self.converged, list(self.breakdown_sweeps), self.wrong_pair)

    # -- CSV -----------------------------------------------------------------
    def csv_rows(self):
        for r in self.rows:
            yield [str(r.iter), str(r.pair), r.metric, repr(float(r.value)),
                   repr(float(r.wall_s)), str(r.matvecs), self._row_flag(r)]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.csv_rows())
        return buf.getvalue()

    @classmethod
    def from_rows(cls, records):
        """Rebuild a trace from parsed CSV records (dicts keyed by header)."""
        rows, breakdown = [], set()
        converged = wrong = False
        for rec in records:
            row = TraceRow(int(rec["iter"]), int(rec["pair"]), rec["metric"], float(rec["value"]),
                           float(rec["wall_s"]), int(rec["matvecs"]))
            rows.append(row)
            tokens = set(filter(None, rec.get("flag", "").split("|")))
            if FLAG_BREAKDOWN in tokens:
                breakdown.add(row.iter)
            converged |= FLAG_CONVERGED in tokens
            wrong |= FLAG_WRONG_PAIR in tokens
        return cls(rows, converged, sorted(breakdown), wrong)

    @classmethod
    def from_csv(cls, text):
        return cls.from_rows(csv.DictReader(io.StringIO(text)))


def write_traces_csv(fh, traces, seeds=None):
    """Write one trace, or several tagged with a trailing ``seed`` column."""
    w = csv.writer(fh, lineterminator="\n")
    if seeds is None:
        (trace,) = traces
        w.writerow(CSV_HEADER)
        w.writerows(trace.csv_rows())
        return
    w.writerow(CSV_HEADER + ["seed"])
    for trace, seed in zip(traces, seeds):
        for rec in trace.csv_rows():
            w.writerow(rec + [str(seed)])


def read_traces_csv(text):
    """Parse CSV text into ``{seed: trace}`` (seed is None without the column)."""
    groups = {}
    for rec in csv.DictReader(io.StringIO(text)):
        key = int(rec["seed"]) if "seed" in rec and rec["seed"] not in (None, "") else None
        groups.setdefault(key, []).append(rec)
    return {k: ConvergenceTrace.from_rows(v) for k, v in groups.items()}


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

@dataclass
class MetricSet:
    residual: np.ndarray
    eig_err: Optional[np.ndarray] = None
    subspace_err: Optional[np.ndarray] = None  # per pair, ||V2^T u_i||
    subspace_err_2: Optional[float] = None  # ||V2^T U||_2
    subspace_err_fro: Optional[float] = None  # ||V2^T U||_F


def compute_metrics(U, lambdas, A, ref=None, AU=None, k=None):
    """Error metrics of approximate eigenpairs ``(lambdas[i], U[:, i])``.

    ``residual_i = ||A u_i - lambda_i u_i||`` needs only the operator.  With a
    reference decomposition also ``eig_err_i = |lambda_i - Lambda_i|`` and
    subspace errors against ``V2`` = reference eigenvectors ``k+1..n`` are
    returned; ``k`` defaults to the number of columns of ``U``.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if AU is None:
        AU = A.matmat(U)
    AU = np.asarray(AU).reshape(U.shape)
    residual = np.linalg.norm(AU - U * lambdas, axis=0)
    out = MetricSet(residual=residual)
    if ref is None:
        return out
    k = U.shape[1] if k is None else k
    out.eig_err = np.abs(lambdas - ref.Lambda[: len(lambdas)])
    proj = ref.V2(k).T @ U
    out.subspace_err = np.linalg.norm(proj, axis=0)
    out.subspace_err_fro = float(np.linalg.norm(proj))
    out.subspace_err_2 = float(np.linalg.norm(proj, 2)) if proj.size else 0.0
    return out


class Stopwatch:
    """Monotonic clock that can be paused while metrics are evaluated."""

    def __init__(self, enabled=True):
        self.enabled = enabled
        self._total = 0.0
        self._t0 = None

    def start(self):
        self._t0 = time.perf_counter()
        return self

    def elapsed(self):
        if not self.enabled:
            return 0.0
        running = time.perf_counter() - self._t0 if self._t0 is not None else 0.0
        return self._total + running

    def pause(self):
        if self._t0 is not None:
            self._total += time.perf_counter() - self._t0
            self._t0 = None

    def resume(self):
        if self._t0 is None:
            self._t0 = time.perf_counter()


class Monitor:
    """Collects trace rows while a solver runs.

    Metric evaluation against the reference happens with the stopwatch paused,
    so ``wall_s`` measures solver work only.
    """

    def __init__(self, A, reference=None, timing=True, target=0):
        self.A = A
        self.reference = reference
        self.trace = ConvergenceTrace()
        self.clock = Stopwatch(enabled=timing).start()
        self.target = target

    def record(self, it, U, lambdas, residuals, matvecs):
        wall = self.clock.elapsed()
        self.clock.pause()
        try:
            rows = self.trace.rows
            U = np.asarray(U)
            if U.ndim == 1:
                U = U[:, None]
            lambdas = np.atleast_1d(lambdas)
            residuals = np.atleast_1d(residuals)
            k = U.shape[1]
            for i in range(k):
                rows.append(TraceRow(it, i, "residual", float(residuals[i]), wall, matvecs))
            ref = self.reference
            if ref is not None:
                lam_ref = ref.Lambda[self.target : self.target + k]
                V2 = ref.V2(self.target + k)
                proj = V2.T @ U
                eig = np.abs(lambdas - lam_ref)
                sub = np.linalg.norm(proj, axis=0)
                for i in range(k):
                    rows.append(TraceRow(it, i, "eig_err", float(eig[i]), wall, matvecs))
                    rows.append(TraceRow(it, i, "subspace_err", float(sub[i]), wall, matvecs))
                if k > 1:
                    agg = float(np.linalg.norm(proj, 2))
                    rows.append(TraceRow(it, AGGREGATE_PAIR, "subspace_err", agg, wall, matvecs))
        finally:
            self.clock.resume()

    def flag_breakdown(self, it):
        if it not in self.trace.breakdown_sweeps:
            self.trace.breakdown_sweeps.append(it)

    def finish(self, converged, lambdas=None, tol=None):
        """Set the final status; with a reference, reject wrong eigenpairs."""
        self.clock.pause()
        wrong = False
        if self.reference is not None and lambdas is not None:
            lambdas = np.atleast_1d(lambdas)
            lam_ref = self.reference.Lambda[self.target : self.target + len(lambdas)]
            scale = max(abs(self.reference.Lambda[0]), np.finfo(float).tiny)
            limit = max(1e3 * (tol or 0.0), 1e-6) * scale
            wrong = bool(np.any(np.abs(lambdas - lam_ref) > limit))
        self.trace.wrong_pair = wrong
        self.trace.converged = bool(converged and not wrong)
        return self.trace


def quantile_band(values, lo=0.1, hi=0.9):
    """Width of the ``[lo, hi]`` quantile band of ``values``."""
    q = np.quantile(np.asarray(values, dtype=float), [lo, hi])
    return float(q[1] - q[0])
