"""``epsi-bench`` command line: configure, run, and record one experiment.

An experiment is a matrix source, a method and its knobs.  Each run writes a
long-format CSV trace (see :mod:`epsi_bench.trace`) atomically and prints a
one-line summary.  Exit codes: 0 on success (including non-convergence,
which is recorded in the ``flag`` column), 1 for I/O errors, 2 for invalid
configurations, 3 when a solver hits an unrecoverable numerical error.
"""
import argparse
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, fields, replace

from threadpoolctl import threadpool_limits

from .baselines import BaselineMethod, run_baseline
from .epsi import BreakdownError, SolveOptions, WoodburyError, epsi_solve
from .lazy_epsi import LazyOptions, lazy_epsi_solve
from .matrix_core import (
    DENSE_REFERENCE_CAP,
    MatrixMarketError,
    SpectrumSpec,
    dense_reference,
    gen_low_rank_noise,
    gen_synthetic,
    load_matrix_market,
)
from .sketch import NystromError, apply_shift, estimate_distortion, nystrom_approximate
from .trace import Stopwatch, compute_metrics, write_traces_csv  # noqa: F401  (re-export)

METHODS = ("epsi", "lazy_epsi", "power", "subspace", "davidson", "inexact_rqi")
SKETCH_METHODS = ("epsi", "lazy_epsi")
BLOCK_METHODS = ("lazy_epsi", "subspace")
METHOD_ALIASES = {"lazy-epsi": "lazy_epsi", "irqi": "inexact_rqi", "inexact-rqi": "inexact_rqi"}
SUMMARY_METRICS = ("auto", "residual", "eig_err", "subspace_err")


class ConfigError(ValueError):
    """Invalid experiment configuration; reported before any computation."""


# --------------------------------------------------------------------------
# Matrix sources
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MatrixSource:
    """Parsed ``--matrix`` argument.

    ``kind`` is ``mm`` (``path`` set), ``exp`` (``spec`` set) or ``lrn``
    (``params`` set).  ``seed`` fixes the generated matrix independently of
    the run seed, so repeated runs share one operator.
    """

    kind: str
    path: str = None
    spec: SpectrumSpec = None
    params: tuple = ()
    seed: int = 0

    @property
    def n(self):
        """Dimension if known without reading a file."""
        if self.kind == "exp":
            return self.spec.n
        if self.kind == "lrn":
            return dict(self.params)["n"]
        return None


def _parse_kv(body):
    out = {}
    for item in filter(None, body.split(",")):
        if "=" not in item:
            raise ConfigError(f"matrix parameter {item!r} is not key=value")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def parse_matrix_spec(text):
    """Parse ``mm:PATH``, ``gen:exp,n=N,kappa=K`` or ``gen:lrn,n=N,s=S,s1=V,s2=V``.

    Generated sources accept an optional ``seed=S`` (default 0).
    """
    if not isinstance(text, str) or ":" not in text:
        raise ConfigError(f"matrix must be mm:PATH or gen:..., got {text!r}")
    scheme, body = text.split(":", 1)
    if scheme == "mm":
        if not body:
            raise ConfigError("mm: needs a file path")
        return MatrixSource("mm", path=body)
    if scheme != "gen":
        raise ConfigError(f"unknown matrix scheme {scheme!r}")
    kind, _, rest = body.partition(",")
    kv = _parse_kv(rest)
    try:
        seed = int(kv.pop("seed", 0))
        if kind == "exp":
            spec = SpectrumSpec(n=int(kv.pop("n")), kind="exp_decay", kappa=float(kv.pop("kappa")))
            src = MatrixSource("exp", spec=spec, seed=seed)
        elif kind == "lrn":
            params = dict(n=int(kv.pop("n")), s=int(kv.pop("s")),
                          sigma1=float(kv.pop("s1")), sigma2=float(kv.pop("s2")))
            SpectrumSpec(n=params["n"], kind="low_rank_noise", s=params["s"],
                         sigma1=params["sigma1"], sigma2=params["sigma2"])
            src = MatrixSource("lrn", params=tuple(params.items()), seed=seed)
        else:
            raise ConfigError(f"unknown generator {kind!r}; expected exp or lrn")
    except KeyError as exc:
        raise ConfigError(f"gen:{kind} is missing parameter {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad matrix parameters in {text!r}: {exc}") from None
    if kv:
        raise ConfigError(f"unexpected matrix parameters {sorted(kv)}")
    return src


def build_matrix(src, want_reference=False):
    """Materialise the operator and, on request, its dense reference."""
    if src.kind == "mm":
        A = load_matrix_market(src.path)
        return A, (dense_reference(A) if want_reference else None)
    if src.kind == "exp":
        A, ref = gen_synthetic(src.spec, src.seed)
        return A, (ref if want_reference else None)
    p = dict(src.params)
    A = gen_low_rank_noise(p["n"], p["s"], p["sigma1"], p["sigma2"], src.seed)
    return A, (dense_reference(A) if want_reference else None)


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one run (or ``repeat`` seeded runs).

    ``max_iters`` doubles as the sweep cap for the block methods.
    """

    matrix: str
    method: str = "epsi"
    k: int = 1
    ell: int = None
    shift: object = "auto"
    tol: float = 1e-8
    max_iters: int = 500
    seed: int = 0
    reference: str = "none"
    out: str = None
    repeat: int = 1
    timing: bool = True
    init: str = "auto"
    metric: str = "auto"
    inner_tol: float = 1e-2
    inner_max: int = 50
    init_power_steps: int = 20

    def validate(self):
        """Return the normalised config; raise ConfigError on any problem."""
        method = METHOD_ALIASES.get(self.method, self.method)
        if method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        src = parse_matrix_spec(self.matrix)
        if int(self.k) < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if method not in BLOCK_METHODS and int(self.k) != 1:
            raise ConfigError(f"method {method} computes a single pair; k must be 1")
        if method in SKETCH_METHODS:
            if self.ell is None:
                raise ConfigError(f"method {method} needs a sketch size (--sketch)")
            if int(self.ell) < int(self.k):
                raise ConfigError(f"sketch size ell={self.ell} must be >= k={self.k}")
        shift = self.shift
        if isinstance(shift, str) and shift != "auto":
            try:
                shift = float(shift)
            except ValueError:
                raise ConfigError(f"shift must be 'auto' or a number, got {self.shift!r}") from None
        if not isinstance(shift, str) and shift < 0:
            raise ConfigError(f"shift must be >= 0, got {shift}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if int(self.max_iters) < 1 or int(self.repeat) < 1:
            raise ConfigError("max_iters and repeat must be >= 1")
        if self.reference not in ("none", "dense"):
            raise ConfigError(f"reference must be 'none' or 'dense', got {self.reference!r}")
        n = src.n
        if self.reference == "dense" and n is not None and n > DENSE_REFERENCE_CAP:
            raise ConfigError(f"dense reference is limited to n <= {DENSE_REFERENCE_CAP}, got n={n}")
        if n is not None and int(self.k) > n:
            raise ConfigError(f"k={self.k} exceeds n={n}")
        if n is not None and self.ell is not None and int(self.ell) > n:
            raise ConfigError(f"sketch size ell={self.ell} exceeds n={n}")
        if self.metric not in SUMMARY_METRICS:
            raise ConfigError(f"metric must be one of {SUMMARY_METRICS}")
        if self.metric in ("eig_err", "subspace_err") and self.reference != "dense":
            raise ConfigError(f"metric {self.metric} needs --reference dense")
        if self.init not in ("auto", "random"):
            raise ConfigError(f"init must be 'auto' or 'random', got {self.init!r}")
        try:
            BaselineMethod("inexact_rqi", self.inner_tol, self.inner_max, self.init_power_steps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return replace(self, method=method, shift=shift, k=int(self.k),
                       ell=None if self.ell is None else int(self.ell))

    @classmethod
    def from_mapping(cls, data):
        """Build from a JSON-style mapping; keys may use ``-`` or ``_``."""
        names = {f.name for f in fields(cls)}
        aliases = {"sketch": "ell"}
        kw = {}
        for key, val in data.items():
            key = key.replace("-", "_")
            if key == "no_timing":
                kw["timing"] = not val
                continue
            key = aliases.get(key, key)
            if key not in names:
                raise ConfigError(f"unknown configuration key {key!r}")
            kw[key] = val
        if "matrix" not in kw:
            raise ConfigError("configuration needs a matrix")
        return cls(**kw)


# --------------------------------------------------------------------------
# Running
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    trace: object
    state: object


def _check_loaded(cfg, A):
    if cfg.reference == "dense" and A.n > DENSE_REFERENCE_CAP:
        raise ConfigError(f"dense reference is limited to n <= {DENSE_REFERENCE_CAP}, got n={A.n}")
    if cfg.k > A.n or (cfg.ell is not None and cfg.ell > A.n):
        raise ConfigError(f"k={cfg.k} / ell={cfg.ell} exceed n={A.n}")


def run_once(cfg, A, ref, seed):
    """One seeded run of a validated config on a built operator."""
    timing = cfg.timing
    if cfg.method in SKETCH_METHODS:
        clock = Stopwatch(enabled=timing).start()
        nys = nystrom_approximate(A, cfg.ell, seed)
        nys = apply_shift(nys, cfg.shift, A, seed)
        setup_wall = clock.elapsed()
        if cfg.method == "epsi":
            opts = SolveOptions(cfg.tol, cfg.max_iters, seed)
            state, trace = epsi_solve(A, nys, cfg.init, opts, ref, timing)
        else:
            opts = LazyOptions(cfg.k, cfg.max_iters, cfg.tol, seed)
            state, trace = lazy_epsi_solve(A, nys, cfg.init, opts, ref, timing)
        trace = trace.offset(nys.matvecs, setup_wall)
    else:
        kind = cfg.method
        method = BaselineMethod(kind, cfg.inner_tol, cfg.inner_max, cfg.init_power_steps)
        if kind == "subspace":
            opts = LazyOptions(cfg.k, cfg.max_iters, cfg.tol, seed)
        else:
            opts = SolveOptions(cfg.tol, cfg.max_iters, seed)
        state, trace = run_baseline(A, method, cfg.k, cfg.init, opts, ref, timing)
    return RunResult(seed, trace, state)


def summary_line(cfg, result):
    metric = cfg.metric
    if metric == "auto":
        metric = "subspace_err" if cfg.reference == "dense" else "residual"
    tr = result.trace
    status = "|".join(tr.status_flags())
    return (f"{cfg.method} seed={result.seed}: worst {metric}={tr.final_worst(metric):.3e} "
            f"iters={tr.last_iter} wall={tr.total_wall:.3f}s matvecs={tr.total_matvecs} {status}")


def write_csv_atomic(path, results, with_seed):
    """Write traces to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".epsi-bench-", suffix=".csv", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            traces = [r.trace for r in results]
            write_traces_csv(fh, traces, [r.seed for r in results] if with_seed else None)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def execute(cfg, out=None):
    """Validate, run and write; returns the list of :class:`RunResult`.

    Raises ConfigError, OSError, MatrixMarketError or solver errors; the
    CLI maps these to exit codes.  ``out`` defaults to ``sys.stdout``.
    """
    out = sys.stdout if out is None else out
    cfg = cfg.validate()
    src = parse_matrix_spec(cfg.matrix)
    if cfg.out is not None:
        directory = os.path.dirname(os.path.abspath(cfg.out))
        if not os.path.isdir(directory):
            raise FileNotFoundError(f"output directory does not exist: {directory}")
    dense = cfg.reference == "dense"
    A, ref = build_matrix(src, want_reference=dense and src.kind == "exp")
    _check_loaded(cfg, A)
    if dense and ref is None:
        ref = dense_reference(A)
    results = []
    for i in range(cfg.repeat):
        res = run_once(cfg, A, ref, cfg.seed + i)
        results.append(res)
        print(summary_line(cfg, res), file=out)
    if cfg.out is not None:
        write_csv_atomic(cfg.out, results, with_seed=cfg.repeat > 1)
    return results


def run_experiment(cfg, out=None, err=None):
    """Run ``cfg`` and return a process exit code (see module docstring)."""
    err = sys.stderr if err is None else err
    try:
        execute(cfg, out)
    except ConfigError as exc:
        print(f"epsi-bench: invalid configuration: {exc}", file=err)
        return 2
    except (OSError, MatrixMarketError) as exc:
        print(f"epsi-bench: I/O error: {exc}", file=err)
        return 1
    except (NystromError, WoodburyError, BreakdownError) as exc:
        print(f"epsi-bench: solver error: {exc}", file=err)
        return 3
    return 0


def sketch_info(matrix, ell, seed, out=None, head=10):
    """Print sketch size, stability shift, distortion estimate and top eigenvalues."""
    out = sys.stdout if out is None else out
    A, _ = build_matrix(parse_matrix_spec(matrix))
    if not 1 <= ell <= A.n:
        raise ConfigError(f"sketch size must satisfy 1 <= ell <= n={A.n}, got {ell}")
    nys = nystrom_approximate(A, ell, seed)
    est = estimate_distortion(A, nys, "power_residual", seed=seed)
    lam = " ".join(f"{v:.6e}" for v in nys.lam[:head])
    print(f"n={A.n} ell={nys.ell} nu={nys.nu:.6e} eta_estimate={est.eta:.6e} ({est.method})", file=out)
    print(f"lambda_hat[:{min(head, nys.ell)}]= {lam}", file=out)
    return nys, est


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------

def _shift_arg(text):
    return text if text == "auto" else float(text)


def build_parser():
    p = argparse.ArgumentParser(prog="epsi-bench", description="EPSI eigensolver benchmark harness")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write its CSV trace")
    run.add_argument("--config", help="JSON file with default settings (flags override)")
    run.add_argument("--matrix", help="mm:PATH | gen:exp,n=N,kappa=K | gen:lrn,n=N,s=S,s1=V,s2=V")
    run.add_argument("--method", choices=sorted(set(METHODS) | set(METHOD_ALIASES)))
    run.add_argument("--k", type=int)
    run.add_argument("--sketch", type=int, dest="ell")
    run.add_argument("--shift", type=_shift_arg)
    run.add_argument("--tol", type=float)
    run.add_argument("--max-iters", type=int, dest="max_iters")
    run.add_argument("--seed", type=int)
    run.add_argument("--reference", choices=("dense", "none"))
    run.add_argument("--repeat", type=int)
    run.add_argument("--out")
    run.add_argument("--init", choices=("auto", "random"))
    run.add_argument("--metric", choices=SUMMARY_METRICS)
    run.add_argument("--inner-tol", type=float, dest="inner_tol")
    run.add_argument("--inner-max", type=int, dest="inner_max")
    run.add_argument("--init-power-steps", type=int, dest="init_power_steps")
    run.add_argument("--no-timing", action="store_const", const=False, dest="timing",
                     help="write wall_s as 0 so traces are byte-reproducible")

    info = sub.add_parser("sketch-info", help="describe a Nystrom sketch of a matrix")
    info.add_argument("--matrix", required=True)
    info.add_argument("--sketch", type=int, required=True, dest="ell")
    info.add_argument("--seed", type=int, default=0)
    return p


def config_from_args(args):
    """Merge ``--config`` JSON with explicit flags; flags win."""
    data = {}
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ConfigError("JSON config must be an object")
        data.update(loaded)
    for f in fields(ExperimentConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            data[f.name] = val
    return ExperimentConfig.from_mapping(data)


def _threads():
    raw = os.environ.get("EPSI_BENCH_THREADS", "1")
    try:
        val = int(raw)
    except ValueError:
        raise ConfigError(f"EPSI_BENCH_THREADS must be an integer, got {raw!r}") from None
    if val < 1:
        raise ConfigError(f"EPSI_BENCH_THREADS must be >= 1, got {val}")
    return val


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        threads = _threads()
        if args.command == "sketch-info":
            with threadpool_limits(limits=threads):
                sketch_info(args.matrix, args.ell, args.seed)
            return 0
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"epsi-bench: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (OSError, MatrixMarketError, json.JSONDecodeError) as exc:
        print(f"epsi-bench: I/O error: {exc}", file=sys.stderr)
        return 1
    with threadpool_limits(limits=threads):
        return run_experiment(cfg)


def config_to_json(cfg):
    """JSON text for ``cfg`` using the CLI key names."""
    d = asdict(cfg)
    d["sketch"] = d.pop("ell")
    return json.dumps(d, indent=2, sort_keys=True, default=float)


if __name__ == "__main__":
    sys.exit(main())
