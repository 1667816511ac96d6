"""Reference eigensolvers used for comparison runs.

All solvers report through :class:`~epsi_bench.trace.Monitor`, so their traces
share the EPSI schema and matvec accounting:

* power iteration, one product per step;
* subspace iteration, ``U <- orth(AU)`` plus Rayleigh-Ritz, ``k`` per sweep;
* single-vector Davidson with the diagonal preconditioner, one per step;
* inexact Rayleigh quotient iteration, CG inner solves counted in full.
"""
from dataclasses import dataclass

import numpy as np

from ._rng import STREAM_INIT, STREAM_MISC, make_rng, random_unit_vector
from .epsi import BREAKDOWN_NORM, BreakdownError, EpsiState, SolveOptions, make_state
from .lazy_epsi import (
    LazyOptions,
    SubspaceState,
    _append_orthonormal,
    initial_basis,
    orthogonalization_step,
)
from .trace import Monitor

KINDS = ("power", "subspace", "davidson", "inexact_rqi")
DAVIDSON_GUARD = 1e-12
DAVIDSON_COLLINEAR = 1e-12


@dataclass(frozen=True)
class BaselineMethod:
    """Method tag plus the inner-solver knobs of inexact RQI.

    ``inner_tol`` is the relative CG tolerance, ``inner_max`` the CG iteration
    cap and ``init_power_steps`` the number of warm-start power steps.
    """

    kind: str = "power"
    inner_tol: float = 1e-2
    inner_max: int = 50
    init_power_steps: int = 20

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}; expected one of {KINDS}")
        if not 0 < self.inner_tol < 1:
            raise ValueError(f"inner_tol must lie in (0, 1), got {self.inner_tol}")
        if int(self.inner_max) < 1:
            raise ValueError(f"inner_max must be >= 1, got {self.inner_max}")
        if int(self.init_power_steps) < 0:
            raise ValueError(f"init_power_steps must be >= 0, got {self.init_power_steps}")


def _start_vector(A, u0, seed):
    if isinstance(u0, str):
        if u0 == "random":
            return random_unit_vector(make_rng(seed, STREAM_INIT), A.n)
        raise ValueError(f"unknown initialisation {u0!r}")
    return u0


def _power_step(A, state):
    """Normalised ``A u``; reuses the cached product, one new matvec."""
    Au = state.Au
    nrm = np.linalg.norm(Au)
    if not nrm > BREAKDOWN_NORM:
        raise BreakdownError(f"power iteration breakdown at iteration {state.iter}: ||Au|| = {nrm:.3e}")
    w = Au / nrm
    Aw = A.matvec(w)
    lam = float(w @ Aw)
    return EpsiState(u=w, lambda_R=lam, iter=state.iter + 1,
                     residual=float(np.linalg.norm(Aw - lam * w)),
                     matvecs=state.matvecs + 1, Au=Aw)


def _run_vector_method(A, state, step, opts, mon):
    """Shared loop: record, step until the relative residual meets ``tol``."""
    best = state
    converged = state.rel_residual <= opts.tol
    while not converged and state.iter < opts.max_iters:
        nxt = step(state)
        if nxt is None:
            break
        state = nxt
        mon.record(state.iter, state.u, state.lambda_R, state.residual, state.matvecs)
        if state.rel_residual < best.rel_residual:
            best = state
        converged = state.rel_residual <= opts.tol
    final = state if converged else best
    return final, mon.finish(converged, final.lambda_R, opts.tol)


def power_iteration(A, u0="random", opts=SolveOptions(), reference=None, timing=True):
    """Normalised power iteration ``u <- A u / ||A u||`` for the top eigenpair.

    Returns ``(EpsiState, ConvergenceTrace)``.  Raises
    :class:`~epsi_bench.epsi.BreakdownError` if ``A u`` vanishes.
    """
    mon = Monitor(A, reference, timing=timing)
    state = make_state(A, _start_vector(A, u0, opts.seed))
    mon.record(0, state.u, state.lambda_R, state.residual, state.matvecs)
    return _run_vector_method(A, state, lambda s: _power_step(A, s), opts, mon)


def subspace_iteration(A, k, U0="random", opts=None, reference=None, timing=True):
    """Block power iteration with Rayleigh-Ritz extraction each sweep.

    ``opts`` is a :class:`~epsi_bench.lazy_epsi.LazyOptions` (``k`` is taken
    from the argument).  Rank loss in ``A U`` is repaired with random
    orthogonal columns and flagged as a breakdown sweep.
    """
    opts = LazyOptions(k=k) if opts is None else LazyOptions(k, opts.q_max, opts.tol, opts.seed)
    opts.validate(None, A.n)
    rng = make_rng(opts.seed, STREAM_MISC)
    mon = Monitor(A, reference, timing=timing)

    if isinstance(U0, str) and U0 == "auto":
        U0 = "random"
    U = initial_basis(A, None, U0, k, opts.seed)
    U, theta, AU = orthogonalization_step(A, U)
    mv = k
    res = np.linalg.norm(AU - U * theta, axis=0)
    mon.record(0, U, theta, res, mv)

    converged = np.max(res) / max(abs(theta[0]), np.finfo(float).tiny) <= opts.tol
    q = 0
    while not converged and q < opts.q_max:
        q += 1
        Q = np.empty((A.n, 0))
        for i in range(k):
            Q, broke = _append_orthonormal(Q, AU[:, i], rng)
            if broke:
                mon.flag_breakdown(q)
        U, theta, AU = orthogonalization_step(A, Q)
        mv += k
        res = np.linalg.norm(AU - U * theta, axis=0)
        mon.record(q, U, theta, res, mv)
        converged = np.max(res) / max(abs(theta[0]), np.finfo(float).tiny) <= opts.tol

    trace = mon.finish(converged, theta, opts.tol)
    return SubspaceState(U=U, lambdas=theta, sweep=q, residuals=res, matvecs=mv), trace


def davidson_correction(diag, u, Au, lam):
    """Diagonally preconditioned correction ``(D - lam I)^{-1} (A - lam I) u``.

    Denominators smaller than ``1e-12 * max(|lam|, max|D|)`` in magnitude are
    clamped to that size, keeping their sign (zero counts as positive).
    """
    scale = max(abs(lam), float(np.max(np.abs(diag))) if diag.size else 0.0, np.finfo(float).tiny)
    guard = DAVIDSON_GUARD * scale
    denom = diag - lam
    small = np.abs(denom) < guard
    if np.any(small):
        denom = denom.copy()
        denom[small] = np.where(denom[small] < 0, -guard, guard)
    return (Au - lam * u) / denom


def davidson_method(A, u0="auto", opts=SolveOptions(), reference=None, timing=True):
    """Single-vector Davidson with the diagonal preconditioner ``D = diag(A)``.

    ``u0='auto'`` starts from the coordinate vector of the largest diagonal
    entry, the customary Davidson guess; ``'random'`` and explicit vectors
    are accepted as for the other solvers.

    Each step forms the correction of :func:`davidson_correction`, takes the
    part orthogonal to ``u`` and keeps the top Ritz vector of the
    two-dimensional space ``span{u, t}``.  One matvec per step.  A correction
    parallel to ``u`` carries no new direction; the step is flagged as a
    breakdown and the iteration stops.
    """
    mon = Monitor(A, reference, timing=timing)
    diag = np.asarray(A.diagonal(), dtype=float)
    if isinstance(u0, str) and u0 == "auto":
        u0 = np.zeros(A.n)
        u0[int(np.argmax(diag))] = 1.0
    state = make_state(A, _start_vector(A, u0, opts.seed))
    mon.record(0, state.u, state.lambda_R, state.residual, state.matvecs)

    def step(s):
        u, Au = s.u, s.Au
        t = davidson_correction(diag, u, Au, s.lambda_R)
        t0 = np.linalg.norm(t)
        for _ in range(2):
            t = t - u * (u @ t)
        nt = np.linalg.norm(t)
        if not (t0 > 0 and nt > DAVIDSON_COLLINEAR * t0):
            mon.flag_breakdown(s.iter)
            return None
        t = t / nt
        At = A.matvec(t)
        H = np.array([[s.lambda_R, u @ At], [u @ At, t @ At]])
        theta, P = np.linalg.eigh(H)
        a, b = P[:, -1]
        if a < 0:
            a, b = -a, -b
        x = a * u + b * t
        Ax = a * Au + b * At
        nx = np.linalg.norm(x)
        x, Ax = x / nx, Ax / nx
        lam = float(x @ Ax)
        return EpsiState(u=x, lambda_R=lam, iter=s.iter + 1,
                         residual=float(np.linalg.norm(Ax - lam * x)),
                         matvecs=s.matvecs + 1, Au=Ax)

    return _run_vector_method(A, state, step, opts, mon)


def projected_cg(A, u, lam, rhs, tol, maxiter):
    """CG on ``P (lam I - A) P t = rhs`` in the complement of ``u``.

    ``P = I - u u^T``.  The system is indefinite away from the top eigenpair,
    so CG stops as soon as it meets a direction of non-positive curvature and
    returns the current iterate.  Returns ``(t, iterations, exited_early)``;
    each iteration costs one product with ``A``.
    """
    def op(x):
        x = x - u * (u @ x)
        y = lam * x - A.matvec(x)
        return y - u * (u @ y)

    rhs = rhs - u * (u @ rhs)
    t = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rr = float(r @ r)
    stop = (tol * np.sqrt(rr)) ** 2
    for it in range(1, maxiter + 1):
        q = op(p)
        curv = float(p @ q)
        if not curv > 0:
            return t, it, True
        alpha = rr / curv
        t = t + alpha * p
        r = r - alpha * q
        rr_new = float(r @ r)
        if rr_new <= stop:
            return t, it, False
        p = r + (rr_new / rr) * p
        rr = rr_new
    return t, maxiter, False


def inexact_rqi(A, u0="random", opts=SolveOptions(), method=BaselineMethod("inexact_rqi"),
                reference=None, timing=True):
    """Rayleigh quotient iteration with an inexact CG inner solve.

    After ``method.init_power_steps`` power steps (recorded as ordinary
    iterations), each step takes ``lam = u^T A u`` and the correction ``t``
    orthogonal to ``u`` solving ``P (lam I - A) P t = (A - lam I) u`` by
    :func:`projected_cg`; then ``u <- (u + t) / ||u + t||``.  With an exact
    solve this is the same direction as ``(A - lam I)^{-1} u``, but the
    projected system keeps CG away from the singular direction ``u``.  When
    CG meets negative curvature before its first update the step falls back
    to ``t = r / lam``, which is a plain power step.  Inner products with
    ``A`` are included in the cumulative matvec count.
    """
    mon = Monitor(A, reference, timing=timing)
    state = make_state(A, _start_vector(A, u0, opts.seed))
    mon.record(0, state.u, state.lambda_R, state.residual, state.matvecs)
    warm = int(method.init_power_steps)

    def step(s):
        if s.iter < warm:
            return _power_step(A, s)
        u, Au, lam = s.u, s.Au, s.lambda_R
        r = Au - lam * u
        t, its, early = projected_cg(A, u, lam, r, method.inner_tol, method.inner_max)
        if not np.any(t):
            t = r / lam if lam != 0 else r
        w = u + t
        nw = np.linalg.norm(w)
        if not nw > BREAKDOWN_NORM:
            raise BreakdownError(f"inexact RQI breakdown at iteration {s.iter}")
        w = w / nw
        Aw = A.matvec(w)
        lam_w = float(w @ Aw)
        return EpsiState(u=w, lambda_R=lam_w, iter=s.iter + 1,
                         residual=float(np.linalg.norm(Aw - lam_w * w)),
                         matvecs=s.matvecs + its + 1, Au=Aw)

    return _run_vector_method(A, state, step, opts, mon)


def run_baseline(A, method, k=1, u0="auto", opts=None, reference=None, timing=True):
    """Dispatch on ``method.kind``; ``opts`` is SolveOptions or LazyOptions.

    ``u0='auto'`` means the Davidson diagonal guess for Davidson and a seeded
    random start for the other methods.
    """
    if isinstance(u0, str) and u0 == "auto" and method.kind != "davidson":
        u0 = "random"
    if method.kind == "subspace":
        return subspace_iteration(A, k, u0, opts, reference, timing)
    opts = SolveOptions() if opts is None else opts
    if method.kind == "power":
        return power_iteration(A, u0, opts, reference, timing)
    if method.kind == "davidson":
        return davidson_method(A, u0, opts, reference, timing)
    return inexact_rqi(A, u0, opts, method, reference, timing)
