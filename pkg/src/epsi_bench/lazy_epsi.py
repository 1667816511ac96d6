"""Lazy-EPSI: top-k eigenspace by deflated EPSI sweeps plus Rayleigh-Ritz.

Each sweep updates the k columns one at a time, column ``i`` deflating
against the columns already updated in the same sweep, and then rotates the
assembled basis with a Rayleigh-Ritz step.  The rotation is what removes the
dependence on the intermediate gaps ``lambda_i - lambda_{i+1}``.
"""
from dataclasses import dataclass

import numpy as np

from ._rng import STREAM_INIT, STREAM_MISC, gaussian, make_rng
from .epsi import woodbury_apply
from .trace import Monitor

GS_BREAKDOWN = 1e-12


@dataclass(frozen=True)
class LazyOptions:
    k: int
    q_max: int = 100
    tol: float = 1e-8
    seed: int = 0

    def validate(self, nys=None, n=None):
        if int(self.k) < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if nys is not None and self.k > nys.ell:
            raise ValueError(f"k={self.k} exceeds sketch size ell={nys.ell}")
        if n is not None and self.k > n:
            raise ValueError(f"k={self.k} exceeds n={n}")
        if int(self.q_max) < 1:
            raise ValueError(f"q_max must be >= 1, got {self.q_max}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")


@dataclass(frozen=True)
class SubspaceState:
    U: np.ndarray
    lambdas: np.ndarray
    sweep: int = 0
    residuals: np.ndarray = None
    matvecs: int = 0


def deflated_epsi_update(A, nys, U_partial, u, lambda_hat, Au=None):
    """Unnormalised ``(P A_hat P - lambda_hat I)^{-1} (P A_hat P - A) u``.

    ``P = I - U_partial U_partial^T``; ``Au`` may be passed to save the
    operator product.
    """
    if Au is None:
        Au = A.matvec(u)
    if U_partial is not None and U_partial.size:
        pu = u - U_partial @ (U_partial.T @ u)
        pap = nys.matvec(pu)
        pap = pap - U_partial @ (U_partial.T @ pap)
    else:
        pap = nys.matvec(u)
    return woodbury_apply(U_partial, nys, lambda_hat, pap - Au)


def orthogonalization_step(A, U, AU=None):
    """Rayleigh-Ritz on ``span(U)``.

    Returns ``(U_new, lambdas, AU_new)`` with ``lambdas`` descending; these are
    the top-k eigenpairs of ``U U^T A U U^T``.
    """
    if AU is None:
        AU = A.matmat(U)
    S = U.T @ AU
    theta, P = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(theta)[::-1]
    theta, P = theta[order], P[:, order]
    return U @ P, theta, AU @ P


def _append_orthonormal(U, w, rng):
    """Gram-Schmidt ``w`` against ``U`` twice; random fallback on breakdown."""
    n0 = np.linalg.norm(w)
    for _ in range(2):
        if U.shape[1]:
            w = w - U @ (U.T @ w)
    nw = np.linalg.norm(w)
    if n0 > 0 and nw > GS_BREAKDOWN * n0:
        return np.column_stack([U, w / nw]), False
    while True:
        w = gaussian(rng, U.shape[0])
        for _ in range(2):
            if U.shape[1]:
                w = w - U @ (U.T @ w)
        nw = np.linalg.norm(w)
        if nw > 1e-8:
            return np.column_stack([U, w / nw]), True


def initial_basis(A, nys, U0, k, seed):
    if isinstance(U0, str):
        if U0 == "auto":
            return nys.U[:, :k].copy()
        if U0 == "random":
            q, _ = np.linalg.qr(gaussian(make_rng(seed, STREAM_INIT), (A.n, k)))
            return q
        raise ValueError(f"unknown initialisation {U0!r}")
    U0 = np.asarray(U0, dtype=float)
    if U0.shape != (A.n, k):
        raise ValueError(f"U0 must have shape ({A.n}, {k}), got {U0.shape}")
    q, _ = np.linalg.qr(U0)
    return q


def lazy_epsi_solve(A, nys, U0="auto", opts=None, reference=None, timing=True):
    """Top-k eigenpairs of ``A`` with a Nystrom-preconditioned Lazy-EPSI.

    Sweep ``q``: for each column, the Rayleigh quotient of the incoming vector
    sets the shift, a deflated EPSI update is computed against the columns
    already updated in this sweep and appended by Gram-Schmidt; then the new
    basis is rotated by Rayleigh-Ritz.  Stops when
    ``max_i ||A u_i - lambda_i u_i|| / lambda_1 <= tol`` after a sweep, or at
    ``q_max``.

    Returns ``(SubspaceState, ConvergenceTrace)``.
    """
    opts.validate(nys, A.n)
    k = opts.k
    rng = make_rng(opts.seed, STREAM_MISC)
    mon = Monitor(A, reference, timing=timing)

    U = initial_basis(A, nys, U0, k, opts.seed)
    U, theta, AU = orthogonalization_step(A, U)
    mv = k
    res = np.linalg.norm(AU - U * theta, axis=0)
    mon.record(0, U, theta, res, mv)

    converged = False
    q = 0
    for q in range(1, opts.q_max + 1):
        Unew = np.empty((A.n, 0))
        for i in range(k):
            u, Au = U[:, i], AU[:, i]
            lam_i = float(u @ Au)
            w = deflated_epsi_update(A, nys, Unew, u, lam_i, Au=Au)
            if w @ u < 0:
                w = -w
            Unew, broke = _append_orthonormal(Unew, w, rng)
            if broke:
                mon.flag_breakdown(q)
        U, theta, AU = orthogonalization_step(A, Unew)
        mv += k
        res = np.linalg.norm(AU - U * theta, axis=0)
        mon.record(q, U, theta, res, mv)
        scale = abs(theta[0]) if theta[0] != 0 else 1.0
        if np.max(res) / scale <= opts.tol:
            converged = True
            break

    trace = mon.finish(converged, theta, opts.tol)
    return SubspaceState(U=U, lambdas=theta, sweep=q, residuals=res, matvecs=mv), trace
