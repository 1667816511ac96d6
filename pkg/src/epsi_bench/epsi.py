"""Error-Powered Sketched Inverse Iteration for the top eigenpair.

One step maps a unit vector ``u`` with Rayleigh quotient ``lam`` to

    u+  ~  (A_hat - lam I)^{-1} (A_hat - A) u

i.e. the sketched inverse is applied to the sketching error rather than to
``u`` itself, so every exact eigenvector is a fixed point whatever the
quality of ``A_hat``.  The inverse is applied in ``O(n ell + ell^3)`` via the
Woodbury identity on the factored Nystrom approximation.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._rng import STREAM_INIT, make_rng, random_unit_vector
from .trace import Monitor

DROP_TOL = 1e-14
SINGULAR_TOL = 1e-13
BREAKDOWN_NORM = 1e-300


class WoodburyError(np.linalg.LinAlgError):
    """The small Woodbury system is numerically singular.

    Happens when the shift collides with an eigenvalue of the (deflated)
    preconditioner; re-shifting the preconditioner fixes it.
    """

    def __init__(self, smallest, largest):
        self.smallest = smallest
        self.largest = largest
        super().__init__(
            f"Woodbury inner system singular: smallest singular value {smallest:.3e} "
            f"(largest {largest:.3e}); shift collides with a preconditioner eigenvalue"
        )


class BreakdownError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8
    max_iters: int = 500
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if int(self.max_iters) < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass(frozen=True)
class EpsiState:
    """Current iterate with its Rayleigh quotient and residual norm.

    ``Au`` caches ``A @ u`` so the next step does not recompute it and
    ``matvecs`` counts operator products spent so far.
    """

    u: np.ndarray
    lambda_R: float
    iter: int = 0
    residual: float = 0.0
    matvecs: int = 0
    Au: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def rel_residual(self):
        return self.residual / abs(self.lambda_R) if self.lambda_R != 0 else np.inf


def rayleigh_quotient(A, u):
    """``u^T A u / u^T u`` using one operator product."""
    u = np.asarray(u, dtype=float)
    uu = float(u @ u)
    if uu == 0.0:
        raise ValueError("Rayleigh quotient of the zero vector is undefined")
    return float(u @ A.matvec(u)) / uu


def make_state(A, u, iter=0, matvecs=0):
    """Normalise ``u`` and evaluate its Rayleigh quotient and residual."""
    u = np.asarray(u, dtype=float)
    nu = np.linalg.norm(u)
    if nu == 0.0:
        raise ValueError("initial vector is zero")
    u = u / nu
    Au = A.matvec(u)
    lam = float(u @ Au)
    return EpsiState(u=u, lambda_R=lam, iter=iter, residual=float(np.linalg.norm(Au - lam * u)),
                     matvecs=matvecs + 1, Au=Au)


def woodbury_apply(U, nys, lam_hat, x):
    """Solve ``M y = x`` for ``M = P A_hat P - lam_hat I``, ``P = I - U U^T``.

    ``A_hat = U_nys diag(lam - c) U_nys^T`` is the shifted Nystrom factor and
    ``U`` (possibly with zero columns) has orthonormal columns.  With
    ``W = P U_nys`` the identity

        M^{-1} = -I/lam_hat + W (-lam_hat L^{-1} + W^T W)^{-1} W^T / lam_hat,

    ``L = diag(lam - c)``, is evaluated with the small system symmetrically
    rescaled by ``|L|^{1/2}``.  Shifted eigenvalues with
    ``|lam_i - c| <= 1e-14 * lam_1`` are dropped.  ``W^T W`` is formed as
    ``I - G^T G`` with ``G = U^T U_nys`` so no ``n x ell x ell`` product is
    needed.
    """
    if lam_hat == 0:
        raise ValueError("lam_hat must be non-zero")
    x = np.asarray(x, dtype=float)
    lc = nys.shifted_lam
    scale = abs(nys.lam[0]) if nys.lam.size else 0.0
    keep = np.abs(lc) > DROP_TOL * scale
    if not np.any(keep):
        return -x / lam_hat
    Z = nys.U[:, keep]
    lc = lc[keep]
    d = np.sqrt(np.abs(lc))
    s = np.sign(lc)

    Wtx = Z.T @ x
    if U is not None and U.size:
        G = U.T @ Z
        Wtx = Wtx - G.T @ (U.T @ x)
        WtW = np.eye(Z.shape[1]) - G.T @ G
    else:
        G = None
        WtW = np.eye(Z.shape[1])

    K = (d[:, None] * WtW) * d[None, :]
    K[np.diag_indices_from(K)] -= lam_hat * s
    mu, P = np.linalg.eigh(0.5 * (K + K.T))
    amu = np.abs(mu)
    if amu.min() <= SINGULAR_TOL * max(amu.max(), abs(lam_hat)):
        raise WoodburyError(float(amu.min()), float(amu.max()))
    z = d * (P @ ((P.T @ (d * Wtx)) / mu))
    Wz = Z @ z
    if G is not None:
        Wz = Wz - U @ (G @ z)
    return (Wz - x) / lam_hat


def epsi_step(A, nys, state):
    """One EPSI update; the returned state has a fresh Rayleigh quotient."""
    u = state.u
    mv = state.matvecs
    Au = state.Au
    if Au is None:
        Au = A.matvec(u)
        mv += 1
    r = nys.matvec(u) - Au
    w = woodbury_apply(None, nys, state.lambda_R, r)
    nw = np.linalg.norm(w)
    if not nw > BREAKDOWN_NORM:
        raise BreakdownError(f"EPSI breakdown at iteration {state.iter}: ||w|| = {nw:.3e}")
    w = w / nw
    if w @ u < 0:
        w = -w
    Aw = A.matvec(w)
    lam = float(w @ Aw)
    res = float(np.linalg.norm(Aw - lam * w))
    return EpsiState(u=w, lambda_R=lam, iter=state.iter + 1, residual=res, matvecs=mv + 1, Au=Aw)


def epsi_solve(A, nys, u0="auto", opts=SolveOptions(), reference=None, timing=True):
    """Iterate :func:`epsi_step` until ``residual / lambda_R <= tol``.

    ``u0='auto'`` starts from the leading Nystrom eigenvector, ``u0='random'``
    from a seeded Gaussian vector.  On non-convergence the state with the
    smallest relative residual is returned and the trace is flagged
    ``not_converged``.  ``reference`` (a dense decomposition) adds eigenvalue
    and subspace errors to the trace.
    """
    mon = Monitor(A, reference, timing=timing)
    if isinstance(u0, str):
        if u0 == "auto":
            u0 = nys.U[:, 0]
        elif u0 == "random":
            u0 = random_unit_vector(make_rng(opts.seed, STREAM_INIT), A.n)
        else:
            raise ValueError(f"unknown initialisation {u0!r}")
    state = make_state(A, u0)
    mon.record(0, state.u, state.lambda_R, state.residual, state.matvecs)
    best = state
    converged = state.rel_residual <= opts.tol
    while not converged and state.iter < opts.max_iters:
        state = epsi_step(A, nys, state)
        mon.record(state.iter, state.u, state.lambda_R, state.residual, state.matvecs)
        if state.rel_residual < best.rel_residual:
            best = state
        converged = state.rel_residual <= opts.tol
    final = state if converged else best
    trace = mon.finish(converged, final.lambda_R, opts.tol)
    return final, trace
