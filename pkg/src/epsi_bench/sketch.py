"""Randomized Nystrom preconditioner.

The approximation is kept in factored form ``A_hat = U diag(lam - c) U^T``
where ``lam`` are the clamped Nystrom eigenvalues and ``c >= 0`` is a negative
spectral shift applied lazily (never clamped).
"""
import struct
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as la
from scipy.linalg import lapack

from ._rng import STREAM_ESTIMATE, STREAM_SKETCH, gaussian, make_rng, random_unit_vector
from .matrix_core import DENSE_REFERENCE_CAP

POWER_RESIDUAL_ITERS = 50


class NystromError(RuntimeError):
    """Cholesky of ``Omega^T Y_nu`` failed even after raising the shift."""

    def __init__(self, nu, minor):
        self.nu = nu
        self.minor = minor
        super().__init__(
            f"Nystrom core matrix not positive definite with nu={nu:.3e}: "
            f"leading minor of order {minor} failed"
        )


@dataclass(frozen=True)
class NystromApprox:
    """Factored Nystrom approximation of a PSD operator.

    Attributes
    ----------
    U : (n, ell) array with orthonormal columns.
    lam : (ell,) array, non-negative and descending (pre-shift).
    nu : stability shift used during construction.
    shift : negative spectral shift ``c`` applied to ``lam``.
    ell : sketch size.
    matvecs : operator products spent building the sketch.
    """

    U: np.ndarray
    lam: np.ndarray
    nu: float
    shift: float = 0.0
    ell: int = 0
    matvecs: int = 0

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def shifted_lam(self):
        return self.lam - self.shift

    def matvec(self, x):
        """Apply the (shifted) approximation to a vector or block."""
        coef = self.U.T @ x
        if coef.ndim == 1:
            return self.U @ (self.shifted_lam * coef)
        return self.U @ (self.shifted_lam[:, None] * coef)

    def unshifted_matvec(self, x):
        coef = self.U.T @ x
        if coef.ndim == 1:
            return self.U @ (self.lam * coef)
        return self.U @ (self.lam[:, None] * coef)

    def to_dense(self, shifted=True):
        d = self.shifted_lam if shifted else self.lam
        return (self.U * d) @ self.U.T


@dataclass(frozen=True)
class DistortionEstimate:
    eta: float
    method: str
    iters_used: int


def nystrom_approximate(A, ell, seed, omega=None):
    """Randomized Nystrom approximation with ``ell`` operator products.

    Steps: thin QR of a Gaussian test matrix, ``Y = A Omega``, stability shift
    ``nu = eps * ||Y||_F``, Cholesky ``C`` of ``Omega^T (Y + nu Omega)``,
    ``B = Y_nu C^{-1}``, thin SVD ``B = U S V^T``, ``lam = max(0, S^2 - nu)``.

    ``omega`` overrides the random test matrix (it is still orthonormalised);
    it exists for hand-checkable tests.
    """
    n = A.n
    ell = int(ell)
    if not 1 <= ell <= n:
        raise ValueError(f"sketch size must satisfy 1 <= ell <= n={n}, got {ell}")
    if omega is None:
        omega = gaussian(make_rng(seed, STREAM_SKETCH), (n, ell))
    else:
        omega = np.asarray(omega, dtype=float).reshape(n, -1)
        if omega.shape[1] != ell:
            raise ValueError(f"omega must have {ell} columns, got {omega.shape[1]}")
    omega, _ = np.linalg.qr(omega)
    Y = A.matmat(omega)

    ynorm = np.linalg.norm(Y, "fro")
    if ynorm == 0.0:
        return NystromApprox(U=omega, lam=np.zeros(ell), nu=0.0, ell=ell, matvecs=ell)

    nu = np.finfo(float).eps * ynorm
    for attempt in range(2):
        Y_nu = Y + nu * omega
        core = omega.T @ Y_nu
        C, info = lapack.dpotrf(core, lower=0, clean=1)
        if info == 0:
            break
        if attempt == 1:
            raise NystromError(nu, info)
        nu *= 10.0

    B = la.solve_triangular(C, Y_nu.T, trans="T", lower=False).T
    U, S, _ = la.svd(B, full_matrices=False)
    lam = np.maximum(0.0, S**2 - nu)
    return NystromApprox(U=U, lam=lam, nu=float(nu), ell=ell, matvecs=ell)


def estimate_distortion(A, nys, mode="power_residual", seed=0):
    """Spectral norm of the unshifted residual ``A - A_nys``.

    ``dense`` materialises both matrices (only for ``n <= 2000``) and returns
    the exact norm.  ``power_residual`` runs 50 power steps on the residual
    operator and returns the final Rayleigh quotient, which is a lower bound
    on the norm.
    """
    if mode == "dense":
        if A.n > DENSE_REFERENCE_CAP:
            raise ValueError(
                f"dense distortion needs n <= {DENSE_REFERENCE_CAP} (got n={A.n}); "
                "use mode='power_residual'"
            )
        R = A.to_dense() - nys.to_dense(shifted=False)
        R = 0.5 * (R + R.T)
        w = np.linalg.eigvalsh(R)
        return DistortionEstimate(eta=float(max(abs(w[0]), abs(w[-1]))), method="dense", iters_used=0)
    if mode != "power_residual":
        raise ValueError(f"unknown distortion mode {mode!r}")

    x = random_unit_vector(make_rng(seed, STREAM_ESTIMATE), A.n)
    rq = 0.0
    for _ in range(POWER_RESIDUAL_ITERS):
        y = A.matvec(x) - nys.unshifted_matvec(x)
        rq = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            break
        x = y / ny
    return DistortionEstimate(eta=max(rq, 0.0), method="power_residual", iters_used=POWER_RESIDUAL_ITERS)


def apply_shift(nys, c, A=None, seed=0):
    """Copy of ``nys`` with negative spectral shift ``c``.

    ``c='auto'`` sets ``c = 2 * eta`` using the power-residual estimate, which
    requires the operator ``A``.
    """
    if isinstance(c, str):
        if c != "auto":
            raise ValueError(f"shift must be a number or 'auto', got {c!r}")
        if A is None:
            raise ValueError("shift='auto' needs the operator A")
        est = estimate_distortion(A, nys, "power_residual", seed=seed)
        return replace(nys, shift=2.0 * est.eta, matvecs=nys.matvecs + est.iters_used)
    c = float(c)
    if c < 0:
        raise ValueError(f"shift must be >= 0, got {c}")
    return replace(nys, shift=c)


# Sidecar layout: n, ell, nu, c, U (row-major), lam -- all little-endian f8.
_HEAD = struct.Struct("<4d")


def save_nystrom(path, nys):
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(float(nys.n), float(nys.ell), float(nys.nu), float(nys.shift)))
        fh.write(np.ascontiguousarray(nys.U, dtype="<f8").tobytes(order="C"))
        fh.write(np.ascontiguousarray(nys.lam, dtype="<f8").tobytes())


def load_nystrom(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    n, ell, nu, c = _HEAD.unpack_from(blob)
    n, ell = int(n), int(ell)
    expected = _HEAD.size + 8 * (n * ell + ell)
    if len(blob) != expected:
        raise ValueError(f"sidecar {path!s} has {len(blob)} bytes, expected {expected}")
    body = np.frombuffer(blob, dtype="<f8", offset=_HEAD.size)
    U = body[: n * ell].reshape(n, ell).astype(float)
    lam = body[n * ell :].astype(float)
    return NystromApprox(U=U, lam=lam, nu=nu, shift=c, ell=ell)
