"""Symmetric operators, Matrix Market ingestion and synthetic test matrices.

Every solver in the package talks to the input matrix only through
:class:`SymmetricOperator`, i.e. through products ``A @ x`` and ``A @ X``.
Three storage back-ends are provided:

* :class:`DenseOperator`    -- an explicit ``n x n`` array,
* :class:`SparseOperator`   -- the stored (lower) triangle of a symmetric
  coordinate matrix, mirrored at product time,
* :class:`GramOperator`     -- ``B B^T`` with ``B = L1 L2^T + E``, applied as
  a chain of products and never formed.
"""
from dataclasses import dataclass, field
from os import PathLike
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ._rng import STREAM_MATRIX, gaussian, make_rng

DENSE_REFERENCE_CAP = 2000


class DimensionError(ValueError):
    def __init__(self, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"dimension mismatch: expected length {expected}, got {actual}")


class MatrixMarketError(ValueError):
    """Unsupported or malformed Matrix Market input.

    ``token`` names the offending header token for unsupported formats and
    ``line`` the 1-based line number for parse errors (either may be None).
    """

    def __init__(self, message, token=None, line=None):
        self.token = token
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SymmetricOperator:
    """Base class: a real symmetric ``n x n`` matrix accessed by products."""

    kind = "abstract"

    def __init__(self, n):
        n = int(n)
        if n < 1:
            raise ValueError(f"operator dimension must be >= 1, got {n}")
        self.n = n

    @property
    def shape(self):
        return (self.n, self.n)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim not in (1, 2) or x.shape[0] != self.n:
            raise DimensionError(self.n, x.shape[0] if x.ndim else 0)
        return x

    def matvec(self, x):
        x = self._check(x)
        if x.ndim != 1:
            raise DimensionError(self.n, x.shape)
        return self._apply(x)

    def matmat(self, X):
        X = self._check(X)
        if X.ndim == 1:
            return self._apply(X[:, None])[:, 0]
        return self._apply(X)

    def __matmul__(self, x):
        x = self._check(x)
        return self._apply(x)

    def _apply(self, x):
        raise NotImplementedError

    def diagonal(self):
        raise NotImplementedError

    def to_dense(self):
        return self._apply(np.eye(self.n))

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n})"


class DenseOperator(SymmetricOperator):
    """Explicit symmetric matrix.

    Only the lower triangle of ``a`` is read; the upper triangle is replaced by
    its mirror so the stored array is exactly symmetric.
    """

    kind = "dense"

    def __init__(self, a):
        a = np.array(a, dtype=float, copy=True)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"dense operator needs a square matrix, got shape {a.shape}")
        super().__init__(a.shape[0])
        lower = np.tril(a)
        a = lower + np.tril(a, -1).T
        a.setflags(write=False)
        self.array = a

    def _apply(self, x):
        return self.array @ x

    def diagonal(self):
        return np.diag(self.array).copy()

    def to_dense(self):
        return self.array.copy()


class SparseOperator(SymmetricOperator):
    """Symmetric coordinate matrix holding one stored triangle.

    Entries are canonicalised to ``row >= col`` (0-based) and duplicates are
    summed.  Products use ``L x + L^T x - diag(L) x`` so each stored
    off-diagonal value acts at both ``(i, j)`` and ``(j, i)``.
    """

    kind = "sparse"

    def __init__(self, n, rows, cols, values):
        super().__init__(n)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if not (rows.shape == cols.shape == values.shape) or rows.ndim != 1:
            raise ValueError("rows, cols and values must be 1-D arrays of equal length")
        if rows.size and (min(rows.min(), cols.min()) < 0 or max(rows.max(), cols.max()) >= n):
            raise IndexError(f"entry index out of range for n={n}")
        r = np.maximum(rows, cols)
        c = np.minimum(rows, cols)
        lower = sp.coo_matrix((values, (r, c)), shape=(n, n)).tocsr()
        lower.sum_duplicates()
        lower.sort_indices()
        self._lower = lower
        self._upper = lower.T.tocsr()
        self._diag = lower.diagonal()

    @property
    def n_stored(self):
        """Number of stored (triangle) entries after duplicate summation."""
        return int(self._lower.nnz)

    @property
    def nnz(self):
        """Non-zero count of the full symmetric matrix (both triangles)."""
        coo = self._lower.tocoo()
        off = int(np.count_nonzero(coo.row != coo.col))
        return self.n_stored + off

    def entries(self):
        """Stored entries as ``(rows, cols, values)``, 0-based, row-major."""
        coo = self._lower.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64), coo.data[order]

    def _apply(self, x):
        d = self._diag if x.ndim == 1 else self._diag[:, None]
        return self._lower @ x + self._upper @ x - d * x

    def diagonal(self):
        return self._diag.copy()

    def to_dense(self):
        return (self._lower + self._upper).toarray() - np.diag(self._diag)

    def to_scipy(self):
        return (self._lower + self._upper - sp.diags(self._diag)).tocsr()


class GramOperator(SymmetricOperator):
    """``A = B B^T`` for ``B = L1 L2^T + E``, applied as composed products."""

    kind = "composed"

    def __init__(self, L1, L2, E):
        L1 = np.asarray(L1, dtype=float)
        L2 = np.asarray(L2, dtype=float)
        E = np.asarray(E, dtype=float)
        n = E.shape[0]
        if E.shape != (n, n) or L1.shape[0] != n or L2.shape[0] != n or L1.shape[1] != L2.shape[1]:
            raise ValueError("GramOperator needs L1, L2 of shape (n, s) and E of shape (n, n)")
        super().__init__(n)
        self.L1, self.L2, self.E = L1, L2, E

    def factor_matvec(self, x, transpose=False):
        if transpose:
            return self.L2 @ (self.L1.T @ x) + self.E.T @ x
        return self.L1 @ (self.L2.T @ x) + self.E @ x

    def _apply(self, x):
        return self.factor_matvec(self.factor_matvec(x, transpose=True))

    def factor(self):
        return self.L1 @ self.L2.T + self.E

    def diagonal(self):
        B = self.factor()
        return np.einsum("ij,ij->i", B, B)

    def to_dense(self):
        B = self.factor()
        a = B @ B.T
        return np.tril(a) + np.tril(a, -1).T


def as_operator(a):
    """Wrap an array, scipy sparse matrix or operator as a SymmetricOperator."""
    if isinstance(a, SymmetricOperator):
        return a
    if sp.issparse(a):
        coo = sp.tril(a).tocoo()
        return SparseOperator(a.shape[0], coo.row, coo.col, coo.data)
    return DenseOperator(a)


# --------------------------------------------------------------------------
# Matrix Market
# --------------------------------------------------------------------------

_MM_BANNER = "%%matrixmarket"


def load_matrix_market(path):
    """Read a ``matrix coordinate real symmetric`` Matrix Market file.

    Indices in the file are 1-based.  Entries given in the upper triangle are
    mirrored into the lower one, and repeated ``(i, j)`` pairs are summed.

    Raises
    ------
    MatrixMarketError
        On an unsupported header (the offending token is reported) or on a
        malformed body (the line number is reported).
    """
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixMarketError("empty file", line=1)

    header = lines[0].split()
    if not header or header[0].lower() != _MM_BANNER:
        raise MatrixMarketError("missing %%MatrixMarket banner", token=header[0] if header else "", line=1)
    if len(header) != 5:
        raise MatrixMarketError("banner must have 5 tokens", line=1)
    obj, fmt, fld, sym = (t.lower() for t in header[1:])
    for got, want in ((obj, "matrix"), (fmt, "coordinate"), (fld, "real"), (sym, "symmetric")):
        if got != want:
            raise MatrixMarketError(f"unsupported header token {got!r} (need {want!r})", token=got)

    lineno = 1
    size = None
    for lineno in range(2, len(lines) + 1):
        s = lines[lineno - 1].strip()
        if not s or s.startswith("%"):
            continue
        size = s.split()
        break
    if size is None:
        raise MatrixMarketError("missing size line", line=lineno)
    if len(size) != 3:
        raise MatrixMarketError("size line needs 'rows cols entries'", line=lineno)
    try:
        nrows, ncols, nentries = (int(t) for t in size)
    except ValueError:
        raise MatrixMarketError(f"bad size line {' '.join(size)!r}", line=lineno) from None
    if nrows != ncols:
        raise MatrixMarketError(f"symmetric matrix must be square, got {nrows}x{ncols}", line=lineno)
    if nrows < 1 or nentries < 0:
        raise MatrixMarketError("non-positive dimension or negative entry count", line=lineno)

    rows = np.empty(nentries, dtype=np.int64)
    cols = np.empty(nentries, dtype=np.int64)
    vals = np.empty(nentries, dtype=float)
    count = 0
    for lineno in range(lineno + 1, len(lines) + 1):
        s = lines[lineno - 1].strip()
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        if len(parts) != 3:
            raise MatrixMarketError(f"expected 'row col value', got {s!r}", line=lineno)
        if count >= nentries:
            raise MatrixMarketError(f"more entries than the declared {nentries}", line=lineno)
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise MatrixMarketError(f"cannot parse entry {s!r}", line=lineno) from None
        if not (1 <= i <= nrows and 1 <= j <= ncols):
            raise MatrixMarketError(f"index ({i}, {j}) outside declared {nrows}x{ncols}", line=lineno)
        rows[count], cols[count], vals[count] = i - 1, j - 1, v
        count += 1
    if count != nentries:
        raise MatrixMarketError(f"declared {nentries} entries, found {count}", line=len(lines))
    return SparseOperator(nrows, rows, cols, vals)


def write_matrix_market(path, op, comment=None):
    """Write a symmetric operator as ``matrix coordinate real symmetric``.

    Sparse operators write their stored entries verbatim; other operators are
    materialised and their non-zero lower triangle written.  Values use 17
    significant digits so a round trip is exact.
    """
    if isinstance(op, SparseOperator):
        rows, cols, vals = op.entries()
    else:
        a = np.asarray(op.to_dense() if isinstance(op, SymmetricOperator) else op, dtype=float)
        rows, cols = np.nonzero(np.tril(a))
        vals = a[rows, cols]
    n = op.n if isinstance(op, SymmetricOperator) else a.shape[0]
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        if comment:
            for line in str(comment).splitlines():
                fh.write(f"% {line}\n")
        fh.write(f"{n} {n} {len(vals)}\n")
        for i, j, v in zip(rows, cols, vals):
            fh.write(f"{i + 1} {j + 1} {float(v)!r}\n")


# --------------------------------------------------------------------------
# Synthetic matrices
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectrumSpec:
    """Recipe for a synthetic PSD test matrix.

    ``exp_decay``: eigenvalues ``kappa ** (-(i-1)/(n-1))`` from 1 to 1/kappa.
    ``custom``: the explicit descending list ``custom_eigs``.
    ``low_rank_noise``: ``(L1 L2^T + E)(L1 L2^T + E)^T`` with intrinsic rank
    ``s``, factor std-dev ``sigma1`` and noise std-dev ``sigma2``.
    """

    n: int
    kind: str = "exp_decay"
    kappa: Optional[float] = None
    s: Optional[int] = None
    sigma1: Optional[float] = None
    sigma2: Optional[float] = None
    custom_eigs: Optional[Sequence[float]] = None

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.kind == "exp_decay":
            if self.kappa is None or not self.kappa > 1:
                raise ValueError(f"exp_decay needs kappa > 1, got {self.kappa}")
        elif self.kind == "low_rank_noise":
            if self.s is None or not 1 <= self.s <= self.n:
                raise ValueError(f"low_rank_noise needs 1 <= s <= n, got s={self.s}")
            if self.sigma1 is None or self.sigma2 is None or self.sigma1 < 0 or self.sigma2 < 0:
                raise ValueError("low_rank_noise needs non-negative sigma1 and sigma2")
        elif self.kind == "custom":
            eigs = np.asarray(self.custom_eigs, dtype=float)
            if eigs.shape != (self.n,):
                raise ValueError(f"custom_eigs must have length n={self.n}")
            if np.any(eigs < 0) or np.any(np.diff(eigs) > 0):
                raise ValueError("custom_eigs must be non-negative and sorted descending")
        else:
            raise ValueError(f"unknown spectrum kind {self.kind!r}")

    def eigenvalues(self):
        if self.kind == "exp_decay":
            if self.n == 1:
                return np.ones(1)
            i = np.arange(self.n)
            return self.kappa ** (-i / (self.n - 1))
        if self.kind == "custom":
            return np.array(self.custom_eigs, dtype=float)
        raise ValueError("low_rank_noise spectra are not prescribed")


@dataclass(frozen=True)
class ReferenceDecomposition:
    """Dense ground truth ``A = V diag(Lambda) V^T`` with Lambda descending."""

    V: np.ndarray
    Lambda: np.ndarray = field(repr=False)

    def V1(self, k):
        return self.V[:, :k]

    def V2(self, k):
        return self.V[:, k:]


def haar_orthogonal(n, rng):
    """Haar-distributed orthogonal matrix: QR of a Gaussian with sign fix."""
    q, r = np.linalg.qr(gaussian(rng, (n, n)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def gen_synthetic(spec, seed):
    """Build ``A = Q diag(lambda) Q^T`` for a Haar ``Q``.

    Returns the operator together with its exact decomposition.  For
    ``low_rank_noise`` specs the operator comes from :func:`gen_low_rank_noise`
    and the reference is computed densely.
    """
    if spec.kind == "low_rank_noise":
        op = gen_low_rank_noise(spec.n, spec.s, spec.sigma1, spec.sigma2, seed)
        return op, dense_reference(op)
    lam = spec.eigenvalues()
    q = haar_orthogonal(spec.n, make_rng(seed, STREAM_MATRIX))
    op = DenseOperator((q * lam) @ q.T)
    return op, ReferenceDecomposition(V=q, Lambda=lam)


def gen_low_rank_noise(n, s, sigma1, sigma2, seed):
    """Operator ``(L1 L2^T + E)(L1 L2^T + E)^T`` with Gaussian factors.

    ``L1`` and ``L2`` are ``n x s`` with entry std-dev ``sigma1``; ``E`` is
    ``n x n`` with std-dev ``sigma2``.
    """
    if not 1 <= s <= n:
        raise ValueError(f"need 1 <= s <= n, got s={s}, n={n}")
    rng = make_rng(seed, STREAM_MATRIX)
    L1 = sigma1 * gaussian(rng, (n, s))
    L2 = sigma1 * gaussian(rng, (n, s))
    E = sigma2 * gaussian(rng, (n, n))
    return GramOperator(L1, L2, E)


def dense_reference(op, cap=DENSE_REFERENCE_CAP):
    """Eigendecomposition of ``op`` by dense ``eigh`` (descending order)."""
    if op.n > cap:
        raise ValueError(f"dense reference refused for n={op.n} > cap {cap}")
    w, v = np.linalg.eigh(op.to_dense())
    return ReferenceDecomposition(V=v[:, ::-1].copy(), Lambda=w[::-1].copy())
