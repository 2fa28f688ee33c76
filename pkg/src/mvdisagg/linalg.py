"""
Sparse SPD factorization: solve, log-determinant, sampling and marginal
standard deviations.

Backed by SuperLU in symmetric mode with diagonal pivoting only, which for
an SPD matrix yields ``P Q P^T = L D L^T``; the Cholesky factor is
``L sqrt(D)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cholesky_banded
from scipy.linalg.lapack import dtbtrs
from scipy.sparse.linalg import splu, spsolve_triangular


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, value: float = float("nan")):
        self.pivot = int(pivot)
        self.value = value
        super().__init__(f"matrix is not positive definite (pivot {self.pivot}, value {value:.3g})")


@dataclass(frozen=True)
class SpdFactor:
    """``Q[permutation][:, permutation] == lower_factor @ lower_factor.T``."""

    permutation: np.ndarray
    lower_factor: sp.csr_matrix
    dim: int
    _lu: object = field(repr=False, compare=False)
    _pivots: np.ndarray = field(repr=False, compare=False)

    @property
    def diag(self) -> np.ndarray:
        return np.sqrt(self._pivots)


def _check_symmetric(Q: sp.spmatrix) -> sp.csc_matrix:
    Q = sp.csc_matrix(Q, dtype=float)
    if Q.shape[0] != Q.shape[1]:
        raise ValueError(f"matrix must be square, got {Q.shape}")
    if not np.all(np.isfinite(Q.data)):
        raise ValueError("matrix has non-finite entries")
    asym = abs(Q - Q.T)
    if asym.nnz and asym.max() > 1e-12 * max(1.0, abs(Q).max()):
        raise ValueError("matrix is not symmetric")
    return Q


def factorize(Q) -> SpdFactor:
    Q = _check_symmetric(Q)
    n = Q.shape[0]
    diag = Q.diagonal()
    bad = np.flatnonzero(~(diag > 0))
    if bad.size:
        raise NotPositiveDefiniteError(bad[0], diag[bad[0]])
    try:
        lu = splu(
            Q,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
    except RuntimeError as exc:  # exactly singular
        raise NotPositiveDefiniteError(-1, 0.0) from exc
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise np.linalg.LinAlgError("SuperLU used off-diagonal pivoting")
    perm = np.argsort(lu.perm_c)
    pivots = lu.U.diagonal()
    bad = np.flatnonzero(~(pivots > 0))
    if bad.size:
        raise NotPositiveDefiniteError(perm[bad[0]], pivots[bad[0]])
    L = (lu.L @ sp.diags(np.sqrt(pivots))).tocsr()
    return SpdFactor(permutation=perm, lower_factor=L, dim=n, _lu=lu, _pivots=pivots)


def solve(f: SpdFactor, b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.shape[0] != f.dim:
        raise ValueError(f"right-hand side has length {b.shape[0]}, factor has dim {f.dim}")
    return f._lu.solve(np.ascontiguousarray(b))


def logdet(f: SpdFactor) -> float:
    return float(np.sum(np.log(f._pivots)))


def half_solve(f: SpdFactor, b) -> np.ndarray:
    """``L^{-1} P b``; ``||half_solve(b)||^2 == b^T Q^{-1} b``."""
    b = np.asarray(b, dtype=float)
    if sp.issparse(b):
        b = b.toarray()
    return spsolve_triangular(f.lower_factor, b[f.permutation], lower=True)


def sample_gmrf(f: SpdFactor, mean=None, rng=None, size: int | None = None) -> np.ndarray:
    """Draw from ``N(mean, Q^{-1})``. With ``size`` the result has shape
    ``(size, dim)``."""
    rng = np.random.default_rng(rng)
    shape = (f.dim,) if size is None else (f.dim, size)
    z = rng.standard_normal(shape)
    w = spsolve_triangular(f.lower_factor.T.tocsr(), z, lower=False)
    x = np.empty_like(w)
    x[f.permutation] = w
    if size is not None:
        x = x.T
    if mean is not None:
        x = x + np.asarray(mean, dtype=float)
    return x


def marginal_sd(f: SpdFactor, indices=None, block: int = 256) -> np.ndarray:
    """``sqrt(diag(Q^{-1}))`` at ``indices`` via unit-vector solves."""
    idx = np.arange(f.dim) if indices is None else np.atleast_1d(np.asarray(indices, dtype=int))
    if idx.size and (idx.min() < 0 or idx.max() >= f.dim):
        raise IndexError(f"indices out of range for dim {f.dim}")
    out = np.empty(idx.size)
    for start in range(0, idx.size, block):
        chunk = idx[start:start + block]
        E = np.zeros((f.dim, chunk.size))
        E[chunk, np.arange(chunk.size)] = 1.0
        X = solve(f, E)
        out[start:start + block] = X[chunk, np.arange(chunk.size)]
    return np.sqrt(out)


# Banded path. Lattice precisions in natural node order have half-bandwidth
# ~2 nx, where LAPACK's banded Cholesky beats the general sparse route.

@dataclass(frozen=True)
class BandedSpdFactor:
    """Lower banded Cholesky factor in LAPACK ``pbtrf`` storage."""

    band: np.ndarray
    dim: int

    @property
    def diag(self) -> np.ndarray:
        return self.band[0]


def to_lower_band(Q, bandwidth: int) -> np.ndarray:
    Q = sp.coo_matrix(Q)
    ab = np.zeros((bandwidth + 1, Q.shape[0]))
    keep = Q.row >= Q.col
    off = Q.row[keep] - Q.col[keep]
    if off.size and off.max() > bandwidth:
        raise ValueError(f"matrix bandwidth {off.max()} exceeds {bandwidth}")
    np.add.at(ab, (off, Q.col[keep]), Q.data[keep])
    return ab


def factorize_banded(ab: np.ndarray) -> BandedSpdFactor:
    try:
        band = cholesky_banded(ab, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        digits = "".join(c if c.isdigit() else " " for c in str(exc)).split()
        pivot = int(digits[0]) - 1 if digits else -1
        raise NotPositiveDefiniteError(pivot) from exc
    return BandedSpdFactor(band=band, dim=ab.shape[1])


def banded_half_solve(f: BandedSpdFactor, b) -> np.ndarray:
    """``L^{-1} b``."""
    b = np.asarray(b, dtype=float)
    x, info = dtbtrs(f.band, b if b.ndim == 2 else b[:, None], uplo="L")
    if info != 0:
        raise np.linalg.LinAlgError(f"banded triangular solve failed (info={info})")
    return x if b.ndim == 2 else x[:, 0]


def banded_logdet(f: BandedSpdFactor) -> float:
    return 2.0 * float(np.sum(np.log(f.band[0])))
