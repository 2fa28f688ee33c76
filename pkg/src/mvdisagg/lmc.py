"""
Linear model of coregionalization observed through regional averages.

Latent vector layout: ``[u_1 ... u_M | beta_1 ... beta_M]`` where ``u_k``
holds the mesh-node weights of the k-th independent SPDE field and
``beta_j`` the fixed effects of variable ``j``. Observations are ordered
variable-major: all regions of variable 1, then variable 2, ...
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh_fem import FemMatrices, MaternParams, matern_to_spde, spde_precision

#: Prior precision of every fixed effect (vague but proper).
BETA_PRECISION = 1e-6

#: Condition-number bound on ``Xbar^T Xbar``.
MAX_DESIGN_CONDITION = 1e10


@dataclass(frozen=True)
class HyperParams:
    rho: np.ndarray
    sigma2: np.ndarray
    noise_sd: np.ndarray
    lam: np.ndarray  # M x M, strictly lower triangular

    def __post_init__(self):
        for name in ("rho", "sigma2", "noise_sd"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, v)
            if not np.all(v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        M = self.rho.size
        lam = np.asarray(self.lam, dtype=float)
        if lam.size == 0 and M == 1:
            lam = np.zeros((1, 1))
        lam = lam.reshape(M, M)
        if np.any(np.triu(lam) != 0):
            raise ValueError("lambda must be strictly lower triangular")
        object.__setattr__(self, "lam", lam)
        if not (self.sigma2.size == self.noise_sd.size == M):
            raise ValueError("rho, sigma2 and noise_sd must have equal length")

    @property
    def M(self) -> int:
        return self.rho.size

    @property
    def Lambda(self) -> np.ndarray:
        """Unit lower-triangular mixing matrix."""
        return self.lam + np.eye(self.M)

    @property
    def lam_vector(self) -> np.ndarray:
        return self.lam[np.tril_indices(self.M, -1)]

    def to_vector(self) -> np.ndarray:
        """Unconstrained coordinates ``[log rho, log sigma2, log noise_sd,
        lambda (row-major lower triangle)]``."""
        return np.concatenate([np.log(self.rho), np.log(self.sigma2),
                               np.log(self.noise_sd), self.lam_vector])

    @classmethod
    def from_vector(cls, v, M: int) -> "HyperParams":
        v = np.asarray(v, dtype=float)
        if v.size != n_hyper(M):
            raise ValueError(f"expected {n_hyper(M)} coordinates, got {v.size}")
        lam = np.zeros((M, M))
        lam[np.tril_indices(M, -1)] = v[3 * M:]
        return cls(np.exp(v[:M]), np.exp(v[M:2 * M]), np.exp(v[2 * M:3 * M]), lam)

    def names(self) -> list[str]:
        return hyper_names(self.M)

    def matern(self, k: int) -> MaternParams:
        return MaternParams(sigma2=float(self.sigma2[k]), rho=float(self.rho[k]))


def n_hyper(M: int) -> int:
    return 3 * M + M * (M - 1) // 2


def hyper_names(M: int) -> list[str]:
    names = [f"rho_{k + 1}" for k in range(M)]
    names += [f"sigma2_{k + 1}" for k in range(M)]
    names += [f"noise_sd_{k + 1}" for k in range(M)]
    r, c = np.tril_indices(M, -1)
    names += [f"lambda_{i + 1}{j + 1}" for i, j in zip(r, c)]
    return names


@dataclass(frozen=True)
class LatentLayout:
    M: int
    G: int
    p: int

    def __post_init__(self):
        if self.M < 1 or self.G < 1 or self.p < 1:
            raise ValueError(f"invalid layout {self}")

    @property
    def dim(self) -> int:
        return self.M * self.G + self.M * self.p

    def field(self, k: int) -> slice:
        return slice(k * self.G, (k + 1) * self.G)

    def beta(self, j: int) -> slice:
        start = self.M * self.G + j * self.p
        return slice(start, start + self.p)

    @property
    def beta_all(self) -> slice:
        return slice(self.M * self.G, self.dim)


def latent_layout(M: int, G: int, p: int) -> LatentLayout:
    return LatentLayout(M, G, p)


@dataclass(frozen=True)
class GaussianLinearModel:
    layout: LatentLayout
    Q_prior: sp.csc_matrix
    H: sp.csr_matrix
    R_inv: np.ndarray  # diagonal
    y: np.ndarray
    field_precisions: tuple = field(repr=False, default=())
    beta_precision: float = BETA_PRECISION

    @property
    def n_obs(self) -> int:
        return self.y.size


def lmc_covariance(lam, sigma2) -> np.ndarray:
    """``T = Lambda Sigma Lambda^T``."""
    sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=float))
    M = sigma2.size
    L = np.asarray(lam, dtype=float).reshape(M, M)
    L = np.tril(L, -1) + np.eye(M)
    return (L * sigma2) @ L.T


def lmc_cross_correlation(lam, sigma2) -> np.ndarray:
    T = lmc_covariance(lam, sigma2)
    s = np.sqrt(np.diag(T))
    C = T / np.outer(s, s)
    np.fill_diagonal(C, 1.0)
    return np.clip(C, -1.0, 1.0)


def check_design(Xbar) -> np.ndarray:
    X = np.asarray(Xbar, dtype=float)
    if X.ndim != 2:
        raise ValueError("covariate matrix must be 2-D")
    if not np.all(np.isfinite(X)):
        raise ValueError("covariate matrix has non-finite entries")
    cond = np.linalg.cond(X.T @ X)
    if not np.isfinite(cond) or cond > MAX_DESIGN_CONDITION:
        raise ValueError(f"covariates are (nearly) collinear: cond(X^T X) = {cond:.3g}")
    return X


def field_precisions(fem: FemMatrices, theta: HyperParams) -> list[sp.csc_matrix]:
    out = []
    for k in range(theta.M):
        kappa, tau = matern_to_spde(theta.matern(k))
        out.append(spde_precision(fem, kappa, tau))
    return out


def observation_operator(A: sp.spmatrix, Xbar: np.ndarray, Lambda: np.ndarray) -> sp.csr_matrix:
    """Block ``(j, k)`` is ``Lambda[j, k] * A`` over ``u_k``; ``Xbar`` over
    ``beta_j``."""
    M = Lambda.shape[0]
    A = sp.csr_matrix(A)
    blocks = [[None] * (2 * M) for _ in range(M)]
    N, G = A.shape
    p = Xbar.shape[1]
    Xs = sp.csr_matrix(Xbar)
    for j in range(M):
        for k in range(M):
            if k <= j and Lambda[j, k] != 0:
                blocks[j][k] = Lambda[j, k] * A
            else:
                blocks[j][k] = sp.csr_matrix((N, G))
        for k in range(M):
            blocks[j][M + k] = Xs if k == j else sp.csr_matrix((N, p))
    return sp.bmat(blocks, format="csr")


def assemble_model(fem: FemMatrices, A, Xbar, theta: HyperParams, y,
                   beta_precision: float = BETA_PRECISION) -> GaussianLinearModel:
    A = sp.csr_matrix(A)
    N, G = A.shape
    if fem.C.shape[0] != G:
        raise ValueError(f"projection has {G} columns, mesh has {fem.C.shape[0]} nodes")
    Xbar = check_design(Xbar)
    if Xbar.shape[0] != N:
        raise ValueError(f"covariates have {Xbar.shape[0]} rows, expected {N} regions")
    M = theta.M
    y = np.asarray(y, dtype=float)
    if y.shape != (N * M,):
        raise ValueError(f"observation vector has shape {y.shape}, expected ({N * M},)")
    layout = LatentLayout(M, G, Xbar.shape[1])
    Qs = field_precisions(fem, theta)
    Q_prior = sp.block_diag(Qs + [beta_precision * sp.eye(M * layout.p)], format="csc")
    H = observation_operator(A, Xbar, theta.Lambda)
    R_inv = np.repeat(1.0 / theta.noise_sd**2, N)
    return GaussianLinearModel(layout, Q_prior, H, R_inv, y, tuple(Qs), beta_precision)
