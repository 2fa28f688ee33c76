"""
Areal baseline: coregionalized intrinsic CAR effects plus iid noise, fit to
the regional values directly. Predictions are constant within each region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .aggregation import RegionSet
from .inference import FitConfig, FitResult, LmcProblem, fit
from .lmc import BETA_PRECISION, GaussianLinearModel, LatentLayout, check_design, observation_operator

#: Diagonal added to the intrinsic precision so it is invertible.
ICAR_JITTER = 1e-6
#: Lower bound on log noise sd. The constant ICAR direction is confounded
#: with the intercept and held only by the jitter, so a vanishing noise sd
#: makes the latent posterior precision numerically singular.
MIN_LOG_NOISE_SD = -7.0


class IsolatedRegionError(ValueError):
    pass


@dataclass(frozen=True)
class Adjacency:
    n_regions: int
    neighbors: tuple  # one sorted int array per region

    @property
    def W(self) -> sp.csr_matrix:
        rows = np.concatenate([np.full(len(nb), i) for i, nb in enumerate(self.neighbors)])
        cols = np.concatenate(self.neighbors) if self.n_regions else np.array([], int)
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_regions,) * 2)

    @property
    def degree(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors])

    @classmethod
    def from_edges(cls, n: int, edges) -> "Adjacency":
        nb = [set() for _ in range(n)]
        for i, j in edges:
            if i != j:
                nb[i].add(j)
                nb[j].add(i)
        return cls(n, tuple(np.array(sorted(s), dtype=int) for s in nb))


def build_adjacency(regions: RegionSet, allow_isolated: bool = False) -> Adjacency:
    """Regions are neighbours when any of their cells share an edge."""
    g = regions.grid
    a = regions.cell_assignment.reshape(g.ny, g.nx)
    pairs = [np.column_stack([a[:, :-1].ravel(), a[:, 1:].ravel()]),
             np.column_stack([a[:-1, :].ravel(), a[1:, :].ravel()])]
    p = np.vstack(pairs)
    p = p[(p[:, 0] >= 0) & (p[:, 1] >= 0) & (p[:, 0] != p[:, 1])]
    p = np.unique(np.sort(p, axis=1), axis=0)
    adj = Adjacency.from_edges(regions.n_regions, map(tuple, p))
    isolated = np.flatnonzero(adj.degree == 0)
    if isolated.size and not allow_isolated:
        raise IsolatedRegionError(f"region {isolated[0]} has no neighbours")
    return adj


def icar_precision(adj: Adjacency, tau: float, jitter: float = ICAR_JITTER) -> sp.csr_matrix:
    """``tau (D - W) + jitter I``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    W = adj.W
    D = sp.diags(adj.degree.astype(float))
    return (tau * (D - W) + jitter * sp.eye(adj.n_regions)).tocsr()


@dataclass(frozen=True)
class ArealHyper:
    sigma2: np.ndarray  # 1 / tau per field
    noise_sd: np.ndarray
    lam: np.ndarray

    @property
    def M(self) -> int:
        return self.sigma2.size

    @property
    def Lambda(self) -> np.ndarray:
        return self.lam + np.eye(self.M)

    @property
    def tau(self) -> np.ndarray:
        return 1.0 / self.sigma2


def areal_names(M: int) -> list[str]:
    r, c = np.tril_indices(M, -1)
    return ([f"sigma2_{k + 1}" for k in range(M)] + [f"noise_sd_{k + 1}" for k in range(M)]
            + [f"lambda_{i + 1}{j + 1}" for i, j in zip(r, c)])


class ArealProblem(LmcProblem):
    """Coordinates: ``[log sigma2 (M), log noise_sd (M), lambda]``."""

    def __init__(self, adj: Adjacency, Xbar, y, M: int, jitter: float = ICAR_JITTER,
                 beta_precision: float = BETA_PRECISION, variables=None, covariates=None):
        self.adj = adj
        self.Xbar = check_design(Xbar)
        self.y = np.asarray(y, dtype=float)
        self.M = int(M)
        self.jitter = jitter
        self.beta_precision = beta_precision
        N = adj.n_regions
        if self.Xbar.shape[0] != N or self.y.shape != (N * self.M,):
            raise ValueError("inconsistent numbers of regions")
        self.variables = list(variables) if variables else [f"var{j + 1}" for j in range(self.M)]
        self.covariates = list(covariates) if covariates else [f"x{c}" for c in range(1, self.Xbar.shape[1])]
        L = (sp.diags(adj.degree.astype(float)) - adj.W).toarray()
        self._evals, self._evecs = np.linalg.eigh(L)
        self._evals = np.maximum(self._evals, 0.0)

    n_log_params = property(lambda self: 2 * self.M)
    sigma2_index = property(lambda self: np.arange(self.M))

    @property
    def n_params(self) -> int:
        return 2 * self.M + self.M * (self.M - 1) // 2

    def names(self):
        return areal_names(self.M)

    def hyper(self, v) -> ArealHyper:
        v = np.asarray(v, dtype=float)
        M = self.M
        lam = np.zeros((M, M))
        lam[np.tril_indices(M, -1)] = v[2 * M:]
        return ArealHyper(np.exp(v[:M]), np.exp(v[M:2 * M]), lam)

    def region_covariances(self, v):
        h = self.hyper(v)
        V = self._evecs
        return [(V / (self._evals / s2 + self.jitter)) @ V.T for s2 in h.sigma2]

    def assemble(self, v) -> GaussianLinearModel:
        h = self.hyper(v)
        N, M, p = self.adj.n_regions, self.M, self.Xbar.shape[1]
        Qs = [icar_precision(self.adj, t, self.jitter) for t in h.tau]
        Q_prior = sp.block_diag(Qs + [self.beta_precision * sp.eye(M * p)], format="csc")
        H = observation_operator(sp.eye(N, format="csr"), self.Xbar, h.Lambda)
        R_inv = np.repeat(1.0 / h.noise_sd**2, N)
        return GaussianLinearModel(LatentLayout(M, N, p), Q_prior, H, R_inv, self.y,
                                   tuple(Qs), self.beta_precision)

    def start(self) -> np.ndarray:
        var, uvar, lam = self.residual_start()
        # marginal ICAR variance ~ sigma2 / mean degree
        s2 = 0.5 * uvar * max(float(self.adj.degree.mean()), 1.0)
        return np.concatenate([np.log(s2), np.log(np.sqrt(0.5 * var)),
                               lam[np.tril_indices(self.M, -1)]])

    def default_bounds(self):
        M = self.M
        k = self.n_params - 2 * M
        lo = np.concatenate([np.full(M, -15.0), np.full(M, MIN_LOG_NOISE_SD), np.full(k, -20.0)])
        hi = np.concatenate([np.full(M, 10.0), np.full(M, 6.0), np.full(k, 20.0)])
        return lo, hi


def fit_areal(y, adj: Adjacency, Xbar, M: int, config: FitConfig | None = None, **kwargs) -> FitResult:
    return fit(ArealProblem(adj, Xbar, y, M, **kwargs), config)


def areal_fitted_means(fit_result: FitResult) -> np.ndarray:
    """Posterior mean of ``x_i^T beta_j + sum_k Lambda_jk U_ik``, shape
    ``(M, N)``."""
    p = fit_result.problem
    M, N, q = p.M, p.adj.n_regions, p.Xbar.shape[1]
    layout = LatentLayout(M, N, q)
    mu = fit_result.latent_mean
    Lambda = fit_result.theta_hat.Lambda
    out = np.empty((M, N))
    for j in range(M):
        out[j] = p.Xbar @ mu[layout.beta(j)]
        for k in range(j + 1):
            out[j] += Lambda[j, k] * mu[layout.field(k)]
    return out


def areal_to_grid(means, regions: RegionSet) -> np.ndarray:
    """Broadcast regional values (``(N,)`` or ``(M, N)``) to every cell."""
    means = np.asarray(means, dtype=float)
    a = regions.cell_assignment
    if np.any(a < 0):
        raise ValueError(f"{int(np.sum(a < 0))} cells are not assigned to a region")
    if means.shape[-1] != regions.n_regions:
        raise ValueError(f"got {means.shape[-1]} regional values for {regions.n_regions} regions")
    return means[..., a]
