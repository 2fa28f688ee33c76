"""
Empirical-Bayes inference for the aggregated coregionalization model.

Hyperparameters are fixed at the maximiser of the marginal likelihood
(multi-start Nelder-Mead or L-BFGS-B in log/raw coordinates); given them the
latent field and fixed effects have an exact Gaussian posterior.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.stats import norm

from . import linalg
from .aggregation import p1_weights
from .lmc import (BETA_PRECISION, GaussianLinearModel, HyperParams, LatentLayout,
                  check_design, hyper_names, lmc_cross_correlation, n_hyper,
                  observation_operator)
from .mesh_fem import FemMatrices, Mesh, assemble_fem

log = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)


class NonConvergenceError(RuntimeError):
    def __init__(self, message, traces=()):
        super().__init__(message)
        self.traces = list(traces)


# --------------------------------------------------------------------------
# Latent posterior and the latent-space evidence

@dataclass(frozen=True)
class LatentPosterior:
    mean: np.ndarray
    factor: linalg.SpdFactor


def latent_posterior(model: GaussianLinearModel) -> LatentPosterior:
    HtR = (model.H.T @ sp.diags(model.R_inv)).tocsc()
    Q_post = (model.Q_prior + HtR @ model.H).tocsc()
    f = linalg.factorize(Q_post)
    mu = linalg.solve(f, HtR @ model.y)
    return LatentPosterior(mu, f)


def marginal_loglik(model: GaussianLinearModel, theta=None, posterior: LatentPosterior | None = None) -> float:
    """Log evidence ``log p(y | theta)`` from the sparse latent system.

    ``theta`` is accepted for symmetry with the fitting code; ``model``
    must already be assembled at it.
    """
    post = posterior or latent_posterior(model)
    f_prior = linalg.factorize(model.Q_prior)
    y, r, mu = model.y, model.R_inv, post.mean
    quad = float(y @ (r * y)) - float(mu @ (model.H.T @ (r * y)))
    return (0.5 * linalg.logdet(f_prior) + 0.5 * float(np.sum(np.log(r)))
            - 0.5 * linalg.logdet(post.factor) - 0.5 * quad - 0.5 * y.size * LOG2PI)


# --------------------------------------------------------------------------
# Observation-space evidence (the fitting hot loop)

def gaussian_evidence(S_list, Lambda, noise_sd, Xbar, y, beta_precision=BETA_PRECISION) -> float:
    """
    ``log N(y; 0, Sigma + X X^T / eps)`` where ``Sigma`` has blocks
    ``sum_k Lambda_jk Lambda_lk S_k`` plus the noise diagonal, and ``X`` is
    block-diagonal with ``Xbar`` per variable. The vague fixed-effect term is
    handled through the determinant lemma and Woodbury, never added
    explicitly.
    """
    M = Lambda.shape[0]
    N = S_list[0].shape[0]
    Sigma = np.empty((N * M, N * M))
    for j in range(M):
        for l in range(j + 1):
            blk = np.zeros((N, N))
            for k in range(l + 1):
                c = Lambda[j, k] * Lambda[l, k]
                if c != 0.0:
                    blk += c * S_list[k]
            Sigma[j * N:(j + 1) * N, l * N:(l + 1) * N] = blk
            if l != j:
                Sigma[l * N:(l + 1) * N, j * N:(j + 1) * N] = blk.T
    Sigma[np.diag_indices_from(Sigma)] += np.repeat(np.asarray(noise_sd, dtype=float) ** 2, N)
    F = sla.cholesky(Sigma, lower=True, check_finite=False)
    p = Xbar.shape[1]
    Xblk = np.zeros((N * M, M * p))
    for j in range(M):
        Xblk[j * N:(j + 1) * N, j * p:(j + 1) * p] = Xbar
    Z = sla.solve_triangular(F, np.column_stack([y, Xblk]), lower=True, check_finite=False)
    zy, ZX = Z[:, 0], Z[:, 1:]
    K = beta_precision * np.eye(M * p) + ZX.T @ ZX
    FK = sla.cholesky(K, lower=True, check_finite=False)
    b = sla.solve_triangular(FK, ZX.T @ zy, lower=True, check_finite=False)
    logdet = (2.0 * np.sum(np.log(np.diag(F))) - M * p * math.log(beta_precision)
              + 2.0 * np.sum(np.log(np.diag(FK))))
    quad = zy @ zy - b @ b
    return float(-0.5 * (y.size * LOG2PI + logdet + quad))


class SpdeRegionCovariance:
    """``A Q(rho, sigma2)^{-1} A^T`` for the SPDE field on a lattice mesh.

    ``Q^{-1}`` is proportional to ``sigma2``, so only the unit-variance
    matrix is computed per range value and a small cache is kept.
    """

    def __init__(self, mesh: Mesh, fem: FemMatrices, A, cache_size: int = 64):
        self.bandwidth = 2 * mesh.nx
        self._C = linalg.to_lower_band(fem.C, self.bandwidth)
        self._G = linalg.to_lower_band(fem.G, self.bandwidth)
        self._GCG = linalg.to_lower_band(fem.GCG, self.bandwidth)
        self._At = np.asfortranarray(sp.csr_matrix(A).T.toarray())
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size

    def unit(self, rho: float) -> np.ndarray:
        key = float(rho)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        kappa = math.sqrt(8.0) / rho
        k2 = kappa * kappa
        tau2 = 1.0 / (4.0 * math.pi * k2)
        ab = tau2 * (k2 * k2 * self._C + 2.0 * k2 * self._G + self._GCG)
        f = linalg.factorize_banded(ab)
        Y = linalg.banded_half_solve(f, self._At)
        S = Y.T @ Y
        self._cache[key] = S
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return S

    def __call__(self, rho: float, sigma2: float) -> np.ndarray:
        return sigma2 * self.unit(rho)


# --------------------------------------------------------------------------
# Problems

class LmcProblem:
    """Common machinery of coregionalized latent-Gaussian problems; concrete
    subclasses define the field precisions and the hyperparameter map."""

    M: int
    Xbar: np.ndarray
    y: np.ndarray
    beta_precision: float = BETA_PRECISION

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    def names(self) -> list[str]:
        raise NotImplementedError

    def hyper(self, v):
        raise NotImplementedError

    def region_covariances(self, v) -> list[np.ndarray]:
        raise NotImplementedError

    def assemble(self, v) -> GaussianLinearModel:
        raise NotImplementedError

    def start(self) -> np.ndarray:
        raise NotImplementedError

    def default_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def N(self) -> int:
        return self.Xbar.shape[0]

    def loglik(self, v) -> float:
        h = self.hyper(v)
        S = self.region_covariances(v)
        return gaussian_evidence(S, h.Lambda, h.noise_sd, self.Xbar, self.y, self.beta_precision)

    def residual_start(self):
        """Per-variable OLS residuals of ``y`` on ``Xbar`` and the
        sequential-regression guess of the lower-triangular weights."""
        M, N = self.M, self.N
        Y = self.y.reshape(M, N)
        coef, *_ = np.linalg.lstsq(self.Xbar, Y.T, rcond=None)
        R = Y - (self.Xbar @ coef).T
        var = np.maximum(R.var(axis=1), 1e-8)
        lam = np.zeros((M, M))
        U = np.zeros_like(R)
        for j in range(M):
            if j:
                c, *_ = np.linalg.lstsq(U[:j].T, R[j], rcond=None)
                lam[j, :j] = c
                U[j] = R[j] - c @ U[:j]
            else:
                U[j] = R[j]
        uvar = np.maximum(U.var(axis=1), 1e-8)
        return var, uvar, lam


class DisaggregationProblem(LmcProblem):
    """Regional averages of ``M`` coregionalized SPDE fields."""

    def __init__(self, mesh: Mesh, A, Xbar, y, M: int, fem: FemMatrices | None = None,
                 beta_precision: float = BETA_PRECISION, variables=None, covariates=None):
        self.mesh = mesh
        self.fem = fem if fem is not None else assemble_fem(mesh)
        self.A = sp.csr_matrix(A)
        self.Xbar = check_design(Xbar)
        self.y = np.asarray(y, dtype=float)
        self.M = int(M)
        self.beta_precision = beta_precision
        N = self.A.shape[0]
        if self.A.shape[1] != mesh.n_nodes:
            raise ValueError(f"projection has {self.A.shape[1]} columns, mesh has {mesh.n_nodes} nodes")
        if self.Xbar.shape[0] != N:
            raise ValueError(f"covariates have {self.Xbar.shape[0]} rows, projection has {N}")
        if self.y.shape != (N * self.M,):
            raise ValueError(f"expected {N * self.M} observations, got {self.y.size}")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observations must be finite")
        self.variables = list(variables) if variables else [f"var{j + 1}" for j in range(self.M)]
        self.covariates = list(covariates) if covariates else [f"x{c}" for c in range(1, self.Xbar.shape[1])]
        self._cov = SpdeRegionCovariance(mesh, self.fem, self.A)

    @property
    def n_params(self) -> int:
        return n_hyper(self.M)

    def names(self):
        return hyper_names(self.M)

    def hyper(self, v) -> HyperParams:
        return HyperParams.from_vector(v, self.M)

    def region_covariances(self, v):
        M = self.M
        v = np.asarray(v, dtype=float)
        return [self._cov(math.exp(v[k]), math.exp(v[M + k])) for k in range(M)]

    def assemble(self, v) -> GaussianLinearModel:
        from .lmc import assemble_model
        return assemble_model(self.fem, self.A, self.Xbar, self.hyper(v), self.y, self.beta_precision)

    def domain_diagonal(self) -> float:
        x0, x1, y0, y1 = self.mesh.domain
        return math.hypot(x1 - x0, y1 - y0)

    def start(self) -> np.ndarray:
        var, uvar, lam = self.residual_start()
        M = self.M
        rho = np.full(M, 0.25 * self.domain_diagonal())
        theta = HyperParams(rho, 0.5 * uvar, np.sqrt(0.5 * var), np.tril(lam, -1))
        return theta.to_vector()

    def default_bounds(self):
        M = self.M
        lo = np.concatenate([np.full(M, math.log(0.5 * self.mesh.h)), np.full(M, -15.0),
                             np.full(M, -12.0), np.full(self.n_params - 3 * M, -20.0)])
        hi = np.concatenate([np.full(M, math.log(20.0 * self.domain_diagonal())), np.full(M, 8.0),
                             np.full(M, 6.0), np.full(self.n_params - 3 * M, 20.0)])
        return lo, hi


def _design(covariates, n, p):
    if covariates is None:
        X = np.ones((n, 1))
    else:
        C = np.asarray(covariates, dtype=float)
        if C.ndim == 1:
            C = C[:, None]
        if C.shape[0] != n:
            raise ValueError(f"covariates have {C.shape[0]} rows for {n} points")
        bad = np.flatnonzero(~np.all(np.isfinite(C), axis=1))
        if bad.size:
            raise ValueError(f"covariate missing at {bad.size} prediction points (first: {bad[0]})")
        X = np.column_stack([np.ones(n), C])
    if X.shape[1] != p:
        raise ValueError(f"prediction design has {X.shape[1]} columns, model has {p}")
    return X


def _operator(layout: LatentLayout, W, X, j, Lambda) -> sp.csr_matrix:
    n = W.shape[0]
    blocks = []
    for k in range(layout.M):
        c = Lambda[j, k] if k <= j else 0.0
        blocks.append(c * W if c != 0.0 else sp.csr_matrix((n, layout.G)))
    for k in range(layout.M):
        blocks.append(sp.csr_matrix(X) if k == j else sp.csr_matrix((n, layout.p)))
    return sp.hstack(blocks, format="csr")


# --------------------------------------------------------------------------
# Fitting

@dataclass
class FitConfig:
    """Optimizer settings.

    ``method`` is ``"nelder-mead"`` (derivative free; converged when the
    simplex diameter drops below ``xatol``), ``"lbfgs"`` (L-BFGS-B with
    finite-difference gradients) or ``"hybrid"`` (L-BFGS-B followed by a
    Nelder-Mead polish with a simplex of size ``polish_step``).
    """

    n_starts: int = 3
    perturbation: float = 1.0
    method: str = "nelder-mead"
    xatol: float = 1e-4
    gtol: float = 1e-5
    maxfev: int | None = None
    initial_step: float = 0.5
    polish_step: float = 0.02
    hessian_step: float = 1e-3
    bounds: tuple | None = None
    seed: int = 0


@dataclass
class FitResult:
    theta_hat: object
    theta_vec: np.ndarray
    theta_cov: np.ndarray
    latent_mean: np.ndarray
    latent_factor: linalg.SpdFactor = field(repr=False)
    loglik: float
    trace: list
    names: list
    hessian_clamped: bool = False
    problem: LmcProblem = field(repr=False, default=None)

    @property
    def theta_sd(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.theta_cov), 0.0))


def _starts(problem: LmcProblem, config: FitConfig) -> list[np.ndarray]:
    x0 = problem.start()
    lo, hi = config.bounds or problem.default_bounds()
    n_log = _n_log_params(problem)
    starts = [x0]
    shifts = [config.perturbation, -config.perturbation]
    rng = np.random.default_rng(config.seed)
    while len(starts) < config.n_starts:
        x = x0.copy()
        if shifts:
            x[:n_log] += shifts.pop(0)
        else:
            x[:n_log] += config.perturbation * rng.choice([-1.0, 1.0], size=n_log)
        starts.append(x)
    return [np.clip(s, lo + 1e-6, hi - 1e-6) for s in starts]


def _n_log_params(problem) -> int:
    return getattr(problem, "n_log_params", 3 * problem.M)


def negloglik_function(problem: LmcProblem, bounds=None, fail_value=np.inf):
    """``-loglik`` in transformed coordinates; ``fail_value`` outside
    ``bounds`` or where the covariance is numerically singular."""

    def f(v):
        if bounds is not None and (np.any(v < bounds[0]) or np.any(v > bounds[1])):
            return fail_value
        try:
            val = problem.loglik(v)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError, OverflowError):
            return fail_value
        return -val if np.isfinite(val) else fail_value
    return f


def central_gradient(f, x, step: float = 1e-5) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def _nelder_mead(f, x0, step, bounds, config, maxfev):
    n = x0.size
    simplex = np.vstack([x0] + [x0 + step * e for e in np.eye(n)])
    simplex = np.clip(simplex, bounds[0], bounds[1])
    res = minimize(f, x0, method="Nelder-Mead",
                   options=dict(initial_simplex=simplex, xatol=config.xatol, fatol=np.inf,
                                maxfev=maxfev, maxiter=10**9, adaptive=True))
    sim = res.final_simplex[0]
    diam = float(np.max(np.abs(sim[1:] - sim[0])))
    return res.x, float(res.fun), int(res.nfev), dict(simplex_diameter=diam,
                                                      converged=bool(np.isfinite(res.fun) and diam < config.xatol))


def _lbfgs(problem, x0, bounds, config, maxfev):
    lo, hi = bounds
    f = negloglik_function(problem, None, fail_value=1e100)
    step = 1e-5
    nfev = [0]

    def fun(v):
        nfev[0] += 1
        return f(v)

    def jac(v):
        # keep the difference stencil inside the box
        v = np.clip(v, lo + step, hi - step)
        nfev[0] += 2 * v.size
        return central_gradient(f, v, step)

    res = minimize(fun, x0, jac=jac, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                   options=dict(maxfun=maxfev, gtol=config.gtol, ftol=1e-12, maxcor=20))
    pg = float(np.max(np.abs(res.jac))) if res.jac is not None else np.nan
    return res.x, float(res.fun), nfev[0], dict(converged=bool(res.success), projected_gradient=pg,
                                                message=str(res.message))


def numerical_hessian(f, x, step: float) -> np.ndarray:
    """Central-difference Hessian."""
    n = x.size
    H = np.empty((n, n))
    f0 = f(x)
    E = np.eye(n) * step
    fp = np.array([f(x + E[i]) for i in range(n)])
    fm = np.array([f(x - E[i]) for i in range(n)])
    for i in range(n):
        H[i, i] = (fp[i] - 2.0 * f0 + fm[i]) / step**2
        for j in range(i):
            v = (f(x + E[i] + E[j]) - f(x + E[i] - E[j])
                 - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4.0 * step**2)
            H[i, j] = H[j, i] = v
    return H


def covariance_from_hessian(H) -> tuple[np.ndarray, bool]:
    """Inverse of the Hessian; a non-positive-definite Hessian is projected
    first (eigenvalues clamped to 1e-8)."""
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        n = H.shape[0]
        return np.eye(n) * 1e8, True
    w, V = np.linalg.eigh(H)
    clamped = bool(np.any(w <= 0))
    w = np.maximum(w, 1e-8)
    cov = (V / w) @ V.T
    return 0.5 * (cov + cov.T), clamped


def fit(problem: LmcProblem, config: FitConfig | None = None) -> FitResult:
    """Maximise the evidence over the hyperparameters from every start and
    keep the best run; the hyperparameter covariance is the inverse
    central-difference Hessian of ``-loglik`` at the optimum."""
    config = config or FitConfig()
    if config.method not in ("nelder-mead", "lbfgs", "hybrid"):
        raise ValueError(f"unknown optimizer {config.method!r}")
    bounds = config.bounds or problem.default_bounds()
    bounds = (np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float))
    f = negloglik_function(problem, bounds)
    n = problem.n_params
    maxfev = config.maxfev or 1000 * n
    traces, best_x, best_f = [], None, np.inf
    for i, x0 in enumerate(_starts(problem, config)):
        if not np.isfinite(f(x0)):
            traces.append(dict(start=i, x0=x0.tolist(), status="infeasible start", converged=False))
            continue
        if config.method == "nelder-mead":
            x, fx, nfev, info = _nelder_mead(f, x0, config.initial_step, bounds, config, maxfev)
        else:
            x, fx, nfev, info = _lbfgs(problem, x0, bounds, config, maxfev)
            if config.method == "hybrid":
                x, fx, nfev2, info2 = _nelder_mead(f, x, config.polish_step, bounds, config, maxfev)
                nfev += nfev2
                info = dict(info2, lbfgs=info)
        traces.append(dict(start=i, x0=x0.tolist(), x=np.asarray(x).tolist(), fun=fx, nfev=nfev,
                           status="ok" if np.isfinite(fx) else "diverged", **info))
        log.debug("start %d: -loglik %.6f after %d evaluations", i, fx, nfev)
        if np.isfinite(fx) and fx < best_f:
            best_x, best_f = np.asarray(x, dtype=float), fx
    if best_x is None:
        raise NonConvergenceError("all optimizer starts diverged", traces)
    if not any(t.get("converged") for t in traces):
        warnings.warn("optimizer stopped before reaching its convergence tolerance")

    H = numerical_hessian(negloglik_function(problem), best_x, config.hessian_step)
    cov, clamped = covariance_from_hessian(H)
    if clamped:
        warnings.warn("Hessian of -loglik is not positive definite at the optimum; projected")
    model = problem.assemble(best_x)
    post = latent_posterior(model)
    return FitResult(theta_hat=problem.hyper(best_x), theta_vec=best_x, theta_cov=cov,
                     latent_mean=post.mean, latent_factor=post.factor, loglik=-float(best_f),
                     trace=traces, names=problem.names(), hessian_clamped=clamped, problem=problem)


def posterior_at(problem: LmcProblem, v, theta_cov=None) -> FitResult:
    """FitResult at a given hyperparameter vector without optimizing."""
    v = np.asarray(v, dtype=float)
    model = problem.assemble(v)
    post = latent_posterior(model)
    cov = np.zeros((v.size, v.size)) if theta_cov is None else np.asarray(theta_cov)
    return FitResult(problem.hyper(v), v, cov, post.mean, post.factor, problem.loglik(v), [],
                     problem.names(), False, problem)


# --------------------------------------------------------------------------
# Summaries

Z975 = float(norm.ppf(0.975))


def hyper_intervals(fit: FitResult, level: float = 0.95):
    """Gaussian intervals in transformed coordinates mapped back to natural
    scale. Rows: (name, estimate, lower, upper)."""
    z = float(norm.ppf(0.5 + level / 2))
    n_log = _n_log_params(fit.problem)
    rows = []
    for i, name in enumerate(fit.names):
        m, s = fit.theta_vec[i], fit.theta_sd[i]
        lo, hi = m - z * s, m + z * s
        if i < n_log:
            with np.errstate(over="ignore"):
                m, lo, hi = np.exp([m, lo, hi])
        rows.append((name, float(m), float(lo), float(hi)))
    return rows


def theta_mixture(fit: FitResult, n_theta_samples: int, rng=None, max_sd: float = 1.0):
    """Hyperparameter draws from ``N(theta_hat, theta_cov)`` with
    self-normalised importance weights ``exp(loglik) / q``.

    The proposal is the Laplace approximation with every eigen-direction's
    sd capped at ``max_sd`` (flat or clamped directions would otherwise put
    nearly all draws out of bounds); the weights correct for the proposal.
    Draws outside the optimizer bounds get weight zero. Returns
    ``(draws, weights)`` restricted to draws with non-negligible weight.
    """
    from scipy.stats import multivariate_normal

    rng = np.random.default_rng(rng)
    p = fit.problem
    lo, hi = p.default_bounds()
    w_cov, V = np.linalg.eigh(0.5 * (fit.theta_cov + fit.theta_cov.T))
    cov = (V * np.clip(w_cov, 0.0, max_sd**2)) @ V.T
    draws = rng.multivariate_normal(fit.theta_vec, cov, size=n_theta_samples, method="eigh")
    logq = multivariate_normal(fit.theta_vec, cov, allow_singular=True).logpdf(draws)
    logq = np.atleast_1d(logq)
    f = negloglik_function(p, (lo, hi))
    logw = np.array([-f(v) for v in draws]) - logq
    logw[~np.isfinite(logw)] = -np.inf
    if not np.any(np.isfinite(logw)):
        return fit.theta_vec[None, :], np.ones(1)
    w = np.exp(logw - logw.max())
    keep = w > 1e-6
    w = w[keep] / w[keep].sum()
    return draws[keep], w


def _mixture_quantiles(means, sds, w, qs):
    def cdf(x):
        return float(np.sum(w * norm.cdf((x - means) / sds)))
    lo = float(np.min(means - 12 * sds))
    hi = float(np.max(means + 12 * sds))
    from scipy.optimize import brentq
    return [brentq(lambda x: cdf(x) - q, lo, hi, xtol=1e-12 * max(1.0, hi - lo)) for q in qs]


def fixed_effects_summary(fit: FitResult, n_theta_samples: int = 0, rng=None):
    """Rows: (variable, term, mean, sd, q025, q50, q975).

    By default the Gaussian latent posterior at the fitted hyperparameters
    (plug-in). With ``n_theta_samples > 0`` the posterior is averaged over
    importance-weighted hyperparameter draws (see :func:`theta_mixture`).
    """
    p = fit.problem
    layout = LatentLayout(p.M, fit.latent_mean.size // p.M - p.Xbar.shape[1], p.Xbar.shape[1])
    terms = ["intercept"] + list(getattr(p, "covariates", []))[: layout.p - 1]
    variables = getattr(p, "variables", [f"var{j + 1}" for j in range(p.M)])
    idx = np.arange(layout.beta_all.start, layout.beta_all.stop)
    if n_theta_samples > 0:
        draws, w = theta_mixture(fit, n_theta_samples, rng)
        fits = [posterior_at(p, v) for v in draws]
    else:
        w, fits = np.ones(1), [fit]
    means = np.array([f.latent_mean[idx] for f in fits])  # (S, M p)
    sds = np.array([linalg.marginal_sd(f.latent_factor, idx) for f in fits])
    rows = []
    for j in range(p.M):
        for c in range(layout.p):
            i = j * layout.p + c
            m_s, s_s = means[:, i], sds[:, i]
            m = float(w @ m_s)
            sd = float(np.sqrt(max(w @ (s_s**2 + m_s**2) - m * m, 0.0)))
            if len(fits) == 1:
                q = [m - Z975 * sd, m, m + Z975 * sd]
            else:
                q = _mixture_quantiles(m_s, s_s, w, [0.025, 0.5, 0.975])
            rows.append((variables[j], terms[c], m, sd, *map(float, q)))
    return rows


def correlation_posterior(fit: FitResult, n_theta_samples: int = 2000, rng=None):
    """Rows ``(i, j, mean, q025, q50, q975)`` for every pair ``i < j`` of the
    cross-correlation implied by ``(lambda, sigma2)``, propagating the
    Gaussian hyperparameter uncertainty."""
    rng = np.random.default_rng(rng)
    M = fit.problem.M
    draws = rng.multivariate_normal(fit.theta_vec, fit.theta_cov, size=n_theta_samples, method="eigh")
    sig = _sigma2_index(fit.problem)
    lam_idx = np.arange(fit.theta_vec.size - M * (M - 1) // 2, fit.theta_vec.size)
    r, c = np.tril_indices(M, -1)
    out = np.empty((n_theta_samples, M, M))
    with np.errstate(over="ignore", invalid="ignore"):
        for s, v in enumerate(draws):
            lam = np.zeros((M, M))
            lam[r, c] = v[lam_idx]
            out[s] = lmc_cross_correlation(lam, np.exp(v[sig]))
    # draws whose variances overflow carry no information about the sign
    ok = np.all(np.isfinite(out.reshape(n_theta_samples, -1)), axis=1)
    if not ok.all():
        log.warning("%d of %d correlation draws overflowed and were dropped", int((~ok).sum()), ok.size)
    out = out[ok]
    rows = []
    for i in range(M):
        for j in range(i + 1, M):
            x = out[:, j, i]
            if x.size == 0:
                rows.append((i, j, float("nan"), float("nan"), float("nan"), float("nan")))
                continue
            q = np.quantile(x, [0.025, 0.5, 0.975])
            rows.append((i, j, float(x.mean()), float(q[0]), float(q[1]), float(q[2])))
    return rows


def _sigma2_index(problem) -> np.ndarray:
    return np.asarray(getattr(problem, "sigma2_index", np.arange(problem.M, 2 * problem.M)))


# --------------------------------------------------------------------------
# Prediction

@dataclass(frozen=True)
class PredictionRaster:
    points: np.ndarray
    mean: np.ndarray  # (M, n_points)
    sd: np.ndarray
    n_samples: int
    exceedance: dict = field(default_factory=dict)  # (variable, threshold) -> probabilities


def prediction_operators(fit: FitResult, points, covariates=None) -> list[sp.csr_matrix]:
    p = fit.problem
    W = p1_weights(p.mesh, points)
    X = _design(covariates, W.shape[0], p.Xbar.shape[1])
    layout = LatentLayout(p.M, p.mesh.n_nodes, p.Xbar.shape[1])
    Lambda = fit.theta_hat.Lambda
    return [_operator(layout, W, X, j, Lambda) for j in range(p.M)]


def predict_mean(fit: FitResult, points, covariates=None) -> np.ndarray:
    """Exact posterior mean ``(M, n_points)``."""
    return np.vstack([P @ fit.latent_mean for P in prediction_operators(fit, points, covariates)])


def predict_exact(fit: FitResult, points, covariates=None) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and sd by column solves (one per point and variable)."""
    ops = prediction_operators(fit, points, covariates)
    mean = np.vstack([P @ fit.latent_mean for P in ops])
    sd = np.empty_like(mean)
    for j, P in enumerate(ops):
        X = linalg.solve(fit.latent_factor, P.T.toarray())
        sd[j] = np.sqrt(np.maximum(np.einsum("ij,ji->i", P.toarray(), X), 0.0))
    return mean, sd


def predict(fit: FitResult, points, covariates=None, n_samples: int = 1000, rng=None,
            thresholds=None, chunk: int = 250) -> PredictionRaster:
    """Monte Carlo prediction from ``n_samples`` latent posterior draws.

    ``thresholds`` maps variable index to a list of thresholds; the fraction
    of draws above each threshold is returned in ``exceedance``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    rng = np.random.default_rng(rng)
    ops = prediction_operators(fit, points, covariates)
    M, n = len(ops), ops[0].shape[0]
    thresholds = {int(j): [float(t) for t in ts] for j, ts in (thresholds or {}).items()}
    for j, ts in thresholds.items():
        if not 0 <= j < M:
            raise ValueError(f"no variable {j}")
        if not ts:
            raise ValueError(f"empty threshold list for variable {j}")
    s1 = np.zeros((M, n))
    s2 = np.zeros((M, n))
    counts = {(j, t): np.zeros(n) for j, ts in thresholds.items() for t in ts}
    base = np.vstack([P @ fit.latent_mean for P in ops])
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        X = linalg.sample_gmrf(fit.latent_factor, None, rng, size=m)
        for j, P in enumerate(ops):
            Z = (P @ X.T).T  # centred draws, (m, n)
            s1[j] += Z.sum(axis=0)
            s2[j] += (Z * Z).sum(axis=0)
            for t in thresholds.get(j, ()):
                counts[(j, t)] += ((Z + base[j]) > t).sum(axis=0)
        done += m
    cmean = s1 / n_samples
    var = (s2 - n_samples * cmean**2) / (n_samples - 1)
    exceed = {k: v / n_samples for k, v in counts.items()}
    return PredictionRaster(np.asarray(points, dtype=float), base + cmean,
                            np.sqrt(np.maximum(var, 0.0)), n_samples, exceed)


def exceedance(fit: FitResult, points, thresholds, covariates=None, n_samples: int = 2000,
               rng=None) -> dict:
    """``P(Z_j(s) > t)`` as the fraction of posterior draws above ``t``."""
    for ts in thresholds.values():
        if any(np.isnan(t) for t in ts):
            raise ValueError("thresholds must not be NaN")
    return predict(fit, points, covariates, n_samples, rng, thresholds).exceedance


def exceedance_gaussian(mean, sd, t) -> np.ndarray:
    """Plug-in ``P(Z > t)`` for ``Z ~ N(mean, sd^2)``."""
    mean, sd = np.asarray(mean, dtype=float), np.asarray(sd, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = norm.sf((t - mean) / sd)
    return np.where(sd > 0, p, (mean > t).astype(float))
