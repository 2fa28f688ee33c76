"""
Simulation study: exact Matern fields on a 48 x 48 grid, coregionalized
composition, regular and Voronoi regions, noisy regional averages, and the
replicate loop comparing the disaggregation model with the areal baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .aggregation import FineGrid, RegionSet, aggregate_field, average_covariates, build_projection
from .areal import ArealProblem, areal_fitted_means, areal_to_grid, build_adjacency
from .inference import (DisaggregationProblem, FitConfig, NonConvergenceError, fit,
                        fixed_effects_summary, hyper_intervals, predict_mean)
from .mesh_fem import build_lattice_mesh, matern_covariance

log = logging.getLogger(__name__)

GRID_SIZE = 48


@dataclass(frozen=True)
class SimParams:
    """Generating values of the three-variable study (``sigma2`` are field
    variances, ``noise_sd`` standard deviations of the regional noise)."""

    alpha: tuple = (0.1, 0.05, -0.1)
    lam: tuple = (0.3, 0.1, -0.3)  # (lambda_21, lambda_31, lambda_32)
    sigma2: tuple = (0.25, 0.2, 0.15)
    rho: tuple = (0.1, 0.2, 0.1)
    noise_sd: tuple = (0.1, 0.2, 0.15)

    @classmethod
    def table_as_sd(cls) -> "SimParams":
        """Alternative reading of the variance column as standard
        deviations."""
        base = cls()
        return cls(sigma2=tuple(s * s for s in base.sigma2))

    @property
    def Lambda(self) -> np.ndarray:
        L = np.eye(3)
        L[1, 0], L[2, 0], L[2, 1] = self.lam
        return L

    def truth(self) -> dict:
        """True values keyed by coverage-table row name."""
        out = {f"alpha_{k + 1}": self.alpha[k] for k in range(3)}
        out.update({f"lambda_{k + 1}": self.lam[k] for k in range(3)})
        for k in range(3):
            out[f"rho_{k + 1}"] = self.rho[k]
            out[f"sigma2_{k + 1}"] = self.sigma2[k]
        out.update({f"e_{k + 1}": self.noise_sd[k] for k in range(3)})
        return out


#: Coverage-table rows in report order.
COVERAGE_ROWS = tuple(SimParams().truth())

# fitted hyperparameter name -> coverage row
_HYPER_ROW = {"lambda_21": "lambda_1", "lambda_31": "lambda_2", "lambda_32": "lambda_3",
              **{f"noise_sd_{k}": f"e_{k}" for k in (1, 2, 3)},
              **{f"rho_{k}": f"rho_{k}" for k in (1, 2, 3)},
              **{f"sigma2_{k}": f"sigma2_{k}" for k in (1, 2, 3)}}


@dataclass(frozen=True)
class ScenarioSpec:
    id: int
    kind: str  # "irregular" | "regular"
    gamma: float | None = None
    k: int | None = None
    seed: int = 0


SCENARIOS = {
    1: ScenarioSpec(1, "irregular", gamma=36),
    2: ScenarioSpec(2, "irregular", gamma=64),
    3: ScenarioSpec(3, "irregular", gamma=144),
    4: ScenarioSpec(4, "regular", k=6),
    5: ScenarioSpec(5, "regular", k=8),
    6: ScenarioSpec(6, "regular", k=12),
}


def scenario(sid: int, seed: int = 0) -> ScenarioSpec:
    if sid not in SCENARIOS:
        raise ValueError(f"unknown scenario {sid}; expected 1..6")
    s = SCENARIOS[sid]
    return ScenarioSpec(s.id, s.kind, s.gamma, s.k, seed)


def study_grid() -> FineGrid:
    return FineGrid.unit_square_points(GRID_SIZE)


# --------------------------------------------------------------------------
# Exact Matern sampling

@lru_cache(maxsize=8)
def _matern_chol(n: int, rho: float) -> np.ndarray:
    grid = FineGrid.unit_square_points(n)
    d = cdist(grid.points, grid.points)
    C = matern_covariance(d, 1.0, rho)
    jitter = 1e-8
    while jitter <= 1e-6 + 1e-18:
        try:
            L = sla.cholesky(C + jitter * np.eye(C.shape[0]), lower=True)
            L.setflags(write=False)
            return L
        except np.linalg.LinAlgError:
            jitter *= 10
    raise np.linalg.LinAlgError(f"dense Matern covariance (rho={rho}) not factorizable with jitter <= 1e-6")


def sample_matern_dense(sigma2: float, rho: float, rng=None, n: int = GRID_SIZE, size: int | None = None) -> np.ndarray:
    """Zero-mean Matern (nu = 1) draw on the ``n x n`` unit-square point grid
    by dense Cholesky. Returns ``(n*n,)`` or ``(size, n*n)``."""
    if n > 64:
        raise ValueError("dense sampling is limited to 64 x 64 grids")
    rng = np.random.default_rng(rng)
    L = _matern_chol(n, float(rho))
    z = rng.standard_normal((L.shape[0],) if size is None else (L.shape[0], size))
    x = math.sqrt(sigma2) * (L @ z)
    return x if size is None else x.T


def simulate_lmc_fields(params: SimParams = SimParams(), rng=None, n: int = GRID_SIZE) -> np.ndarray:
    """``(3, n*n)`` array of ``W_k = alpha_k + sum_l Lambda_kl z_l``."""
    rng = np.random.default_rng(rng)
    z = np.vstack([sample_matern_dense(params.sigma2[k], params.rho[k], rng, n) for k in range(3)])
    return np.asarray(params.alpha)[:, None] + params.Lambda @ z


# --------------------------------------------------------------------------
# Regions

def ipp_intensity(x, y, gamma: float):
    return gamma * 1.5 * (np.asarray(x) ** 2 + np.asarray(y) ** 2)


def acceptance_probability(x, y):
    """Thinning probability relative to the bounding intensity ``3 gamma``."""
    return (np.asarray(x) ** 2 + np.asarray(y) ** 2) / 2.0


def sample_ipp(gamma: float, rng=None) -> np.ndarray:
    """Inhomogeneous Poisson process on ``[0, 1]^2`` with intensity
    ``1.5 gamma (x^2 + y^2)`` by thinning a homogeneous process of rate
    ``3 gamma``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    rng = np.random.default_rng(rng)
    n = rng.poisson(3.0 * gamma)
    pts = rng.random((n, 2))
    keep = rng.random(n) < acceptance_probability(pts[:, 0], pts[:, 1])
    return pts[keep]


def discrete_voronoi(seeds, grid: FineGrid) -> RegionSet:
    """Assign every cell to its nearest seed (ties to the lowest seed index);
    seeds that own no cell are dropped and the rest renumbered."""
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    if seeds.shape[0] < 2:
        raise ValueError("at least two seeds are required")
    tree = cKDTree(seeds)
    pts = grid.points
    k = min(4, seeds.shape[0])
    d, idx = tree.query(pts, k=k)
    # among (near-)equidistant candidates pick the lowest seed index
    tie = d <= d[:, :1] + 1e-12
    owner = np.where(tie, idx, np.iinfo(int).max).min(axis=1)
    used, assignment = np.unique(owner, return_inverse=True)
    if used.size < seeds.shape[0]:
        log.info("dropped %d empty Voronoi regions", seeds.shape[0] - used.size)
    return RegionSet(grid, assignment.ravel())


def regular_partition(k: int, grid: FineGrid | None = None) -> RegionSet:
    grid = grid or study_grid()
    if grid.nx % k or grid.ny % k:
        raise ValueError(f"{k} does not divide the {grid.nx} x {grid.ny} grid")
    bx, by = grid.nx // k, grid.ny // k
    ii, jj = np.meshgrid(np.arange(grid.nx) // bx, np.arange(grid.ny) // by)
    return RegionSet(grid, (jj * k + ii).ravel())


def scenario_regions(spec: ScenarioSpec, rng=None, grid: FineGrid | None = None) -> RegionSet:
    grid = grid or study_grid()
    if spec.kind == "regular":
        return regular_partition(spec.k, grid)
    rng = np.random.default_rng(rng)
    while True:
        seeds = sample_ipp(spec.gamma, rng)
        if seeds.shape[0] >= 2:
            return discrete_voronoi(seeds, grid)


def make_observations(fields, regions: RegionSet, noise_sd, rng=None) -> np.ndarray:
    """Variable-major vector of regional means plus Gaussian noise."""
    rng = np.random.default_rng(rng)
    fields = np.atleast_2d(fields)
    means = np.concatenate([aggregate_field(f, regions) for f in fields])
    sd = np.repeat(np.asarray(noise_sd, dtype=float), regions.n_regions)
    return means + sd * rng.standard_normal(means.size)


def rmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


# --------------------------------------------------------------------------
# Replicate loop

@dataclass
class StudyConfig:
    """Settings of a simulation study run.

    The fit mesh is a regular lattice of spacing ``mesh_h`` on the unit
    square, extended by ``mesh_ext`` on every side.
    """

    scenarios: tuple = (1, 2, 3, 4, 5, 6)
    n_replicates: int = 20
    master_seed: int = 20240611
    mesh_h: float = 1.0 / 47.0
    mesh_ext: float = 0.2
    projection: str = "interp"
    fit: FitConfig = field(default_factory=lambda: FitConfig(n_starts=1, method="lbfgs"))
    areal_fit: FitConfig = field(default_factory=lambda: FitConfig(n_starts=1, method="lbfgs"))
    params: SimParams = field(default_factory=SimParams)
    baseline: bool = True
    level: float = 0.95
    # hyperparameter draws averaged over for the fixed-effect intervals
    theta_samples: int = 10

    def __post_init__(self):
        if self.level != 0.95:
            raise ValueError("only 95% intervals are supported")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")
        for s in self.scenarios:
            scenario(s)


@dataclass
class ReplicateRecord:
    scenario: int
    replicate: int
    n_regions: int = 0
    hits: dict = field(default_factory=dict)  # coverage row -> bool
    estimates: dict = field(default_factory=dict)
    rmse: dict = field(default_factory=dict)  # (variable index, model) -> float
    failed: str | None = None


def replicate_rngs(master_seed: int, sid: int, rep: int):
    """Field stream shared by all scenarios of a replicate (common random
    numbers) and a scenario-specific stream for regions and noise."""
    return (np.random.default_rng([master_seed, 0, rep]),
            np.random.default_rng([master_seed, sid, rep]))


def run_replicate(sid: int, rep: int, config: StudyConfig, mesh=None) -> ReplicateRecord:
    rec = ReplicateRecord(sid, rep)
    P = config.params
    field_rng, rng = replicate_rngs(config.master_seed, sid, rep)
    grid = study_grid()
    W = simulate_lmc_fields(P, field_rng)
    regions = scenario_regions(scenario(sid), rng, grid)
    y = make_observations(W, regions, P.noise_sd, rng)
    rec.n_regions = regions.n_regions
    truth = P.truth()
    Xbar = average_covariates(None, regions)
    try:
        mesh = mesh or build_lattice_mesh((0.0, 1.0, 0.0, 1.0), config.mesh_h, config.mesh_ext)
        A = build_projection(mesh, regions, config.projection)
        fr = fit(DisaggregationProblem(mesh, A, Xbar, y, 3), config.fit)
        for name, est, lo, hi in hyper_intervals(fr, config.level):
            row = _HYPER_ROW[name]
            rec.hits[row] = bool(lo <= truth[row] <= hi)
            rec.estimates[row] = est
        fe_rng = np.random.default_rng([config.master_seed, sid, rep, 1])
        for k, (_, _, m, _sd, lo, _q50, hi) in enumerate(fixed_effects_summary(fr, config.theta_samples, fe_rng)):
            row = f"alpha_{k + 1}"
            rec.hits[row] = bool(lo <= truth[row] <= hi)
            rec.estimates[row] = m
        pred = predict_mean(fr, grid.points)
        for j in range(3):
            rec.rmse[(j, "disaggregation")] = rmse(pred[j], W[j])
    except (np.linalg.LinAlgError, NonConvergenceError, ValueError) as exc:
        log.warning("scenario %d replicate %d: disaggregation fit failed: %s", sid, rep, exc)
        rec.failed = f"disaggregation: {exc}"
        return rec
    if config.baseline:
        try:
            afr = fit(ArealProblem(build_adjacency(regions), Xbar, y, 3), config.areal_fit)
            apred = areal_to_grid(areal_fitted_means(afr), regions)
            for j in range(3):
                rec.rmse[(j, "areal")] = rmse(apred[j], W[j])
        except (np.linalg.LinAlgError, NonConvergenceError, ValueError) as exc:
            log.warning("scenario %d replicate %d: areal fit failed: %s", sid, rep, exc)
            rec.failed = f"areal: {exc}"
    return rec


@dataclass
class StudyReport:
    config: StudyConfig
    records: list

    def for_scenario(self, sid: int, ok_only: bool = True) -> list:
        return [r for r in self.records if r.scenario == sid and not (ok_only and r.failed and not r.hits)]

    def coverage(self, sid: int, row: str) -> float:
        hits = [r.hits[row] for r in self.for_scenario(sid) if row in r.hits]
        return float(np.mean(hits)) if hits else float("nan")

    def coverage_table(self) -> list[tuple]:
        """Rows ``(parameter, coverage per configured scenario...)``."""
        return [(row, *[self.coverage(s, row) for s in self.config.scenarios]) for row in COVERAGE_ROWS]

    def failures(self, sid: int) -> int:
        return sum(1 for r in self.records if r.scenario == sid and r.failed)

    def rmse_rows(self) -> list[tuple]:
        """``(scenario, replicate, variable, model, rmse)`` sorted."""
        rows = [(r.scenario, r.replicate, j + 1, model, v)
                for r in self.records for (j, model), v in r.rmse.items()]
        return sorted(rows, key=lambda t: t[:4])

    def mean_rmse(self, sid: int, variable: int, model: str = "disaggregation") -> float:
        vals = [r.rmse[(variable, model)] for r in self.records
                if r.scenario == sid and (variable, model) in r.rmse]
        return float(np.mean(vals)) if vals else float("nan")

    def win_fraction(self, sid: int) -> float:
        """Share of replicate x variable pairs where the disaggregation
        RMSE is below the areal RMSE."""
        wins = [r.rmse[(j, "disaggregation")] < r.rmse[(j, "areal")]
                for r in self.records if r.scenario == sid
                for j in range(3) if (j, "disaggregation") in r.rmse and (j, "areal") in r.rmse]
        return float(np.mean(wins)) if wins else float("nan")


def _run_task(args):
    sid, rep, config = args
    return run_replicate(sid, rep, config)


def run_study(config: StudyConfig | None = None, workers: int = 1, progress=None) -> StudyReport:
    """Every configured scenario x replicate. Results do not depend on
    ``workers`` or execution order."""
    config = config or StudyConfig()
    tasks = [(s, r, config) for s in config.scenarios for r in range(config.n_replicates)]
    records = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for rec in ex.map(_run_task, tasks):
                records.append(rec)
                if progress:
                    progress(rec)
    else:
        mesh = build_lattice_mesh((0.0, 1.0, 0.0, 1.0), config.mesh_h, config.mesh_ext)
        for s, r, c in tasks:
            rec = run_replicate(s, r, c, mesh)
            records.append(rec)
            if progress:
                progress(rec)
    records.sort(key=lambda rec: (rec.scenario, rec.replicate))
    return StudyReport(config, records)
