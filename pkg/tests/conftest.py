import numpy as np
import pytest
import scipy.sparse as sp


# (criterion, passed, detail) lines collected by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, density=None):
    """``A^T A + I`` with ``A`` dense or sparse."""
    if density is None:
        A = rng.standard_normal((n, n))
    else:
        A = sp.random(n, n, density=density, random_state=rng, data_rvs=rng.standard_normal).toarray()
    return A.T @ A + np.eye(n)


def dense_loglik(model):
    """Log density of ``y`` under ``N(0, H Q_prior^-1 H^T + R)`` computed
    densely."""
    from scipy.stats import multivariate_normal

    H = model.H.toarray()
    S = H @ np.linalg.solve(model.Q_prior.toarray(), H.T) + np.diag(1.0 / model.R_inv)
    return multivariate_normal(np.zeros(model.y.size), S).logpdf(model.y)


def small_problem(rng, M=3, n=5, h=0.25, n_cov=1, ext=0.0):
    """Random regions on an ``n x n`` fine grid over the unit square with a
    small mesh; returns ``(mesh, fem, A, Xbar, y, regions)``."""
    from mvdisagg.aggregation import FineGrid, RegionSet, average_covariates, build_projection
    from mvdisagg.mesh_fem import assemble_fem, build_lattice_mesh

    grid = FineGrid(n, n, 0.5 / n, 0.5 / n, 1.0 / n)
    k = max(2, n * n // 3)
    a = np.concatenate([np.arange(k), rng.integers(0, k, n * n - k)])
    rng.shuffle(a)
    regions = RegionSet(grid, a)
    mesh = build_lattice_mesh((0, 1, 0, 1), h, ext)
    fem = assemble_fem(mesh)
    A = build_projection(mesh, regions, "interp")
    X = average_covariates(rng.standard_normal((n * n, n_cov)) if n_cov else None, regions)
    y = rng.standard_normal(k * M)
    return mesh, fem, A, X, y, regions


def block_regions(grid, k):
    """``k x k`` equal square blocks of ``grid``."""
    from mvdisagg.aggregation import RegionSet

    bx = np.arange(grid.nx) * k // grid.nx
    by = np.arange(grid.ny) * k // grid.ny
    return RegionSet(grid, (by[:, None] * k + bx[None, :]).ravel())


def simulate_toy(seed, theta, n=24, k=12, h=1 / 12, ext=0.25, alpha=None, projection="interp"):
    """Data drawn from the model itself: SPDE fields on the mesh, regional
    projections, intercepts and noise. Returns ``(problem, u)``."""
    from mvdisagg.aggregation import FineGrid, average_covariates, build_projection
    from mvdisagg.inference import DisaggregationProblem
    from mvdisagg.linalg import factorize, sample_gmrf
    from mvdisagg.lmc import field_precisions
    from mvdisagg.mesh_fem import assemble_fem, build_lattice_mesh

    rng = np.random.default_rng(seed)
    grid = FineGrid(n, n, 0.5 / n, 0.5 / n, 1.0 / n)
    regions = block_regions(grid, k)
    mesh = build_lattice_mesh((0, 1, 0, 1), h, ext)
    fem = assemble_fem(mesh)
    A = build_projection(mesh, regions, projection)
    M = theta.M
    u = np.array([sample_gmrf(factorize(Q), rng=rng) for Q in field_precisions(fem, theta)])
    alpha = np.zeros(M) if alpha is None else np.asarray(alpha)
    Z = theta.Lambda @ (A @ u.T).T + alpha[:, None]
    y = Z + theta.noise_sd[:, None] * rng.standard_normal(Z.shape)
    X = average_covariates(None, regions)
    return DisaggregationProblem(mesh, A, X, y.ravel(), M, fem=fem), u


# Generating model of the synthetic downscaling run: intercepts, altitude
# slopes and the smooth residual surfaces below.
PIPELINE_VARIABLES = ["pm25", "pm10", "o3"]
PIPELINE_ALPHA = np.array([2.0, 3.0, 1.0])
PIPELINE_BETA = np.array([1.5, 1.0, -1.2])


def write_pipeline_inputs(root, seed=3, noise_sd=0.02, **config):
    """Coarse 10 x 10 raster of three correlated variables plus a 50 x 50
    altitude raster on the unit square, and a run config pointing at them.
    Extra keyword arguments become config keys. Returns the config path."""
    from pathlib import Path

    from mvdisagg.aggregation import FineGrid
    from mvdisagg.csvio import header_line, write_raster

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    coarse = FineGrid(10, 10, 0.05, 0.05, 0.1)
    fine = coarse.refine(5)
    x, y = fine.points.T
    alt = 1.2 * np.exp(-((x - 0.3) ** 2 + (y - 0.7) ** 2) / 0.08) + 0.6 * x * y
    # a shared smooth surface and a variable-specific one, mixed
    s1 = np.sin(2 * np.pi * x) * np.cos(np.pi * y)
    s2 = np.cos(3 * x + 1) * np.sin(2 * y + rng.uniform())
    U = np.stack([0.5 * s1, 0.3 * s1 + 0.4 * s2, -0.2 * s1 + 0.3 * s2])
    Z = PIPELINE_ALPHA[:, None] + PIPELINE_BETA[:, None] * alt + U
    cell = ((np.arange(fine.ny) // 5)[:, None] * 10 + (np.arange(fine.nx) // 5)[None, :]).ravel()
    obs = np.stack([np.bincount(cell, z) / 25.0 for z in Z])
    obs += noise_sd * rng.standard_normal(obs.shape)
    head = header_line("synthetic", seed)
    write_raster(root / "coarse.csv", coarse, PIPELINE_VARIABLES, obs.T, head)
    write_raster(root / "altitude.csv", fine, ["altitude"], alt, head)
    cfg = dict(seed=seed, variables=PIPELINE_VARIABLES, covariates=["altitude"], obs_raster="coarse.csv",
               covariate_raster="altitude.csv", refine=5, mesh_h=0.05, n_starts=1, n_samples=500,
               n_corr_samples=500, thresholds={"pm25": [2.5, 3.5], "o3": [0.0]})
    cfg.update(config)
    lines = []
    for k, v in cfg.items():
        if isinstance(v, dict):
            v = "{ " + ", ".join(f"{a} = {list(b)!r}" for a, b in v.items()) + " }"
        elif isinstance(v, list):
            v = "[" + ", ".join(f'"{s}"' if isinstance(s, str) else repr(s) for s in v) + "]"
        elif isinstance(v, str):
            v = f'"{v}"'
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    path = root / "run.toml"
    path.write_text("\n".join(lines) + "\n")
    return path
