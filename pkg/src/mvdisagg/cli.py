"""
Command-line interface.

    mvdisagg simulate     --config run.toml --out sim/
    mvdisagg fit          --config run.toml --out fit/
    mvdisagg predict      --config run.toml --out fit/
    mvdisagg exceed       --config run.toml --out fit/
    mvdisagg baseline-fit --config run.toml --out areal/
    mvdisagg benchmark    --config study.toml --out study/ --replicates 20

Exit codes: 0 success, 2 validation error, 3 numerical failure,
4 acceptance violation (benchmark).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import FineGrid, RegionSet, average_covariates, build_projection
from .areal import ArealProblem, areal_fitted_means, build_adjacency
from .config import ConfigError, RunConfig, load_config
from .csvio import (TOOL, FormatError, grids_aligned, header_line, read_obs, read_raster,
                    read_regions, write_csv, write_obs, write_raster, write_regions)
from .inference import (DisaggregationProblem, FitConfig, FitResult, NonConvergenceError,
                        correlation_posterior, fit, fixed_effects_summary, hyper_intervals,
                        posterior_at, predict)
from .mesh_fem import build_lattice_mesh, default_extension
from .simstudy import (COVERAGE_ROWS, SimParams, StudyConfig, make_observations, replicate_rngs,
                       run_study, scenario, scenario_regions, simulate_lmc_fields, study_grid)

log = logging.getLogger("mvdisagg")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 2, 3, 4

ARTIFACT_FORMAT = "mvdisagg-fit/1"

# exceedance fractions are never taken from fewer draws than this
MIN_EXCEED_SAMPLES = 2000


class ValidationError(ValueError):
    pass


class AcceptanceViolation(RuntimeError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# --------------------------------------------------------------------------
# Run context: header line and manifest

class Run:
    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.header = header_line(cfg.hash(), cfg.seed)
        self.inputs: list[tuple[str, str]] = []
        self.outputs: list[str] = []
        self.notes: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def add_input(self, key: str):
        p = self.cfg.path(key)
        digest = hashlib.sha256(p.read_bytes()).hexdigest() if p and p.is_file() else "missing"
        self.inputs.append((getattr(self.cfg, key) or key, digest))

    def file(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def write_manifest(self):
        lines = [self.header, f"tool: {TOOL} {__version__}", f"command: {self.command}",
                 f"config_hash: {self.cfg.hash()}", f"seed: {self.cfg.seed}",
                 "config: " + json.dumps(self.cfg.as_dict(), sort_keys=True), "inputs:"]
        lines += [f"  {name} sha256={digest}" for name, digest in self.inputs]
        lines.append("outputs:")
        lines += [f"  {name}" for name in self.outputs]
        lines += self.notes
        (self.out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


# --------------------------------------------------------------------------
# Inputs

@dataclass
class Inputs:
    grid: FineGrid
    regions: RegionSet
    variables: list
    Y: np.ndarray  # (M, N)
    Xbar: np.ndarray
    covariates: list
    cov_fine: np.ndarray | None  # (n_cells, p - 1)

    @property
    def y(self) -> np.ndarray:
        return self.Y.ravel()


def _coarse_regions(coarse: FineGrid, keep: np.ndarray, factor: int) -> RegionSet:
    """Fine grid ``coarse.refine(factor)`` with every fine cell assigned to
    its coarse cell; coarse cells not in ``keep`` are outside."""
    fine = coarse.refine(factor)
    rid = np.full(coarse.n_cells, -1)
    rid[keep] = np.arange(keep.size)
    I, J = np.meshgrid(np.arange(fine.nx) // factor, np.arange(fine.ny) // factor)
    return RegionSet(fine, rid[(J * coarse.nx + I).ravel()])


def load_inputs(cfg: RunConfig, run: Run | None = None) -> Inputs:
    if cfg.obs_raster:
        raster = read_raster(cfg.path("obs_raster"), cfg.na_token)
        variables = cfg.variables or list(raster.columns)
        try:
            V = np.column_stack([raster.column(v) for v in variables])
        except KeyError as exc:
            raise ConfigError("variables", exc.args[0]) from None
        keep = np.flatnonzero(np.all(np.isfinite(V), axis=1))
        if keep.size < 2:
            raise ValidationError(f"{cfg.obs_raster}: fewer than two complete cells")
        if keep.size < raster.grid.n_cells:
            log.info("%d coarse cells with missing values are left out", raster.grid.n_cells - keep.size)
        regions = _coarse_regions(raster.grid, keep, cfg.refine)
        Y = V[keep].T
        if run:
            run.add_input("obs_raster")
    elif cfg.obs_csv or cfg.regions_csv:
        if not (cfg.obs_csv and cfg.regions_csv):
            raise ConfigError("regions_csv" if cfg.obs_csv else "obs_csv",
                              "obs_csv and regions_csv must be given together")
        regions = read_regions(cfg.path("regions_csv"))
        names, Y = read_obs(cfg.path("obs_csv"), cfg.na_token)
        if Y.shape[1] != regions.n_regions:
            raise ValidationError(f"{cfg.obs_csv} has {Y.shape[1]} regions, "
                                  f"{cfg.regions_csv} has {regions.n_regions}")
        variables = cfg.variables or names
        missing = [v for v in variables if v not in names]
        if missing:
            raise ConfigError("variables", f"{missing[0]!r} is not a column of {cfg.obs_csv}")
        Y = Y[[names.index(v) for v in variables]]
        if run:
            run.add_input("obs_csv")
            run.add_input("regions_csv")
    else:
        raise ConfigError("obs_raster", "either obs_raster or obs_csv + regions_csv is required")
    grid = regions.grid
    cov_fine = None
    if cfg.covariates:
        cov_fine = load_covariates(cfg, grid)
        if run:
            run.add_input("covariate_raster")
    Xbar = average_covariates(cov_fine, regions)
    return Inputs(grid, regions, list(variables), Y, Xbar, list(cfg.covariates), cov_fine)


def load_covariates(cfg: RunConfig, grid: FineGrid) -> np.ndarray:
    if not cfg.covariate_raster:
        raise ConfigError("covariate_raster", "required when covariates are listed")
    cr = read_raster(cfg.path("covariate_raster"), cfg.na_token)
    if not grids_aligned(cr.grid, grid):
        raise ValidationError(
            f"{cfg.covariate_raster}: grid {cr.grid.nx}x{cr.grid.ny} at ({cr.grid.x0:g}, {cr.grid.y0:g}) "
            f"step {cr.grid.dx:g} is misaligned with the fine grid {grid.nx}x{grid.ny} at "
            f"({grid.x0:g}, {grid.y0:g}) step {grid.dx:g}")
    try:
        return np.column_stack([cr.column(c) for c in cfg.covariates])
    except KeyError as exc:
        raise ConfigError("covariates", exc.args[0]) from None


def _mesh_settings(cfg: RunConfig, grid: FineGrid):
    domain = grid.bounds
    h = cfg.mesh_h or max(grid.dx, grid.dy)
    ext = cfg.mesh_ext if cfg.mesh_ext >= 0 else default_extension(domain)
    return domain, h, ext


def _fit_config(cfg: RunConfig, n_starts=None) -> FitConfig:
    return FitConfig(n_starts=n_starts or cfg.n_starts, perturbation=cfg.perturbation,
                     method=cfg.optimizer, xatol=cfg.xatol, gtol=cfg.gtol,
                     maxfev=cfg.maxfev or None, hessian_step=cfg.hessian_step, seed=cfg.seed)


# --------------------------------------------------------------------------
# Summary tables

def _fixed_effect_rows(fr: FitResult, variables):
    rows = []
    for var, term, m, sd, lo, med, hi in fixed_effects_summary(fr):
        rows.append((f"{term}[{var}]", var, term, m, sd, lo, med, hi))
    sd = fr.theta_sd
    M = fr.problem.M
    for i, (name, est, lo, hi) in enumerate(hyper_intervals(fr)):
        if name.startswith("lambda_"):
            j, k = int(name[-2]) - 1, int(name[-1]) - 1
            rows.append((name, variables[j], f"lambda[{variables[k]}]", est, sd[i], lo, est, hi))
    assert len(rows) == M * fr.problem.Xbar.shape[1] + M * (M - 1) // 2
    return rows


FIXED_EFFECT_COLUMNS = ["parameter", "variable", "term", "mean", "sd", "q025", "q50", "q975"]


def _write_hyper(run: Run, name: str, fr: FitResult):
    sd = fr.theta_sd
    rows = [(n, est, sd[i], lo, hi) for i, (n, est, lo, hi) in enumerate(hyper_intervals(fr))]
    logs = "log(rho), log(sigma2)" if isinstance(fr.problem, DisaggregationProblem) else "log(sigma2)"
    write_csv(run.file(name), ["parameter", "estimate", "sd_transformed", "q025", "q975"], rows,
              run.header, [f"95% intervals are Gaussian in {logs}, log(noise_sd), raw lambda"])


# --------------------------------------------------------------------------
# Commands

def cmd_simulate(cfg: RunConfig, run: Run):
    P = SimParams.table_as_sd() if cfg.sigma_as_sd else SimParams()
    variables = cfg.variables or ["var1", "var2", "var3"]
    if len(variables) != 3:
        raise ConfigError("variables", "simulation produces exactly three variables")
    field_rng, rng = replicate_rngs(cfg.seed, cfg.scenario, cfg.replicate)
    grid = study_grid()
    W = simulate_lmc_fields(P, field_rng)
    regions = scenario_regions(scenario(cfg.scenario), rng, grid)
    y = make_observations(W, regions, P.noise_sd, rng)
    for k in range(3):
        write_raster(run.file(f"truth_{k + 1}.csv"), grid, [variables[k]], W[k], run.header)
    write_regions(run.file("regions.csv"), regions, run.header)
    write_obs(run.file("obs.csv"), variables, y.reshape(3, -1), run.header)
    run.notes.append(f"scenario: {cfg.scenario} replicate: {cfg.replicate} regions: {regions.n_regions}")


def build_problem(cfg: RunConfig, inp: Inputs):
    domain, h, ext = _mesh_settings(cfg, inp.grid)
    mesh = build_lattice_mesh(domain, h, ext)
    A = build_projection(mesh, inp.regions, cfg.projection, cfg.subgrid_s)
    problem = DisaggregationProblem(mesh, A, inp.Xbar, inp.y, len(inp.variables),
                                    variables=inp.variables, covariates=inp.covariates)
    return problem, dict(domain=list(domain), h=h, ext=ext)


def cmd_fit(cfg: RunConfig, run: Run):
    inp = load_inputs(cfg, run)
    problem, mesh_info = build_problem(cfg, inp)
    log.info("fitting %d variables on %d regions, %d mesh nodes", problem.M, problem.N, problem.mesh.n_nodes)
    fr = fit(problem, _fit_config(cfg))
    artifact = dict(
        format=ARTIFACT_FORMAT, tool=f"{TOOL} {__version__}", config_hash=run.cfg.hash(), seed=cfg.seed,
        variables=inp.variables, covariates=inp.covariates,
        grid=dict(nx=inp.grid.nx, ny=inp.grid.ny, x0=inp.grid.x0, y0=inp.grid.y0, dx=inp.grid.dx, dy=inp.grid.dy),
        regions=inp.regions.cell_assignment, mesh=mesh_info, projection=cfg.projection, subgrid_s=cfg.subgrid_s,
        Xbar=inp.Xbar, y=inp.y, theta_names=fr.names, theta_vec=fr.theta_vec, theta_cov=fr.theta_cov,
        loglik=fr.loglik, hessian_clamped=fr.hessian_clamped, latent_mean=fr.latent_mean, trace=fr.trace,
    )
    run.file("fit.json").write_text(json.dumps(_jsonable(artifact), sort_keys=True) + "\n", encoding="utf-8")
    write_csv(run.file("fixed_effects.csv"), FIXED_EFFECT_COLUMNS, _fixed_effect_rows(fr, inp.variables),
              run.header)
    rows = [(inp.variables[i], inp.variables[j], m, lo, med, hi)
            for i, j, m, lo, med, hi in correlation_posterior(fr, cfg.n_corr_samples,
                                                              np.random.default_rng([cfg.seed, 2]))]
    write_csv(run.file("correlations.csv"), ["variable_i", "variable_j", "mean", "q025", "q50", "q975"],
              rows, run.header)
    _write_hyper(run, "hyperparameters.csv", fr)
    if fr.hessian_clamped:
        run.notes.append("warning: Hessian not positive definite at the optimum; covariance projected")
    run.notes.append(f"loglik: {fr.loglik!r}")


def load_fit(path) -> tuple[FitResult, FineGrid, dict]:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read fit artifact {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not a fit artifact ({exc})") from None
    if d.get("format") != ARTIFACT_FORMAT:
        raise ValidationError(f"{path}: unsupported artifact format {d.get('format')!r}")
    grid = FineGrid(**d["grid"])
    regions = RegionSet(grid, np.asarray(d["regions"], dtype=int))
    m = d["mesh"]
    mesh = build_lattice_mesh(tuple(m["domain"]), m["h"], m["ext"])
    A = build_projection(mesh, regions, d["projection"], d["subgrid_s"])
    problem = DisaggregationProblem(mesh, A, np.asarray(d["Xbar"]), np.asarray(d["y"]), len(d["variables"]),
                                    variables=d["variables"], covariates=d["covariates"])
    fr = posterior_at(problem, np.asarray(d["theta_vec"]), np.asarray(d["theta_cov"]))
    stored = np.asarray(d["latent_mean"])
    if not np.allclose(fr.latent_mean, stored, rtol=1e-6, atol=1e-9 * max(1.0, np.abs(stored).max())):
        raise ValidationError(f"{path}: latent mean does not match the stored inputs")
    return fr, grid, d


def _prediction_inputs(cfg: RunConfig, run: Run):
    path = cfg.path("fit_artifact") or run.out / "fit.json"
    fr, grid, d = load_fit(path)
    run.inputs.append((str(cfg.fit_artifact or "fit.json"), hashlib.sha256(Path(path).read_bytes()).hexdigest()))
    covs = d["covariates"]
    if covs:
        if list(cfg.covariates) != list(covs):
            raise ConfigError("covariates", f"must match the fitted model: {covs}")
        C = load_covariates(cfg, grid)
        run.add_input("covariate_raster")
        ok = np.all(np.isfinite(C), axis=1)
    else:
        C = None
        ok = np.ones(grid.n_cells, dtype=bool)
    if not ok.any():
        raise ValidationError("no prediction cell has complete covariates")
    return fr, grid, d["variables"], C, ok


def _threshold_map(cfg: RunConfig, variables) -> dict:
    out = {}
    for var, ts in cfg.thresholds.items():
        if var not in variables:
            raise ConfigError("thresholds", f"unknown variable {var!r}; expected one of {', '.join(variables)}")
        out[variables.index(var)] = ts
    return out


def _full(ok, values):
    out = np.full(ok.size, np.nan)
    out[ok] = values
    return out


def cmd_predict(cfg: RunConfig, run: Run):
    fr, grid, variables, C, ok = _prediction_inputs(cfg, run)
    res = predict(fr, grid.points[ok], None if C is None else C[ok], cfg.n_samples,
                  np.random.default_rng([cfg.seed, 1]))
    note = [f"posterior from {res.n_samples} draws at the fitted hyperparameters"]
    for j, v in enumerate(variables):
        write_raster(run.file(f"mean_{v}.csv"), grid, [v], _full(ok, res.mean[j]), run.header, note)
        write_raster(run.file(f"sd_{v}.csv"), grid, [v], _full(ok, res.sd[j]), run.header, note)


def threshold_label(t: float) -> str:
    return f"{t:g}"


def cmd_exceed(cfg: RunConfig, run: Run):
    if not cfg.thresholds:
        raise ConfigError("thresholds", "empty threshold list")
    # thresholds are validated against the artifact's variables before sampling
    fr, grid, variables, C, ok = _prediction_inputs(cfg, run)
    thr = _threshold_map(cfg, variables)
    res = predict(fr, grid.points[ok], None if C is None else C[ok], max(cfg.n_samples, MIN_EXCEED_SAMPLES),
                  np.random.default_rng([cfg.seed, 1]), thr)
    for (j, t), p in sorted(res.exceedance.items()):
        v = variables[j]
        write_raster(run.file(f"exceed_{v}_t{threshold_label(t)}.csv"), grid, [f"p_{v}_gt"], _full(ok, p),
                     run.header, [f"P({v} > {t!r}) from {res.n_samples} posterior draws"])


def cmd_baseline_fit(cfg: RunConfig, run: Run):
    inp = load_inputs(cfg, run)
    adj = build_adjacency(inp.regions)
    problem = ArealProblem(adj, inp.Xbar, inp.y, len(inp.variables),
                           variables=inp.variables, covariates=inp.covariates)
    fr = fit(problem, _fit_config(cfg))
    write_csv(run.file("areal_fixed_effects.csv"), FIXED_EFFECT_COLUMNS,
              _fixed_effect_rows(fr, inp.variables), run.header)
    _write_hyper(run, "areal_hyperparameters.csv", fr)
    means = areal_fitted_means(fr)
    a = inp.regions.cell_assignment
    ok = a >= 0
    for j, v in enumerate(inp.variables):
        vals = np.full(a.size, np.nan)
        vals[ok] = means[j][a[ok]]
        write_raster(run.file(f"areal_mean_{v}.csv"), inp.grid, [v], vals, run.header,
                     ["regional posterior means broadcast to every cell of the region"])


def study_config(cfg: RunConfig, replicates: int | None = None) -> StudyConfig:
    fc = FitConfig(n_starts=cfg.study_n_starts, perturbation=cfg.perturbation, method=cfg.optimizer,
                   xatol=cfg.xatol, gtol=cfg.gtol, maxfev=cfg.maxfev or None,
                   hessian_step=cfg.hessian_step, seed=cfg.seed)
    return StudyConfig(scenarios=tuple(cfg.scenarios), n_replicates=replicates or cfg.replicates,
                       master_seed=cfg.seed, mesh_h=cfg.study_mesh_h, mesh_ext=cfg.study_mesh_ext,
                       projection=cfg.study_projection, fit=fc, areal_fit=fc,
                       params=SimParams.table_as_sd() if cfg.sigma_as_sd else SimParams(),
                       baseline=cfg.baseline)


def acceptance_violations(cfg: RunConfig, report) -> list[str]:
    out = []
    s = cfg.accept_scenario
    groups = dict(alpha=cfg.accept_alpha_coverage, lambda_=cfg.accept_lambda_coverage,
                  sigma2=cfg.accept_sigma2_coverage)
    for prefix, thr in groups.items():
        if thr < 0:
            continue
        if s not in cfg.scenarios:
            out.append(f"accept_scenario {s} was not run")
            break
        for row in COVERAGE_ROWS:
            if row.startswith(prefix.rstrip("_") + "_"):
                c = report.coverage(s, row)
                if not c >= thr:
                    out.append(f"coverage of {row} in scenario {s} is {c:.3f} < {thr}")
    if cfg.accept_win_fraction >= 0:
        for sid in (3, 6):
            if sid in cfg.scenarios:
                w = report.win_fraction(sid)
                if not w >= cfg.accept_win_fraction:
                    out.append(f"disaggregation beats areal in {w:.3f} of pairs in scenario {sid} "
                               f"< {cfg.accept_win_fraction}")
    if cfg.accept_rmse_ordering:
        for chain in ((4, 5, 6), (1, 2, 3)):
            if not all(c in cfg.scenarios for c in chain):
                continue
            for j in range(3):
                m = [report.mean_rmse(c, j) for c in chain]
                if not (m[0] > m[1] > m[2]):
                    out.append(f"mean RMSE of variable {j + 1} not decreasing over scenarios "
                               f"{chain}: {', '.join(f'{v:.4f}' for v in m)}")
    return out


def write_study(report, run: Run):
    sc = report.config.scenarios
    comments = [f"replicates per scenario: {report.config.n_replicates}",
                (f"alpha: 2.5/97.5% quantiles of the intercept posterior mixed over "
                 f"{report.config.theta_samples} hyperparameter draws" if report.config.theta_samples
                 else "alpha: Gaussian plug-in interval of the intercept")
                + "; lambda: Gaussian hyperparameter interval;"
                " rho, sigma2, e: Gaussian interval of the log parameter, back-transformed",
                "failed replicates: " + ", ".join(f"scenario {s}: {report.failures(s)}" for s in sc)]
    write_csv(run.file("coverage.csv"), ["parameter", *[f"scenario_{s}" for s in sc]],
              report.coverage_table(), run.header, comments)
    write_csv(run.file("rmse.csv"), ["scenario", "replicate", "variable", "model", "rmse"],
              report.rmse_rows(), run.header)
    rows = []
    for s in sc:
        for j in range(3):
            rows.append((s, j + 1, report.mean_rmse(s, j, "disaggregation"), report.mean_rmse(s, j, "areal")))
    write_csv(run.file("rmse_summary.csv"), ["scenario", "variable", "disaggregation", "areal"], rows,
              run.header, ["mean RMSE over replicates against the true 48 x 48 fields"])
    run.notes.append("replicate streams: fields <- [seed, 0, replicate]; regions and noise <- [seed, scenario, replicate]")
    run.notes.append(f"replicates: {report.config.n_replicates}")


def cmd_benchmark(cfg: RunConfig, run: Run, replicates=None, threads=1):
    sc = study_config(cfg, replicates)

    def progress(rec):
        log.info("scenario %d replicate %d done%s", rec.scenario, rec.replicate,
                 f" (failed: {rec.failed})" if rec.failed else "")

    report = run_study(sc, workers=threads, progress=progress)
    write_study(report, run)
    bad = acceptance_violations(cfg, report)
    if bad:
        run.notes += [f"violation: {b}" for b in bad]
        raise AcceptanceViolation(bad)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "exceed": cmd_exceed,
    "benchmark": cmd_benchmark,
    "baseline-fit": cmd_baseline_fit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvdisagg", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat TOML run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--replicates", type=int, help="replicates per scenario (benchmark)")
        p.add_argument("--threads", type=int, default=1, help="worker processes (benchmark)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        if args.replicates is not None and args.replicates < 1:
            raise ConfigError("--replicates", "must be >= 1")
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        cfg = load_config(args.config, args.seed)
        run = Run(args.command, cfg, Path(args.out))
        if args.command == "benchmark":
            cmd_benchmark(cfg, run, args.replicates, args.threads)
        else:
            COMMANDS[args.command](cfg, run)
    except AcceptanceViolation as exc:
        for v in exc.violations:
            print(f"acceptance violation: {v}", file=sys.stderr)
        run.write_manifest()
        return EXIT_ACCEPTANCE
    except (np.linalg.LinAlgError, NonConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, FormatError, ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    run.write_manifest()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
