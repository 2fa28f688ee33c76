"""
Run configuration: a flat TOML file. Every key is validated on its own and
errors name the offending key; unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .aggregation import PROJECTION_MODES


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


_OPTIMIZERS = ("nelder-mead", "lbfgs", "hybrid")


@dataclass
class RunConfig:
    # general
    seed: int = 0
    variables: list = field(default_factory=list)
    covariates: list = field(default_factory=list)
    na_token: str = "NA"
    # inputs (paths relative to the config file)
    obs_raster: str = ""
    obs_csv: str = ""
    regions_csv: str = ""
    covariate_raster: str = ""
    fit_artifact: str = ""
    refine: int = 5
    # model and mesh
    mesh_h: float = 0.0  # 0: finest raster spacing
    mesh_ext: float = -1.0  # < 0: a quarter of the domain diagonal
    projection: str = "interp"
    subgrid_s: int = 8
    # optimizer
    optimizer: str = "lbfgs"
    n_starts: int = 3
    perturbation: float = 1.0
    xatol: float = 1e-4
    gtol: float = 1e-5
    maxfev: int = 0  # 0: 1000 x number of hyperparameters
    hessian_step: float = 1e-3
    # summaries and prediction
    n_samples: int = 1000
    n_corr_samples: int = 2000
    thresholds: dict = field(default_factory=dict)
    # simulate
    scenario: int = 6
    replicate: int = 0
    sigma_as_sd: bool = False
    # benchmark
    scenarios: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    replicates: int = 20
    study_mesh_h: float = 1.0 / 47.0
    study_mesh_ext: float = 0.2
    study_projection: str = "interp"
    study_n_starts: int = 1
    baseline: bool = True
    accept_scenario: int = 6
    accept_alpha_coverage: float = -1.0  # < 0: not checked
    accept_lambda_coverage: float = -1.0
    accept_sigma2_coverage: float = -1.0
    accept_win_fraction: float = -1.0
    accept_rmse_ordering: bool = False

    base_dir: str = field(default=".", repr=False, compare=False)

    def path(self, key: str) -> Path | None:
        v = getattr(self, key)
        if not v:
            return None
        p = Path(v)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def hash(self) -> str:
        """Digest of every setting except the seed and the file location."""
        d = asdict(self)
        d.pop("seed")
        d.pop("base_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "base_dir"}


def _type_error(key, want, got):
    raise ConfigError(key, f"expected {want}, got {type(got).__name__} {got!r}")


def _check_int(key, v, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        _type_error(key, "an integer", v)
    if lo is not None and v < lo:
        raise ConfigError(key, f"must be >= {lo}, got {v}")
    return v


def _check_float(key, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _type_error(key, "a number", v)
    return float(v)


def _check_str_list(key, v):
    if not isinstance(v, list) or not all(isinstance(s, str) and s for s in v):
        _type_error(key, "a list of non-empty strings", v)
    if len(set(v)) != len(v):
        raise ConfigError(key, "duplicate names")
    return list(v)


def _validate(key, v):
    default = _KEYS[key].default
    if key in ("variables", "covariates"):
        return _check_str_list(key, v)
    if key == "scenarios":
        if not isinstance(v, list) or not v:
            _type_error(key, "a non-empty list of scenario ids", v)
        for s in v:
            _check_int(key, s)
            if s not in range(1, 7):
                raise ConfigError(key, f"unknown scenario {s}; expected 1..6")
        if len(set(v)) != len(v):
            raise ConfigError(key, "duplicate scenarios")
        return list(v)
    if key == "thresholds":
        if not isinstance(v, dict):
            _type_error(key, "an inline table of variable = [thresholds]", v)
        out = {}
        for var, ts in v.items():
            if not isinstance(ts, list) or not ts:
                raise ConfigError(key, f"variable {var!r}: expected a non-empty list of numbers")
            vals = [_check_float(key, t) for t in ts]
            if any(t != t for t in vals):
                raise ConfigError(key, f"variable {var!r}: NaN threshold")
            out[var] = vals
        return out
    if key in ("projection", "study_projection"):
        if v not in PROJECTION_MODES:
            raise ConfigError(key, f"expected one of {', '.join(PROJECTION_MODES)}, got {v!r}")
        return v
    if key == "optimizer":
        if v not in _OPTIMIZERS:
            raise ConfigError(key, f"expected one of {', '.join(_OPTIMIZERS)}, got {v!r}")
        return v
    if isinstance(default, bool):
        if not isinstance(v, bool):
            _type_error(key, "true or false", v)
        return v
    if isinstance(default, int):
        lo = {"seed": 0, "replicate": 0, "maxfev": 0}.get(key, 1)
        v = _check_int(key, v, lo)
        if key in ("scenario", "accept_scenario") and v not in range(1, 7):
            raise ConfigError(key, f"unknown scenario {v}; expected 1..6")
        return v
    if isinstance(default, float):
        v = _check_float(key, v)
        if key in ("xatol", "gtol", "hessian_step", "perturbation", "study_mesh_h") and not v > 0:
            raise ConfigError(key, f"must be positive, got {v}")
        if key in ("mesh_h", "study_mesh_ext") and v < 0:
            raise ConfigError(key, f"must be >= 0, got {v}")
        if key.startswith("accept_") and v > 1:
            raise ConfigError(key, f"must be <= 1, got {v}")
        return v
    if isinstance(default, str):
        if not isinstance(v, str):
            _type_error(key, "a string", v)
        return v
    raise AssertionError(key)


def config_from_dict(d: dict, base_dir=".") -> RunConfig:
    unknown = sorted(set(d) - set(_KEYS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    kwargs = {}
    for k, v in d.items():
        if isinstance(v, dict) and k != "thresholds":
            raise ConfigError(k, "tables are not allowed; the config is flat")
        kwargs[k] = _validate(k, v)
    return RunConfig(**kwargs, base_dir=str(base_dir))


def load_config(path=None, seed: int | None = None) -> RunConfig:
    """Read ``path`` (or defaults when ``None``); ``seed`` overrides the
    file's seed."""
    if path is None:
        cfg = RunConfig()
    else:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        try:
            d = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError("--config", f"{path}: {exc}") from None
        cfg = config_from_dict(d, path.parent)
    if seed is not None:
        cfg.seed = _check_int("--seed", seed, 0)
    return cfg
