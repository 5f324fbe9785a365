"""
Run configuration.

A run is described by one key=value file (dotenv syntax). Values are validated
by the pydantic ``RunConfig`` model; environment variables prefixed with
``TRANSIT_`` override the file, so a ``.env`` next to the backend works the
same way it does for database credentials.
"""

import hashlib
import json
import logging
import os
from typing import Literal, Optional

import numpy as np
from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from errors import ConfigError

# Load .env from the backend directory, as the service always did
load_dotenv(dotenv_path=os.path.join(os.path.dirname(__file__), '.env'))

logger = logging.getLogger(__name__)

ENV_PREFIX = "TRANSIT_"

ChoiceVariant = Literal["spatiotemporal", "spatial", "temporal", "static"]


class RunConfig(BaseModel):
    """All knobs of a simulate/fit/evaluate run. Defaults are the published values."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Sampler schedule
    burn_in: int = 8000
    samples: int = 2000
    chains: int = 1
    seed: int = 0
    thinning: int = 1
    workers: int = 1
    log_every: int = 100

    # Choice model
    rank: int = 4
    choice_variant: ChoiceVariant = "spatiotemporal"
    # utilities are computed in minutes; 1.0 scores raw seconds
    utility_time_unit_s: float = 60.0
    init_factor_scale: float = 0.1

    # log-normal priors on the coefficients of variation
    mu_sigma_a: float = -3.0
    mu_sigma_h: float = -3.0
    mu_sigma_u: float = -3.0
    mu_sigma_e: float = -3.0
    var_sigma_a: float = 0.2
    var_sigma_h: float = 0.2
    var_sigma_u: float = 0.2
    var_sigma_e: float = 0.2

    # Gaussian priors on the baseline effects
    mu_q1: float = 0.0
    mu_q2: float = 0.0
    var_q1: float = 0.1
    var_q2: float = 0.1

    # GP kernels
    lengthscale: float = 3.0
    alpha: float = 0.2
    se_variance: float = 1.0
    jitter_start: float = 1e-10
    jitter_cap: float = 1e-4

    # inverse-Wishart prior on K_U
    omega0: list[list[float]] = [[1.0, 0.0], [0.0, 1.0]]
    nu0: float = 5.0

    # State-space model
    tau2: float = 25.0
    m0_policy: Literal["warm_start", "nominal"] = "warm_start"
    p0_variance: float = 100.0 ** 2
    variance_floor_s: float = 1.0

    # Slice sampling
    slice_eps_log_sigma: float = 0.5
    slice_eps_q: float = 0.2
    slice_max_shrink: int = 200

    # Data handling
    n_intervals: int = 32
    interval_start: str = "06:00"
    interval_minutes: int = 30
    max_malformed_fraction: float = 0.001
    holdout_fraction: float = 0.0
    k_max: int = 5
    detour_cap: float = 1.5

    # Outputs
    store_labels: bool = False
    predictive_draws: int = 200
    predictive_replicates: int = 1
    credible_level: float = 0.95
    ess_threshold: float = 200.0
    log_level: str = "INFO"

    @field_validator('omega0', mode='before')
    @classmethod
    def parse_omega0(cls, v):
        # "1,0,0,1" in a config file means a row-major 2x2 matrix
        if isinstance(v, str):
            parts = [float(p) for p in v.replace(';', ',').split(',') if p.strip()]
            if len(parts) != 4:
                raise ValueError('omega0 needs 4 comma separated entries')
            return [parts[:2], parts[2:]]
        return v

    @field_validator('omega0')
    @classmethod
    def validate_omega0(cls, v):
        m = np.asarray(v, dtype=float)
        if m.shape != (2, 2):
            raise ValueError('omega0 must be 2x2')
        if not np.allclose(m, m.T):
            raise ValueError('omega0 must be symmetric')
        if np.any(np.linalg.eigvalsh(m) <= 0):
            raise ValueError('omega0 must be positive definite')
        return v

    @field_validator('burn_in', 'samples', 'chains', 'thinning', 'workers',
                     'log_every', 'n_intervals', 'interval_minutes', 'k_max',
                     'slice_max_shrink', 'predictive_draws', 'predictive_replicates')
    @classmethod
    def validate_at_least_one(cls, v):
        if v < 1:
            raise ValueError('must be >= 1')
        return v

    @field_validator('rank')
    @classmethod
    def validate_rank(cls, v):
        if v < 0:
            raise ValueError('must be >= 0')
        return v

    @field_validator('var_sigma_a', 'var_sigma_h', 'var_sigma_u', 'var_sigma_e',
                     'var_q1', 'var_q2', 'lengthscale', 'se_variance', 'tau2',
                     'p0_variance', 'variance_floor_s', 'slice_eps_log_sigma',
                     'slice_eps_q', 'jitter_start', 'jitter_cap',
                     'utility_time_unit_s', 'init_factor_scale', 'detour_cap', 'alpha')
    @classmethod
    def validate_positive(cls, v):
        if not v > 0:
            raise ValueError('must be > 0')
        return v

    @field_validator('holdout_fraction', 'max_malformed_fraction')
    @classmethod
    def validate_fraction(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError('must be in [0, 1)')
        return v

    @field_validator('credible_level')
    @classmethod
    def validate_level(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError('must be in (0, 1)')
        return v

    @field_validator('interval_start')
    @classmethod
    def validate_clock(cls, v):
        hh, _, mm = v.partition(':')
        if not (hh.isdigit() and mm.isdigit() and int(hh) < 24 and int(mm) < 60):
            raise ValueError('must be HH:MM')
        return v

    @model_validator(mode='after')
    def validate_wishart(self):
        if self.nu0 <= 1:
            raise ValueError('nu0 must be > 1')
        if self.jitter_cap < self.jitter_start:
            raise ValueError('jitter_cap must be >= jitter_start')
        return self

    # ── Derived views ──

    @property
    def log_sigma_prior_mean(self) -> np.ndarray:
        return np.array([self.mu_sigma_a, self.mu_sigma_h, self.mu_sigma_u, self.mu_sigma_e])

    @property
    def log_sigma_prior_var(self) -> np.ndarray:
        return np.array([self.var_sigma_a, self.var_sigma_h, self.var_sigma_u, self.var_sigma_e])

    @property
    def q_prior_mean(self) -> np.ndarray:
        return np.array([self.mu_q1, self.mu_q2])

    @property
    def q_prior_var(self) -> np.ndarray:
        return np.array([self.var_q1, self.var_q2])

    @property
    def omega0_matrix(self) -> np.ndarray:
        return np.asarray(self.omega0, dtype=float)

    @property
    def interval_start_minutes(self) -> int:
        hh, _, mm = self.interval_start.partition(':')
        return int(hh) * 60 + int(mm)


def _errors_to_details(exc: ValidationError) -> list[str]:
    return [
        f"{'.'.join(str(p) for p in err['loc']) or '<config>'}: {err['msg']}"
        for err in exc.errors()
    ]


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                    use_env: bool = True) -> RunConfig:
    """
    Build a RunConfig from (in increasing priority) defaults, a key=value file,
    TRANSIT_* environment variables and explicit overrides.
    """
    values: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        values.update({k.lower(): v for k, v in dotenv_values(path).items() if v is not None})

    for name in (RunConfig.model_fields if use_env else ()):
        env_value = os.getenv(ENV_PREFIX + name.upper())
        if env_value is not None:
            values[name] = env_value

    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})

    try:
        cfg = RunConfig(**values)
    except ValidationError as e:
        raise ConfigError("Invalid run configuration", _errors_to_details(e)) from e

    logger.debug(f"[Config] Loaded run config (hash {config_hash(cfg)[:12]})")
    return cfg


def write_run_config(cfg: RunConfig, path: str) -> None:
    """Write a config back out in the same key=value format it is read from"""
    lines = ["# transit-assign run configuration"]
    for name, value in cfg.model_dump().items():
        if name == 'omega0':
            value = ",".join(repr(float(x)) for row in value for x in row)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name}={value}")
    with open(path, 'w', encoding='utf-8') as f:
        f.write("\n".join(lines) + "\n")


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(cfg.model_dump(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(payload.encode()).hexdigest()
