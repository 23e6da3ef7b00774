"""Flat ``key=value`` run configuration.

Precedence: command-line flags > config file > built-in defaults.  Every key
has a default here, which also fixes its type.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "n": 1000,
    "noise_std": 0.0,
    "table_x_lo": -2.0,
    "table_x_hi": 2.0,
    "table_y_lo": -2.0,
    "table_y_hi": 2.0,
    # surrogate
    "hidden": "128,128",
    "epsilon_star": 0.01,
    "lr": 0.02,
    "batch": 16,
    "epochs": 1000,
    # error model
    "slack_min": 0.01,
    "slack_max": 5.0,
    "slack_n": 16,
    # inference
    "method": "tp",
    "methods": "tp,grid,abc_reject,abc_smc,mcmc_mh,particle_filter",
    "observed_frac": 0.5,
    "observed_fracs": "0.5",
    "index": 0,
    "trials": 100,
    "h": 0.1,
    "rho": 0.01,
    "tau": -2.5,
    "tau_mode": "per_value",
    "max_evals": 1_000_000,
    "reject_tol": 0.1,
    "reject_budget": 15000,
    "smc_tols": "0.4,0.2,0.1,0.05,0.03",
    "smc_pop": 500,
    "smc_budget": 15000,
    "mh_length": 5000,
    "mh_burn": 1000,
    "mh_step": 0.1,
    "mh_log_slack_step": 0.2,
    "pf_particles": 300,
    "pf_jitter": 0.01,
    "pf_ess": 0.5,
    "slack_threshold": 0.1,
    "offset": 0.0,
}


class ConfigError(ValueError):
    pass


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key: str, value):
    default = DEFAULTS.get(key)
    if default is None or isinstance(value, type(default)) and not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(float(value))
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return str(value)


def resolve(file_values: dict | None, flag_values: dict) -> dict:
    """Merge defaults, file values and non-``None`` flag values."""
    cfg = dict(DEFAULTS)
    for source in (file_values or {}, {k: v for k, v in flag_values.items() if v is not None}):
        for key, value in source.items():
            cfg[key] = _coerce(key, value)
    return cfg


def write_effective(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key}={cfg[key]}\n")


def floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def trial_seed(seed: int, trial: int) -> int:
    """Per-trial seed: first 8 bytes of sha256("seed:trial")."""
    digest = hashlib.sha256(f"{seed}:{trial}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def slack_grid(cfg: dict) -> np.ndarray:
    n = int(cfg["slack_n"])
    if n == 1:
        return np.array([float(cfg["slack_min"])])
    return np.geomspace(float(cfg["slack_min"]), float(cfg["slack_max"]), n)
