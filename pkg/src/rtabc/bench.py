"""Multi-method benchmark runs and their CSV outputs."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import baselines
from .config import ConfigError, floats, trial_seed
from .core import ErrorModel, Forward, InferenceResult, Observation
from .tree import TpConfig, compute_tp_posterior

ALIASES = {
    "tp": "tp",
    "grid": "grid",
    "abc_reject": "abc_reject",
    "abc_rej": "abc_reject",
    "abc_smc": "abc_smc",
    "mcmc_mh": "mcmc_mh",
    "mh": "mcmc_mh",
    "particle_filter": "particle_filter",
    "pf": "particle_filter",
}


TAU_MODES = ("per_value", "relative", "absolute")


class UnknownMethod(ValueError):
    pass


def canonical_method(tag: str) -> str:
    try:
        return ALIASES[tag.strip().lower().replace("-", "_")]
    except KeyError:
        raise UnknownMethod(f"unknown method {tag!r}; choose from {sorted(set(ALIASES.values()))}") from None


def method_config(method: str, cfg: dict, seed: int):
    """Build the per-method settings from a resolved run configuration."""
    if method == "tp":
        if cfg["tau_mode"] not in TAU_MODES:
            raise ConfigError(f"tau_mode must be one of {TAU_MODES}")
        return TpConfig(
            tau=float(cfg["tau"]),
            rho=float(cfg["rho"]),
            max_evals=int(cfg["max_evals"]),
            relative=cfg["tau_mode"] != "absolute",
            per_value=cfg["tau_mode"] == "per_value",
        )
    if method == "grid":
        return baselines.GridConfig(h=float(cfg["h"]))
    if method == "abc_reject":
        return baselines.RejectConfig(tolerance=float(cfg["reject_tol"]), budget=int(cfg["reject_budget"]), seed=seed)
    if method == "abc_smc":
        return baselines.SmcConfig(
            tolerances=tuple(floats(cfg["smc_tols"])),
            population=int(cfg["smc_pop"]),
            budget=int(cfg["smc_budget"]),
            seed=seed,
        )
    if method == "mcmc_mh":
        return baselines.MhConfig(
            length=int(cfg["mh_length"]),
            burn_in=int(cfg["mh_burn"]),
            proposal_std=float(cfg["mh_step"]),
            log_slack_std=float(cfg["mh_log_slack_step"]),
            seed=seed,
        )
    if method == "particle_filter":
        return baselines.PfConfig(
            n_particles=int(cfg["pf_particles"]),
            jitter_fraction=float(cfg["pf_jitter"]),
            ess_fraction=float(cfg["pf_ess"]),
            seed=seed,
        )
    raise UnknownMethod(method)


def run_inference(method: str, mcfg, model: ErrorModel, obs: Observation, forward: Forward):
    """Run one method; returns ``(result, tree_or_None)``."""
    if method == "tp":
        return compute_tp_posterior(mcfg, model, obs, forward)[::-1]
    return baselines.run_method(method, mcfg, model, obs, forward), None


@dataclass
class BenchRecord:
    method: str
    trial: int
    observed_frac: float
    error_m: float
    time_ms: float
    n_evals: int
    map_slack: float
    map_x: float
    map_y: float
    status: str = "ok"


BENCH_COLUMNS = [f.name for f in fields(BenchRecord)]


def run_trial(method, cfg, model, obs, forward, truth, trial, frac, seed) -> BenchRecord:
    try:
        mcfg = method_config(method, cfg, trial_seed(seed, trial))
        t0 = time.perf_counter()
        result, _ = run_inference(method, mcfg, model, obs, forward)
        elapsed = time.perf_counter() - t0
        err = float(np.linalg.norm(result.map_x[:2] - np.asarray(truth)[:2]))
        return BenchRecord(
            method, trial, frac, err, 1000.0 * elapsed, result.n_evals,
            result.map_slack, float(result.map_x[0]), float(result.map_x[1]),
        )
    except Exception as exc:  # a crashing method becomes a failed row
        msg = f"failed:{type(exc).__name__}:{exc}".replace(",", ";").replace("\n", " ")
        nan = math.nan
        return BenchRecord(method, trial, frac, nan, nan, 0, nan, nan, nan, msg)


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in records:
            w.writerow([_fmt(v) for v in asdict(r).values()])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_records(path) -> list[BenchRecord]:
    out = []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if header != BENCH_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"{path}: row with {len(row)} columns")
            d = dict(zip(header, row))
            out.append(
                BenchRecord(
                    d["method"], int(d["trial"]), float(d["observed_frac"]), float(d["error_m"]),
                    float(d["time_ms"]), int(d["n_evals"]), float(d["map_slack"]),
                    float(d["map_x"]), float(d["map_y"]), d["status"],
                )
            )
    return out


SUMMARY_COLUMNS = [
    "method", "observed_frac", "n_ok", "n_failed",
    "error_m_mean", "error_m_std", "time_ms_mean", "time_ms_std", "n_evals_mean", "n_evals_std",
]


def summarize(records) -> list[dict]:
    """Mean and population std of error, time and evaluations per method."""
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r.method, r.observed_frac), []).append(r)
    out = []
    for (method, frac), rows in groups.items():
        ok = [r for r in rows if r.status == "ok"]
        row = {"method": method, "observed_frac": frac, "n_ok": len(ok), "n_failed": len(rows) - len(ok)}
        for name in ("error_m", "time_ms", "n_evals"):
            vals = np.array([getattr(r, name) for r in ok], dtype=float)
            row[f"{name}_mean"] = float(vals.mean()) if len(vals) else math.nan
            row[f"{name}_std"] = float(vals.std()) if len(vals) else math.nan
        out.append(row)
    return out


def write_summary(summary, csv_path, table_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for row in summary:
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    if table_path is not None:
        lines = [f"{'Method':<16}{'Err (cm)':>20}{'Time (ms)':>22}{'# Evals':>22}"]
        for row in summary:
            lines.append(
                f"{row['method']:<16}"
                f"{100 * row['error_m_mean']:>11.1f} +- {100 * row['error_m_std']:<5.1f}"
                f"{row['time_ms_mean']:>13.1f} +- {row['time_ms_std']:<5.1f}"
                f"{row['n_evals_mean']:>13.0f} +- {row['n_evals_std']:<5.0f}"
            )
        Path(table_path).write_text("\n".join(lines) + "\n")


def write_points(records, out_dir) -> None:
    """One ``time_ms,error_m`` file per method for error-vs-time plots."""
    by_method: dict[str, list] = {}
    for r in records:
        if r.status == "ok":
            by_method.setdefault(r.method, []).append(r)
    for method, rows in by_method.items():
        with open(Path(out_dir) / f"points_{method}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_ms", "error_m"])
            for r in rows:
                w.writerow([repr(r.time_ms), repr(r.error_m)])
