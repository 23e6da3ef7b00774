"""Comparison inference strategies: grid, ABC rejection, ABC-SMC, random-walk
Metropolis-Hastings and a bootstrap particle filter.

Every method takes the same ``(model, obs, forward)`` triple as the tree
pyramid and reports ``n_evals`` as the number of latent points pushed through
``forward``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CountingForward,
    ErrorModel,
    Forward,
    InferenceResult,
    Observation,
    gaussian_loglik,
    residual_sse,
    score_sse,
    slack_log_prior,
)

METHODS = ("grid", "abc_reject", "abc_smc", "mcmc_mh", "particle_filter")


class GridTooLarge(ValueError):
    pass


@dataclass
class GridConfig:
    h: float = 0.1
    max_cells: int = 10_000_000
    chunk: int = 8192


@dataclass
class RejectConfig:
    tolerance: float = 0.1
    budget: int = 15000
    chunk: int = 5000
    seed: int = 0


@dataclass
class SmcConfig:
    tolerances: tuple = (0.4, 0.2, 0.1, 0.05, 0.03)
    population: int = 500
    budget: int = 15000
    seed: int = 0

    def __post_init__(self):
        tol = np.asarray(self.tolerances, dtype=float)
        if tol.size == 0 or np.any(np.diff(tol) >= 0):
            raise ValueError("tolerance schedule must be non-empty and strictly decreasing")
        if self.population < 1 or self.budget < 1:
            raise ValueError("population and budget must be positive")


@dataclass
class MhConfig:
    length: int = 5000
    burn_in: int = 1000
    proposal_std: float | tuple = 0.1
    log_slack_std: float = 0.2
    init: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.length:
            raise ValueError("need 0 <= burn_in < length")


@dataclass
class PfConfig:
    n_particles: int = 300
    ess_fraction: float = 0.5
    jitter_fraction: float = 0.01
    seed: int = 0


def _result(x, slack, score, n_evals, t0, **kw) -> InferenceResult:
    return InferenceResult(
        map_x=np.atleast_1d(np.asarray(x, dtype=float)).copy(),
        map_slack=float(slack),
        log_posterior=float(score),
        n_evals=int(n_evals),
        wall_time=time.perf_counter() - t0,
        **kw,
    )


# --- grid -------------------------------------------------------------------


def grid_cells(model: ErrorModel, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Cells per axis and cell width per axis for spacing ``h``."""
    if not h > 0:
        raise ValueError("grid spacing must be positive")
    width = 2.0 * model.radius
    counts = np.ceil(width / h - 1e-9).astype(int)
    counts = np.maximum(counts, 1)
    return counts, width / counts


def grid_centers(model: ErrorModel, h: float) -> np.ndarray:
    counts, cell = grid_cells(model, h)
    lo = model.center - model.radius
    axes = [lo[i] + (np.arange(counts[i]) + 0.5) * cell[i] for i in range(model.k)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def grid_map(h: float, model: ErrorModel, obs: Observation, forward: Forward, cfg: GridConfig | None = None):
    """Exhaustive slack-maximised scoring at every cell center."""
    cfg = cfg or GridConfig(h=h)
    counts, _ = grid_cells(model, h)
    total = int(np.prod(counts))
    if total > cfg.max_cells:
        raise GridTooLarge(f"grid of {total} cells exceeds the cap of {cfg.max_cells}")
    t0 = time.perf_counter()
    centers = grid_centers(model, h)
    fwd = CountingForward(forward)
    best, best_slack, best_x = -math.inf, float(model.slack_grid[0]), centers[0]
    for start in range(0, total, cfg.chunk):
        xs = centers[start : start + cfg.chunk]
        scores, slacks = score_sse(residual_sse(obs, fwd(xs)), obs.compared_dim, model)
        i = int(np.argmax(scores))
        if scores[i] > best:
            best, best_slack, best_x = float(scores[i]), float(slacks[i]), xs[i]
    return _result(best_x, best_slack, best, fwd.count, t0, diagnostics={"cells": counts.tolist()})


# --- ABC rejection ------------------------------------------------------------


def _rms_distance(sse: np.ndarray, m: int) -> np.ndarray:
    return np.sqrt(sse / m)


def abc_reject(cfg: RejectConfig, model: ErrorModel, obs: Observation, forward: Forward) -> InferenceResult:
    """Plain rejection ABC on the RMS residual of the observed prefix."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    fwd = CountingForward(forward)
    m = obs.compared_dim
    xs = model.sample_prior(rng, cfg.budget)
    sse = np.concatenate([residual_sse(obs, fwd(xs[i : i + cfg.chunk])) for i in range(0, cfg.budget, cfg.chunk)])
    scores, slacks = score_sse(sse, m, model)
    accepted = _rms_distance(sse, m) < cfg.tolerance
    flags = []
    if accepted.any():
        pool = np.flatnonzero(accepted)
    else:
        flags.append("no_acceptance")
        pool = np.arange(cfg.budget)
    i = pool[int(np.argmax(scores[pool]))]
    return _result(
        xs[i], slacks[i], scores[i], fwd.count, t0,
        samples=xs[accepted],
        weights=np.full(int(accepted.sum()), 1.0 / max(1, int(accepted.sum()))),
        flags=flags,
        diagnostics={"acceptance_rate": float(accepted.mean()), "accepted": int(accepted.sum())},
    )


# --- ABC-SMC ------------------------------------------------------------------


def _weighted_std(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    mean = w @ x
    return np.sqrt(np.maximum(w @ (x - mean) ** 2, 0.0))


MAX_EMPTY_ROUNDS = 1000


def abc_smc(cfg: SmcConfig, model: ErrorModel, obs: Observation, forward: Forward) -> InferenceResult:
    """Population Monte Carlo ABC over a fixed decreasing tolerance schedule.

    Generation one samples the prior.  Later generations resample the
    previous population by weight, perturb with a Gaussian kernel whose std is
    twice the weighted population std, and weight accepted particles by
    ``prior / sum_j w_j K(x | x_j)``.  Proposals outside the prior box are
    discarded before any forward call.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    fwd = CountingForward(forward)
    m = obs.compared_dim
    p = cfg.population
    flags: list[str] = []
    prev_x = prev_w = None
    pop_x = pop_w = pop_sse = None
    generations = 0
    restarts = 0

    gen = 0
    while gen < len(cfg.tolerances) and fwd.count < cfg.budget:
        tol = cfg.tolerances[gen]
        from_prior = prev_x is None
        if not from_prior:
            sigma = 2.0 * _weighted_std(prev_x, prev_w)
            sigma = np.where(sigma > 0, sigma, 1e-6 * model.radius)
        acc_x, acc_sse = [], []
        n_acc = 0
        empty_rounds = 0
        while n_acc < p and fwd.count < cfg.budget:
            n = min(p, cfg.budget - fwd.count)
            if from_prior:
                cand = model.sample_prior(rng, n)
            else:
                idx = rng.choice(len(prev_x), size=n, p=prev_w)
                cand = prev_x[idx] + sigma * rng.standard_normal((n, model.k))
                cand = cand[model.in_bounds(cand)]
                if len(cand) == 0:
                    # the kernel keeps landing outside the box; stop rather than spin
                    empty_rounds += 1
                    if empty_rounds >= MAX_EMPTY_ROUNDS:
                        break
                    continue
                empty_rounds = 0
            sse = residual_sse(obs, fwd(cand))
            ok = _rms_distance(sse, m) < tol
            acc_x.append(cand[ok])
            acc_sse.append(sse[ok])
            n_acc += int(ok.sum())
        if n_acc == 0:
            if fwd.count >= cfg.budget:
                flags.append("budget_exhausted")
                break
            if empty_rounds >= MAX_EMPTY_ROUNDS:
                flags.append("proposals_out_of_bounds")
                break
            continue
        xs = np.concatenate(acc_x)[:p]
        sse = np.concatenate(acc_sse)[:p]
        if from_prior:
            w = np.full(len(xs), 1.0 / len(xs))
        else:
            # prior density is constant inside the box, so it cancels on normalisation
            d = (xs[:, None, :] - prev_x[None, :, :]) / sigma
            kern = np.exp(-0.5 * np.sum(d * d, axis=2))
            denom = kern @ prev_w
            with np.errstate(divide="ignore"):
                w = np.where(denom > 0, 1.0 / denom, 0.0)
            total = w.sum()
            if not (total > 0 and math.isfinite(total)):
                flags.append("degenerate_restart")
                restarts += 1
                prev_x = prev_w = None
                gen = 0
                continue
            w = w / total
        pop_x, pop_w, pop_sse = xs, w, sse
        generations += 1
        if n_acc < p:
            flags.append("budget_exhausted" if fwd.count >= cfg.budget else "proposals_out_of_bounds")
            break
        prev_x, prev_w = xs, w
        gen += 1

    if pop_x is None:
        flags.append("no_population")
        x = model.center
        return _result(x, model.slack_grid[-1], -math.inf, fwd.count, t0, flags=flags)
    scores, slacks = score_sse(pop_sse, m, model)
    i = int(np.argmax(scores))
    return _result(
        pop_x[i], slacks[i], scores[i], fwd.count, t0,
        samples=pop_x, weights=pop_w, flags=flags,
        diagnostics={"generations": generations, "restarts": restarts},
    )


# --- Metropolis-Hastings --------------------------------------------------------


def mcmc_mh(cfg: MhConfig, model: ErrorModel, obs: Observation, forward: Forward) -> InferenceResult:
    """Random-walk Metropolis over (x, slack), slack moved on the log scale.

    Slack is continuous within the range of the slack grid (fixed when the
    grid has a single value).  Proposals outside the prior box or slack range
    are rejected without a forward call.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    fwd = CountingForward(forward)
    k = model.k
    step = np.broadcast_to(np.asarray(cfg.proposal_std, dtype=float), (k,))
    lo_s, hi_s = float(model.slack_grid[0]), float(model.slack_grid[-1])
    fixed_slack = model.slack_grid.size == 1
    lp_x = model.log_prior_x

    def log_target(x, slack):
        pred = fwd(x[None, :])[0]
        return lp_x + slack_log_prior(slack) + gaussian_loglik(obs, pred, slack)

    x = model.sample_prior(rng, 1)[0] if cfg.init is None else np.asarray(cfg.init, dtype=float)
    slack = lo_s if fixed_slack else math.sqrt(lo_s * hi_s)
    cur = log_target(x, slack)
    chain_x = np.empty((cfg.length, k))
    chain_s = np.empty(cfg.length)
    chain_lp = np.empty(cfg.length)
    accepted = 0
    for it in range(cfg.length):
        if it:
            prop_x = x + step * rng.standard_normal(k)
            log_jac = 0.0
            prop_s = slack
            if not fixed_slack:
                prop_s = slack * math.exp(cfg.log_slack_std * rng.standard_normal())
                # log-scale walk: target in slack space needs the |d slack / d log slack| term
                log_jac = math.log(prop_s) - math.log(slack)
            u = math.log(rng.random())
            if model.in_bounds(prop_x)[0] and lo_s <= prop_s <= hi_s:
                new = log_target(prop_x, prop_s)
                if u < new - cur + log_jac:
                    x, slack, cur = prop_x, prop_s, new
                    accepted += 1
        chain_x[it], chain_s[it], chain_lp[it] = x, slack, cur
    post = slice(cfg.burn_in, cfg.length)
    best = cfg.burn_in + int(np.argmax(chain_lp[post]))
    rate = accepted / max(1, cfg.length - 1)
    flags = ["zero_acceptance"] if accepted == 0 and cfg.length > 1 else []
    return _result(
        chain_x[best], chain_s[best], chain_lp[best], fwd.count, t0,
        samples=chain_x[post].copy(),
        flags=flags,
        diagnostics={"acceptance_rate": rate, "slack_chain_mean": float(chain_s[post].mean())},
    )


# --- particle filter ------------------------------------------------------------


def _systematic_resample(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(w)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(w)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions)


@dataclass
class PfRun:
    frames: list = field(default_factory=list)

    @property
    def final(self) -> InferenceResult:
        return self.frames[-1]

    @property
    def n_evals(self) -> int:
        return sum(r.n_evals for r in self.frames)


def particle_filter(cfg: PfConfig, model: ErrorModel, obs: Observation, forward: Forward, first_frame: int = 1) -> PfRun:
    """Bootstrap filter over a static (goal, slack) latent.

    Frames ``first_frame .. obs.n_observed`` are replayed one observed point at
    a time; each frame evaluates every particle once.  Slack values are drawn
    from the grid with weights ``exp(-slack)``.  After systematic resampling the
    goals get Gaussian jitter of ``jitter_fraction`` times the prior radius.
    """
    rng = np.random.default_rng(cfg.seed)
    fwd = CountingForward(forward)
    p, d = cfg.n_particles, obs.point_dim
    grid = model.slack_grid
    slack_p = np.exp(-grid)
    slack_p /= slack_p.sum()
    lo, hi = model.center - model.radius, model.center + model.radius

    def init():
        return model.sample_prior(rng, p), rng.choice(grid.size, size=p, p=slack_p)

    xs, sidx = init()
    logw = np.full(p, -math.log(p))
    run = PfRun()
    for n in range(first_frame, obs.n_observed + 1):
        t0 = time.perf_counter()
        before = fwd.count
        flags = []
        preds = fwd(xs)
        s = grid[sidx]
        lo_i = 0 if n == first_frame else (n - 1) * d
        seg = obs.values[lo_i : n * d] - preds[:, lo_i : n * d]
        m = n * d - lo_i
        inc = -0.5 * m * (math.log(2 * math.pi) + 2 * np.log(s)) - np.sum(seg * seg, axis=1) / (2 * s * s)
        logw = logw + inc
        top = np.max(logw)
        if not math.isfinite(top):
            flags.append("weight_collapse")
            xs, sidx = init()
            logw = np.full(p, -math.log(p))
            top = logw[0]
        w = np.exp(logw - top)
        w /= w.sum()
        logw = np.log(np.maximum(w, 1e-300))
        sub = obs.truncated(n)
        best = int(np.argmax(w))
        scores, slacks = score_sse(residual_sse(sub, preds[best : best + 1]), sub.compared_dim, model)
        ess = 1.0 / np.sum(w * w)
        frame = _result(
            xs[best], slacks[0], scores[0], fwd.count - before, t0,
            samples=xs.copy(), weights=w.copy(), flags=flags,
            diagnostics={"frame": n, "ess": float(ess)},
        )
        if ess < cfg.ess_fraction * p:
            idx = _systematic_resample(w, rng)
            xs = xs[idx] + cfg.jitter_fraction * model.radius * rng.standard_normal((p, model.k))
            xs = np.clip(xs, lo, hi)
            sidx = sidx[idx]
            logw = np.full(p, -math.log(p))
            frame.diagnostics["resampled"] = True
        frame.wall_time = time.perf_counter() - t0
        run.frames.append(frame)
    return run


def run_method(method: str, cfg, model: ErrorModel, obs: Observation, forward: Forward) -> InferenceResult:
    """Dispatch one baseline; the particle filter returns its last frame with
    cumulative evaluation count and time."""
    if method == "grid":
        return grid_map(cfg.h, model, obs, forward, cfg)
    if method == "abc_reject":
        return abc_reject(cfg, model, obs, forward)
    if method == "abc_smc":
        return abc_smc(cfg, model, obs, forward)
    if method == "mcmc_mh":
        return mcmc_mh(cfg, model, obs, forward)
    if method == "particle_filter":
        run = particle_filter(cfg, model, obs, forward)
        final = run.final
        final.n_evals = run.n_evals
        final.wall_time = sum(f.wall_time for f in run.frames)
        return final
    raise ValueError(f"unknown method {method!r}")
