"""Error model and posterior scoring shared by every inference method.

The observation is modelled as a Gaussian corruption of the (surrogate or raw)
simulator output with an isotropic standard deviation ``slack``.  The slack has
a Gamma(1, 1) prior and the latent goal a uniform prior over an axis-aligned
box.  All scores are natural-log densities.

A *forward handle* is any callable mapping an ``(N, k)`` array of latent points
to an ``(N, M)`` array of predicted observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Forward = Callable[[np.ndarray], np.ndarray]

LOG_2PI = math.log(2.0 * math.pi)


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


@dataclass(frozen=True)
class Observation:
    """A (possibly partial) flattened observation.

    ``n_observed`` counts valid leading points of ``point_dim`` values each;
    only ``values[:n_observed * point_dim]`` is ever compared.
    """

    values: np.ndarray
    point_dim: int = 3
    n_observed: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        object.__setattr__(self, "values", values)
        if self.point_dim < 1:
            raise ValueError("point_dim must be positive")
        n = self.n_observed
        if n is None:
            if values.size % self.point_dim:
                raise DimensionError(
                    f"observation length {values.size} is not a multiple of point_dim {self.point_dim}"
                )
            n = values.size // self.point_dim
            object.__setattr__(self, "n_observed", n)
        if not 1 <= n * self.point_dim <= values.size:
            raise DimensionError(f"n_observed={n} inconsistent with {values.size} values")
        if not np.all(np.isfinite(values[: self.compared_dim])):
            raise ValueError("observation contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.size

    @property
    def compared_dim(self) -> int:
        return self.n_observed * self.point_dim

    @property
    def prefix(self) -> np.ndarray:
        return self.values[: self.compared_dim]

    def truncated(self, n_observed: int) -> "Observation":
        return Observation(self.values, self.point_dim, n_observed)


def default_slack_grid() -> np.ndarray:
    return np.geomspace(0.01, 5.0, 16)


@dataclass(frozen=True)
class ErrorModel:
    """Slack grid plus the uniform latent prior box ``center +- radius``."""

    center: np.ndarray
    radius: np.ndarray
    slack_grid: np.ndarray = field(default_factory=default_slack_grid)

    def __post_init__(self):
        center = np.atleast_1d(np.asarray(self.center, dtype=float))
        radius = np.asarray(self.radius, dtype=float)
        if radius.ndim == 0:
            radius = np.full(center.shape, float(radius))
        grid = np.atleast_1d(np.asarray(self.slack_grid, dtype=float))
        if radius.shape != center.shape:
            raise DimensionError("center and radius must have the same shape")
        if np.any(radius <= 0):
            raise ValueError("prior radius must be positive in every dimension")
        if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
            raise ValueError("slack grid must be non-empty, positive and strictly increasing")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "radius", radius)
        object.__setattr__(self, "slack_grid", grid)

    @property
    def k(self) -> int:
        return self.center.size

    @property
    def log_prior_x(self) -> float:
        return -float(np.sum(np.log(2.0 * self.radius)))

    def in_bounds(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        return np.all(np.abs(xs - self.center) <= self.radius, axis=1)

    def sample_prior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo = self.center - self.radius
        return lo + 2.0 * self.radius * rng.random((n, self.k))


@dataclass
class InferenceResult:
    map_x: np.ndarray
    map_slack: float
    log_posterior: float
    n_evals: int
    wall_time: float
    leaves: list = field(default_factory=list)
    samples: np.ndarray | None = None
    weights: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map_x": [float(v) for v in np.atleast_1d(self.map_x)],
            "map_slack": float(self.map_slack),
            "log_posterior": float(self.log_posterior),
            "n_evals": int(self.n_evals),
            "wall_time_s": float(self.wall_time),
            "n_leaves": len(self.leaves),
            "flags": list(self.flags),
            "diagnostics": {k: _plain(v) for k, v in self.diagnostics.items()},
        }


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


class CountingForward:
    """Wrap a forward handle and count evaluated latent points."""

    def __init__(self, forward: Forward):
        self.forward = forward
        self.count = 0

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        self.count += xs.shape[0]
        return self.forward(xs)


def _check_slack(slack):
    if not np.all(np.asarray(slack) > 0) or not np.all(np.isfinite(slack)):
        raise ValueError("slack must be positive and finite")


def gaussian_loglik(obs: Observation, pred: np.ndarray, slack: float) -> float:
    """Isotropic Gaussian log-density of the observed prefix around ``pred``."""
    _check_slack(slack)
    pred = np.asarray(pred, dtype=float).ravel()
    m = obs.compared_dim
    if pred.size < m:
        raise DimensionError(f"prediction has {pred.size} values, need at least {m}")
    resid = obs.prefix - pred[:m]
    if not np.all(np.isfinite(resid)):
        raise ValueError("non-finite prediction")
    sse = float(resid @ resid)
    return -0.5 * m * (LOG_2PI + 2.0 * math.log(slack)) - sse / (2.0 * slack * slack)


def slack_log_prior(slack):
    """Gamma(1, 1) log-density; the normaliser is one."""
    s = np.asarray(slack, dtype=float)
    if np.any(s < 0):
        raise ValueError("slack must be non-negative")
    return -s if s.ndim else -float(s)


def joint_log_posterior(x, slack: float, obs: Observation, forward: Forward, model: ErrorModel) -> float:
    """Unnormalised log p(x) + log p(slack) + log p(obs | x, slack).

    Points outside the prior box score ``-inf`` without calling ``forward``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not model.in_bounds(x)[0]:
        return -math.inf
    pred = np.asarray(forward(x[None, :]))[0]
    return model.log_prior_x + slack_log_prior(slack) + gaussian_loglik(obs, pred, slack)


def residual_sse(obs: Observation, preds: np.ndarray) -> np.ndarray:
    """Squared residual norm over the observed prefix, one per prediction row."""
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    m = obs.compared_dim
    if preds.shape[1] < m:
        raise DimensionError(f"predictions have {preds.shape[1]} columns, need at least {m}")
    resid = preds[:, :m] - obs.prefix
    sse = np.einsum("ij,ij->i", resid, resid)
    if not np.all(np.isfinite(sse)):
        raise ValueError("non-finite prediction")
    return sse


def slack_table(sse: np.ndarray, m: int, model: ErrorModel) -> np.ndarray:
    """Joint log posterior for every (row, slack) pair given residual SSEs."""
    grid = model.slack_grid
    sse = np.atleast_1d(np.asarray(sse, dtype=float))
    const = model.log_prior_x - grid - 0.5 * m * (LOG_2PI + 2.0 * np.log(grid))
    return const[None, :] - sse[:, None] / (2.0 * grid * grid)[None, :]


def score_sse(sse: np.ndarray, m: int, model: ErrorModel) -> tuple[np.ndarray, np.ndarray]:
    table = slack_table(sse, m, model)
    # argmax returns the first maximum, i.e. the smaller slack on ties
    idx = np.argmax(table, axis=1)
    return table[np.arange(table.shape[0]), idx], model.slack_grid[idx]


def score_batch(xs: np.ndarray, obs: Observation, model: ErrorModel, forward: Forward):
    """Slack-maximised joint score for each row of ``xs`` with one forward call.

    Returns ``(best_log_posterior, best_slack, preds)``; out-of-bounds rows get
    ``-inf`` and are still passed through ``forward`` so that batch accounting
    stays simple.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    preds = np.atleast_2d(np.asarray(forward(xs), dtype=float))
    best, slack = score_sse(residual_sse(obs, preds), obs.compared_dim, model)
    inside = model.in_bounds(xs)
    best = np.where(inside, best, -np.inf)
    return best, slack, preds


def score_over_slack(x, obs: Observation, model: ErrorModel, forward: Forward) -> tuple[float, float]:
    """Best joint log posterior over the slack grid and the slack attaining it."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    best, slack, _ = score_batch(x[None, :], obs, model, forward)
    return float(best[0]), float(slack[0])


def infer_slack_map(obs: Observation, model: ErrorModel, forward: Forward, x_candidates: Sequence) -> float:
    """Slack of the highest-scoring (x, slack) pair over candidates x grid.

    This is a joint-MAP stand-in for the marginal mode of p(slack | obs).
    """
    xs = np.atleast_2d(np.asarray(x_candidates, dtype=float))
    if xs.size == 0:
        raise ValueError("need at least one candidate latent point")
    best, slack, _ = score_batch(xs, obs, model, forward)
    return float(slack[int(np.argmax(best))])
