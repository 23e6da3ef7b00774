"""The standard reaching-intent problem: arm, controller, table and surrogate."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .core import ErrorModel, Observation, default_slack_grid
from .reach import N_SAMPLES, ArmModel, ControllerGains, TableBounds, raw_forward
from .surrogate import Mlp, load_weights

SURROGATE_FILE = "reach_surrogate.rtw"


@dataclass
class ReachProblem:
    arm: ArmModel = field(default_factory=ArmModel)
    gains: ControllerGains = field(default_factory=ControllerGains)
    bounds: TableBounds = field(default_factory=TableBounds)
    slack_grid: np.ndarray = field(default_factory=default_slack_grid)

    @property
    def model(self) -> ErrorModel:
        return ErrorModel(self.bounds.center, self.bounds.radius, self.slack_grid)

    def raw_forward(self):
        return raw_forward(self.arm, self.gains)


def packaged_surrogate_path() -> Path:
    return Path(str(resources.files("rtabc") / "data" / SURROGATE_FILE))


def load_surrogate(path=None) -> Mlp:
    return load_weights(path or packaged_surrogate_path())


def observed_count(fraction: float, total: int = N_SAMPLES) -> int:
    if not 0 < fraction <= 1:
        raise ValueError("observed fraction must be in (0, 1]")
    return max(1, int(round(fraction * total)))


def make_observation(trajectory, fraction: float = 1.0) -> Observation:
    """Flattened 90 x 3 trajectory, truncated to the observed fraction."""
    values = np.asarray(trajectory, dtype=float).ravel()
    total = values.size // 3
    return Observation(values, point_dim=3, n_observed=observed_count(fraction, total))
