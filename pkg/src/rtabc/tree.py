"""k-dimensional tree pyramid and the adaptive-discretisation posterior sampler.

Every node is a hypercube ``center +- radius``.  Expanding a node creates its
``2**k`` children of half the radius, one per orthant.  The sampler scores new
children at their centers and keeps expanding those above the likelihood
threshold until the resolution limit is reached.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .core import ErrorModel, Forward, InferenceResult, Observation, score_batch


class TreeError(ValueError):
    pass


@dataclass(eq=False)
class KdTpNode:
    center: np.ndarray
    radius: float
    depth: int = 0
    log_likelihood: float | None = None
    slack: float | None = None
    children: list["KdTpNode"] = field(default_factory=list)
    order: int = 0

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Half-open membership (``[lo, hi)`` on every axis)."""
        d = np.atleast_2d(pts) - self.center
        return np.all((d >= -self.radius) & (d < self.radius), axis=1)


def sign_patterns(k: int) -> np.ndarray:
    """All ``2**k`` sign vectors, lexicographic with + before -."""
    return np.array(list(itertools.product((1.0, -1.0), repeat=k)))


class KdTp:
    def __init__(self, k: int, center, radius: float):
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if center.size != k:
            raise TreeError(f"center has {center.size} coordinates, expected {k}")
        if not radius > 0:
            raise TreeError("radius must be positive")
        self.k = k
        self._signs = sign_patterns(k)
        self._counter = 0
        self.root = self._new_node(center, float(radius), 0)
        self._leaves: dict[int, KdTpNode] = {self.root.order: self.root}

    def _new_node(self, center, radius, depth) -> KdTpNode:
        node = KdTpNode(center=center, radius=radius, depth=depth, order=self._counter)
        self._counter += 1
        return node

    @property
    def n_nodes(self) -> int:
        return self._counter

    def leaves(self) -> list[KdTpNode]:
        """Current leaves in insertion order."""
        return list(self._leaves.values())

    def nodes(self) -> Iterable[KdTpNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def expand(self, node: KdTpNode) -> list[KdTpNode]:
        if not node.is_leaf:
            raise TreeError(f"node {node.order} already has children")
        half = node.radius / 2.0
        for delta in self._signs * half:
            node.children.append(self._new_node(node.center + delta, half, node.depth + 1))
        del self._leaves[node.order]
        for child in node.children:
            self._leaves[child.order] = child
        return node.children


def gen_candidate_expansions(tree: KdTp, expansion_set: Iterable[KdTpNode]) -> list[KdTpNode]:
    """Split every node of ``expansion_set`` and return all new children."""
    expansion_set = list(expansion_set)
    for node in expansion_set:
        if not node.is_leaf:
            raise TreeError(f"node {node.order} is not a leaf")
    out: list[KdTpNode] = []
    for node in expansion_set:
        out.extend(tree.expand(node))
    return out


@dataclass
class TpConfig:
    """Expansion settings.

    With ``relative=True`` (the default) a candidate expands when its score
    exceeds ``max_seen + tau``, so ``tau`` should be <= 0.  With
    ``relative=False`` the comparison is against ``tau`` directly.

    ``per_value=True`` multiplies ``tau`` by the number of compared values
    before use, so one setting suits any observed prefix length.  Because the
    slack is profiled out, a relative per-value threshold bounds the ratio of
    a node's residual RMS to the best one seen, roughly ``exp(-tau)``.
    """

    tau: float = -2.5
    rho: float = 0.01
    max_evals: int = 1_000_000
    relative: bool = True
    per_value: bool = True

    def validate(self, k: int):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.max_evals < 2**k + 1:
            raise ValueError(f"max_evals must be at least {2**k + 1}")


BatchScorer = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def build_tp(cfg: TpConfig, center, radius: float, scorer: BatchScorer) -> tuple[KdTp, dict]:
    """Run the expansion loop against an arbitrary batch scorer.

    ``scorer`` maps an ``(N, k)`` array of centers to ``(scores, slacks)``.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    k = center.size
    cfg.validate(k)
    tree = KdTp(k, center, radius)
    n_children = 2**k
    expansion = [tree.root]
    n_evals = 0
    rounds = 0
    max_seen = -math.inf
    exhausted = False
    while expansion:
        if n_evals + n_children * len(expansion) > cfg.max_evals:
            exhausted = True
            break
        candidates = gen_candidate_expansions(tree, expansion)
        rounds += 1
        centers = np.array([c.center for c in candidates])
        scores, slacks = scorer(centers)
        n_evals += len(candidates)
        for node, s, e in zip(candidates, scores, slacks):
            node.log_likelihood = float(s)
            node.slack = float(e)
        if len(scores):
            max_seen = max(max_seen, float(np.max(scores)))
        threshold = max_seen + cfg.tau if cfg.relative else cfg.tau
        expansion = [
            node for node, s in zip(candidates, scores) if s > threshold and node.radius > cfg.rho
        ]
    return tree, {"n_evals": n_evals, "rounds": rounds, "budget_exhausted": exhausted}


def compute_tp_posterior(
    cfg: TpConfig, model: ErrorModel, obs: Observation, forward: Forward
) -> tuple[KdTp, InferenceResult]:
    """Adaptive tree-pyramid approximation of the posterior over the prior box.

    Each round scores all new children over the whole slack grid with one
    forward call.  The MAP estimate is the center of the best leaf.
    """
    if np.ptp(model.radius) != 0:
        raise TreeError("tree pyramid needs a cubic prior box (equal radius on every axis)")

    def scorer(centers):
        best, slack, _ = score_batch(centers, obs, model, forward)
        return best, slack

    if cfg.per_value:
        cfg = replace(cfg, tau=cfg.tau * obs.compared_dim, per_value=False)
    t0 = time.perf_counter()
    tree, info = build_tp(cfg, model.center, float(model.radius[0]), scorer)
    center, score = map_estimate(tree)
    best_leaf = _best_leaf(tree)
    wall = time.perf_counter() - t0
    leaves = [(n.center.copy(), n.radius, n.log_likelihood) for n in tree.leaves()]
    flags = ["budget_exhausted"] if info["budget_exhausted"] else []
    result = InferenceResult(
        map_x=center,
        map_slack=best_leaf.slack,
        log_posterior=score,
        n_evals=info["n_evals"],
        wall_time=wall,
        leaves=leaves,
        flags=flags,
        diagnostics={"rounds": info["rounds"], "n_leaves": len(leaves)},
    )
    return tree, result


def _scored_leaves(tree: KdTp) -> list[KdTpNode]:
    leaves = tree.leaves()
    if any(n.log_likelihood is None for n in leaves):
        raise TreeError("tree has unscored leaves")
    return leaves


def _best_leaf(tree: KdTp) -> KdTpNode:
    leaves = _scored_leaves(tree)
    best = leaves[0]
    for node in leaves[1:]:
        if node.log_likelihood > best.log_likelihood:
            best = node
    return best


def map_estimate(tree: KdTp) -> tuple[np.ndarray, float]:
    """Center and score of the best leaf; ties go to the earliest inserted."""
    best = _best_leaf(tree)
    return best.center.copy(), best.log_likelihood


def leaf_density(tree: KdTp) -> list[tuple[np.ndarray, float, float]]:
    """Piecewise-constant posterior mass per leaf, normalised to one."""
    leaves = _scored_leaves(tree)
    ll = np.array([n.log_likelihood for n in leaves])
    logvol = tree.k * np.log(2.0 * np.array([n.radius for n in leaves]))
    logw = ll + logvol
    finite = np.isfinite(logw)
    if not finite.any():
        mass = np.full(len(leaves), 1.0 / len(leaves))
    else:
        w = np.where(finite, np.exp(logw - logw[finite].max()), 0.0)
        mass = w / w.sum()
    return [(n.center.copy(), n.radius, float(m)) for n, m in zip(leaves, mass)]


LEAF_HEADER = "# leaf dump: center[0..k-1] radius loglik mass"


def write_leaf_dump(tree: KdTp, path) -> None:
    """One leaf per line: ``center[k] radius loglik mass``."""
    masses = leaf_density(tree)
    with open(path, "w") as fh:
        fh.write(f"{LEAF_HEADER} (k={tree.k})\n")
        for node, (_, _, mass) in zip(tree.leaves(), masses):
            cols = [*node.center, node.radius, node.log_likelihood, mass]
            fh.write(" ".join(repr(float(v)) for v in cols) + "\n")


def read_leaf_dump(path) -> np.ndarray:
    """Rows of ``center[k] radius loglik mass`` as a float array."""
    return np.loadtxt(path, comments="#", ndmin=2)
