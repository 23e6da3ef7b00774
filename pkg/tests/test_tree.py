import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rtabc.core import ErrorModel, Observation
from rtabc.tree import (
    KdTp,
    TpConfig,
    TreeError,
    build_tp,
    compute_tp_posterior,
    gen_candidate_expansions,
    leaf_density,
    map_estimate,
    read_leaf_dump,
    sign_patterns,
    write_leaf_dump,
)


def as_set(nodes):
    return {tuple(n.center.tolist()) for n in nodes}


def identity_forward(xs):
    return np.atleast_2d(xs).astype(float)


def check_tree(tree: KdTp, root_radius: float):
    """Full-tree property and exact radius halving over every node."""
    n_children = 2**tree.k
    for node in tree.nodes():
        assert len(node.children) in (0, n_children)
        assert node.radius == root_radius / 2**node.depth
        for child in node.children:
            assert child.depth == node.depth + 1
            delta = np.abs(child.center - node.center)
            assert np.all(delta == node.radius / 2)


def check_tiling(node, rng, n=10_000):
    lo = node.center - node.radius
    pts = lo + 2 * node.radius * rng.random((n, node.center.size))
    hits = np.zeros(n, dtype=int)
    for child in node.children:
        hits += child.contains(pts)
    assert np.all(hits == 1)


# --- candidate expansion -------------------------------------------------------


def test_children_k2_unit():
    tree = KdTp(2, [0.0, 0.0], 1.0)
    kids = gen_candidate_expansions(tree, [tree.root])
    assert [tuple(c.center) for c in kids] == [(0.5, 0.5), (0.5, -0.5), (-0.5, 0.5), (-0.5, -0.5)]
    assert all(c.radius == 0.5 for c in kids)


def test_children_k1():
    tree = KdTp(1, [0.0], 2.0)
    kids = gen_candidate_expansions(tree, [tree.root])
    assert as_set(kids) == {(1.0,), (-1.0,)}
    assert all(c.radius == 1.0 for c in kids)


def test_children_k3_tile_parent():
    tree = KdTp(3, [0.3, -1.0, 2.0], 0.7)
    kids = gen_candidate_expansions(tree, [tree.root])
    assert len(kids) == 8
    check_tiling(tree.root, np.random.default_rng(1))


def test_sign_order():
    assert sign_patterns(2).tolist() == [[1, 1], [1, -1], [-1, 1], [-1, -1]]


def test_expanding_non_leaf_fails():
    tree = KdTp(2, [0.0, 0.0], 1.0)
    gen_candidate_expansions(tree, [tree.root])
    with pytest.raises(TreeError):
        gen_candidate_expansions(tree, [tree.root])


def test_leaf_index_tracks_expansions():
    tree = KdTp(2, [0.0, 0.0], 1.0)
    kids = gen_candidate_expansions(tree, [tree.root])
    gen_candidate_expansions(tree, [kids[2]])
    assert len(tree.leaves()) == 3 + 4
    assert tree.n_nodes == 1 + 4 + 4
    assert kids[2] not in tree.leaves()


def test_config_validation():
    with pytest.raises(ValueError):
        TpConfig(rho=0).validate(2)
    with pytest.raises(ValueError):
        TpConfig(max_evals=4).validate(2)
    TpConfig(max_evals=5).validate(2)


# --- the expansion loop --------------------------------------------------------


def constant_scorer(value):
    def scorer(centers):
        return np.full(len(centers), value), np.ones(len(centers))

    return scorer


def test_constant_below_threshold_scores_root_children_only():
    cfg = TpConfig(tau=0.0, rho=0.01, relative=False, per_value=False)
    tree, info = build_tp(cfg, [0.0, 0.0], 1.0, constant_scorer(-5.0))
    assert info["n_evals"] == 4
    assert info["rounds"] == 1
    assert len(tree.leaves()) == 4


def nearest_peak_scorer(peak):
    """Indicator likelihood: in each sibling group, only the child whose box
    holds the peak (equivalently the nearest center) scores one."""
    peak = np.asarray(peak, dtype=float)

    def scorer(centers):
        d = np.max(np.abs(centers - peak), axis=1)
        s = np.zeros(len(centers))
        s[int(np.argmin(d))] = 1.0
        return s, np.ones(len(centers))

    return scorer


def test_point_peak_hand_simulation():
    peak = [0.3, -0.71]
    cfg = TpConfig(tau=0.5, rho=0.1, relative=False, per_value=False)
    tree, info = build_tp(cfg, [0.0, 0.0], 1.0, nearest_peak_scorer(peak))
    # hand simulation: radii 0.5, 0.25, 0.125 expand (> 0.1); 0.0625 stops
    assert info["rounds"] == 4
    assert info["n_evals"] == 16
    assert sorted({n.radius for n in tree.nodes()}) == [0.0625, 0.125, 0.25, 0.5, 1.0]
    center, score = map_estimate(tree)
    assert score == 1.0
    assert np.linalg.norm(center - peak) <= 0.0625 * math.sqrt(2)
    check_tree(tree, 1.0)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 3),
    st.lists(st.floats(-0.999, 0.999), min_size=3, max_size=3),
    st.integers(2, 6),
)
def test_budget_dominance_single_peak(k, peak, depth):
    rho = 1.0 / 2**depth + 1e-3
    cfg = TpConfig(tau=0.5, rho=rho, relative=False, per_value=False)
    _, info = build_tp(cfg, np.zeros(k), 1.0, nearest_peak_scorer(peak[:k]))
    assert info["n_evals"] <= 2**k * math.ceil(math.log2(1.0 / rho)) + 2**k


def test_budget_cap_flags_exhaustion():
    cfg = TpConfig(tau=-1e9, rho=1e-6, max_evals=100, relative=False, per_value=False)
    tree, info = build_tp(cfg, [0.0, 0.0], 1.0, constant_scorer(0.0))
    assert info["budget_exhausted"]
    assert info["n_evals"] <= 100


def test_termination_depth_bound():
    rho = 0.03
    cfg = TpConfig(tau=-1e9, rho=rho, relative=False, per_value=False)
    tree, _ = build_tp(cfg, [0.0], 1.0, constant_scorer(0.0))
    assert max(n.depth for n in tree.nodes()) <= math.ceil(math.log2(1.0 / rho))
    check_tree(tree, 1.0)


def gaussian_problem(x_star, k=2):
    # wide enough that a node's children stay inside the relative threshold
    # window even when the parent center sits on the peak
    model = ErrorModel(np.zeros(k), 1.0, np.array([0.3]))
    return model, Observation(np.asarray(x_star, dtype=float), 1)


def grid_argmax(x_star, rho, k=2):
    """Exhaustive grid of width-rho cells over [-1, 1]^k; the identity forward
    makes the best cell the one nearest to ``x_star``."""
    n = int(round(2.0 / rho))
    axis = -1.0 + rho * (np.arange(n) + 0.5)
    mesh = np.stack(np.meshgrid(*[axis] * k, indexing="ij"), axis=-1).reshape(-1, k)
    d = np.sum((mesh - np.asarray(x_star)) ** 2, axis=1)
    return mesh[int(np.argmin(d))]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-0.99, 0.99), min_size=2, max_size=2), st.integers(3, 6))
def test_gaussian_map_matches_grid_oracle(x_star, depth):
    rho = 2.0 ** -depth
    # a point on a cell boundary has tied argmaxes; the property needs a unique one
    frac = (np.asarray(x_star) + 1.0) / rho % 1.0
    assume(np.all(np.minimum(frac, 1.0 - frac) > 1e-6))
    model, obs = gaussian_problem(x_star)
    _, res = compute_tp_posterior(TpConfig(rho=rho), model, obs, identity_forward)
    g = grid_argmax(x_star, rho)
    assert np.linalg.norm(res.map_x - g) <= rho * math.sqrt(2) + 1e-12


def test_gaussian_map_spec_defaults():
    model, obs = gaussian_problem([0.123, -0.456])
    tree, res = compute_tp_posterior(TpConfig(), model, obs, identity_forward)
    assert res.n_evals == sum(1 for n in tree.nodes()) - 1
    assert res.leaves and len(res.leaves) == len(tree.leaves())
    assert np.linalg.norm(res.map_x - [0.123, -0.456]) < 0.01 * math.sqrt(2)


def test_per_value_scales_threshold():
    model, obs = gaussian_problem([0.4, 0.4])
    a = compute_tp_posterior(TpConfig(tau=-2.0, per_value=True), model, obs, identity_forward)[1]
    b = compute_tp_posterior(TpConfig(tau=-2.0 * obs.compared_dim, per_value=False), model, obs, identity_forward)[1]
    assert a.n_evals == b.n_evals
    assert np.array_equal(a.map_x, b.map_x)


def test_non_cubic_prior_rejected():
    model = ErrorModel(np.zeros(2), np.array([1.0, 2.0]))
    with pytest.raises(TreeError):
        compute_tp_posterior(TpConfig(), model, Observation([0.0, 0.0], 1), identity_forward)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_invariants_on_random_runs(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    x_star = rng.uniform(-1, 1, k)
    model = ErrorModel(np.zeros(k), 1.0, np.geomspace(0.01, 1.0, 4))
    obs = Observation(x_star + 0.05 * rng.standard_normal(k), 1)
    cfg = TpConfig(tau=-3.0, rho=float(rng.uniform(0.02, 0.2)))
    tree, res = compute_tp_posterior(cfg, model, obs, identity_forward)
    check_tree(tree, 1.0)
    for node in tree.nodes():
        if node.children:
            check_tiling(node, rng, n=200)
    tree2, res2 = compute_tp_posterior(cfg, model, obs, identity_forward)
    assert np.array_equal(res.map_x, res2.map_x)
    assert [n.center.tolist() for n in tree.leaves()] == [n.center.tolist() for n in tree2.leaves()]


# --- density and MAP --------------------------------------------------------------


def scored_tree(scores):
    tree = KdTp(1, [0.0], 1.0)
    if scores is None:
        tree.root.log_likelihood = 0.0
        return tree
    for node, s in zip(gen_candidate_expansions(tree, [tree.root]), scores):
        node.log_likelihood = s
    return tree


def test_density_single_leaf():
    (_, _, mass), = leaf_density(scored_tree(None))
    assert mass == 1.0


def test_density_uniform_k2():
    tree = KdTp(2, [0.0, 0.0], 1.0)
    for n in gen_candidate_expansions(tree, [tree.root]):
        n.log_likelihood = -2.0
    assert [m for _, _, m in leaf_density(tree)] == [0.25] * 4


def test_density_softmax_pair():
    masses = [m for _, _, m in leaf_density(scored_tree([math.log(3.0), 0.0]))]
    assert masses == pytest.approx([0.75, 0.25], abs=1e-12)


def test_density_weights_volume():
    tree = KdTp(1, [0.0], 1.0)
    a, b = gen_candidate_expansions(tree, [tree.root])
    a.log_likelihood = 0.0
    c, d = gen_candidate_expansions(tree, [b])
    c.log_likelihood = d.log_likelihood = 0.0
    masses = [m for _, _, m in leaf_density(tree)]
    assert masses == pytest.approx([0.5, 0.25, 0.25])


def test_density_unscored_leaf():
    tree = KdTp(1, [0.0], 1.0)
    gen_candidate_expansions(tree, [tree.root])
    with pytest.raises(TreeError):
        leaf_density(tree)
    with pytest.raises(TreeError):
        map_estimate(tree)


def test_map_one_leaf():
    center, _ = map_estimate(scored_tree(None))
    assert center.tolist() == [0.0]


def test_map_peak_in_ne_quadrant():
    tree = KdTp(2, [0.0, 0.0], 1.0)
    for n in gen_candidate_expansions(tree, [tree.root]):
        n.log_likelihood = -float(np.sum((n.center - [0.6, 0.4]) ** 2))
    assert map_estimate(tree)[0].tolist() == [0.5, 0.5]


def test_map_ties_first_inserted():
    tree = KdTp(2, [0.0, 0.0], 1.0)
    for n in gen_candidate_expansions(tree, [tree.root]):
        n.log_likelihood = 1.0
    assert map_estimate(tree)[0].tolist() == [0.5, 0.5]


def test_leaf_dump_round_trip(tmp_path):
    model, obs = gaussian_problem([0.2, 0.1])
    tree, _ = compute_tp_posterior(TpConfig(rho=0.1), model, obs, identity_forward)
    path = tmp_path / "leaves.txt"
    write_leaf_dump(tree, path)
    rows = read_leaf_dump(path)
    assert path.read_text().startswith("# leaf dump: center[0..k-1] radius loglik mass")
    assert rows.shape == (len(tree.leaves()), 2 + 3)
    assert rows[:, -1].sum() == pytest.approx(1.0)
    assert rows[:, :2].tolist() == [n.center.tolist() for n in tree.leaves()]
