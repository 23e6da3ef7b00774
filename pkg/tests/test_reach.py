import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtabc.reach import (
    DT,
    N_SAMPLES,
    ArmModel,
    ControllerGains,
    ControllerState,
    DatasetParseError,
    EmptyDatasetError,
    TableBounds,
    UnreachableGoalError,
    controller_step,
    dataset_header,
    forward_kinematics,
    generate_dataset,
    jacobian,
    pseudo_inverse,
    read_dataset,
    simulate_batch,
    simulate_trajectory,
    write_dataset,
)

PLANAR2 = ArmModel(link_lengths=(1.0, 1.0), lift=False, theta_init=(0.0, 0.5))


def homogeneous_chain(arm: ArmModel, theta):
    """Independent oracle: product of 4x4 link transforms."""

    def rot_z(a):
        c, s = math.cos(a), math.sin(a)
        m = np.eye(4)
        m[:2, :2] = [[c, -s], [s, c]]
        return m

    def trans(x=0.0, y=0.0, z=0.0):
        m = np.eye(4)
        m[:3, 3] = [x, y, z]
        return m

    t = trans(*arm.base)
    if arm.lift:
        t = t @ trans(z=theta[-1])
    for a, length in zip(theta, arm.link_lengths):
        t = t @ rot_z(a) @ trans(x=length)
    return t[:3, 3]


# --- kinematics ------------------------------------------------------------------


def test_fk_straight_chain():
    assert forward_kinematics(PLANAR2, [0.0, 0.0]).tolist() == [2.0, 0.0, 0.0]


def test_fk_rotated_chain():
    assert forward_kinematics(PLANAR2, [math.pi / 2, 0.0]) == pytest.approx([0.0, 2.0, 0.0], abs=1e-15)


@settings(max_examples=50)
@given(st.lists(st.floats(-math.pi, math.pi), min_size=4, max_size=4))
def test_fk_matches_matrix_chain(theta):
    arm = ArmModel()
    theta[-1] = theta[-1] / math.pi  # lift within its limits
    assert np.max(np.abs(forward_kinematics(arm, theta) - homogeneous_chain(arm, theta))) < 1e-12


def test_fk_batch_and_dimension_check():
    arm = ArmModel()
    thetas = np.random.default_rng(0).uniform(-1, 1, (5, 4))
    batch = forward_kinematics(arm, thetas)
    for t, row in zip(thetas, batch):
        assert np.array_equal(forward_kinematics(arm, t), row)
    with pytest.raises(ValueError):
        forward_kinematics(arm, [0.0, 0.0])


def fd_jacobian(arm, theta, step=1e-6):
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        cols.append((forward_kinematics(arm, theta + e) - forward_kinematics(arm, theta - e)) / (2 * step))
    return np.column_stack(cols)


def test_jacobian_planar_zero_pose():
    jac = jacobian(PLANAR2, [0.0, 0.0])
    assert jac[1].tolist() == [2.0, 1.0]
    assert np.max(np.abs(jac - fd_jacobian(PLANAR2, [0.0, 0.0]))) < 1e-6


@settings(max_examples=30)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_jacobian_matches_finite_differences(theta):
    arm = ArmModel()
    theta[-1] /= 3
    jac = jacobian(arm, theta)
    assert np.max(np.abs(jac - fd_jacobian(arm, theta))) < 1e-6
    assert np.array_equal(jac @ np.zeros(4), np.zeros(3))
    # column norms bounded by the distal chain length
    lengths = np.asarray(arm.link_lengths)
    for j in range(3):
        assert np.linalg.norm(jac[:, j]) <= lengths[j:].sum() + 1e-12
    assert np.linalg.norm(jac[:, 3]) == 1.0


def test_pinv_identity():
    assert np.allclose(pseudo_inverse(np.eye(3), 0.0), np.eye(3), atol=0)


def test_pinv_moore_penrose():
    rng = np.random.default_rng(3)
    for _ in range(20):
        jac = rng.normal(size=(3, 5))
        assert np.max(np.abs(jac @ pseudo_inverse(jac, 0.0) @ jac - jac)) < 1e-10


def test_pinv_damping_shrinks():
    jac = np.random.default_rng(4).normal(size=(3, 4))
    norms = [np.linalg.norm(pseudo_inverse(jac, lam)) for lam in (0.0, 0.1, 1.0, 10.0, 100.0)]
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-3
    with pytest.raises(ValueError):
        pseudo_inverse(jac, -1.0)


@settings(max_examples=30)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_nullspace_projector_is_invisible_to_task(theta):
    arm = ArmModel()
    theta[-1] /= 3
    jac = jacobian(arm, theta)
    if np.linalg.svd(jac, compute_uv=False)[-1] < 1e-3:
        return  # near-singular pose
    proj = np.eye(4) - pseudo_inverse(jac, 0.0) @ jac
    assert np.linalg.norm(jac @ proj) < 1e-8 * np.linalg.norm(jac)


# --- controller --------------------------------------------------------------------


def test_fixed_point_at_goal():
    arm = ArmModel()
    theta = np.asarray(arm.theta_sec)
    goal = forward_kinematics(arm, theta)
    state = ControllerState(theta=theta.copy(), integral=np.zeros(3))
    new, xdot = controller_step(arm, ControllerGains(), state, goal)
    assert np.array_equal(new.theta, theta)
    assert np.array_equal(xdot, np.zeros(3))


@settings(max_examples=30)
@given(st.floats(-1.9, 1.9), st.floats(-1.9, 1.9))
def test_p_control_step_reduces_error(gx, gy):
    arm = ArmModel()
    gains = ControllerGains(kp=1.0, ki=0.0, kd=0.0, k_null=0.0)
    theta = np.asarray(arm.theta_init)
    goal = arm.lift_goal([gx, gy])
    before = np.linalg.norm(goal - forward_kinematics(arm, theta))
    new, _ = controller_step(arm, gains, ControllerState(theta=theta, integral=np.zeros(3)), goal, dt=0.005)
    after = np.linalg.norm(goal - forward_kinematics(arm, new.theta))
    assert after < before


def test_obstacle_at_hand_is_flagged_and_skipped():
    arm = ArmModel()
    theta = np.asarray(arm.theta_init)
    hand = forward_kinematics(arm, theta)
    gains = ControllerGains(kp=0.0, ki=0.0, kd=0.0, k_null=0.0, k_rep=1.0, obstacles=(tuple(hand),))
    new, xdot = controller_step(arm, gains, ControllerState(theta=theta, integral=np.zeros(3)), hand)
    assert "obstacle_at_hand" in new.flags
    assert np.array_equal(xdot, np.zeros(3))


@pytest.mark.parametrize("mode,power", [("inverse_square", 3), ("linear", 0)])
def test_repulsion_forms(mode, power):
    arm = ArmModel()
    theta = np.asarray(arm.theta_init)
    hand = forward_kinematics(arm, theta)
    obj = hand + np.array([0.3, -0.4, 0.0])
    gains = ControllerGains(kp=0.0, ki=0.0, kd=0.0, k_null=0.0, k_rep=0.01, obstacles=(tuple(obj),), repulsion=mode)
    _, xdot = controller_step(arm, gains, ControllerState(theta=theta, integral=np.zeros(3)), hand)
    d = hand - obj
    assert xdot == pytest.approx(0.01 * d / np.linalg.norm(d) ** power, abs=1e-15)


def test_bad_gains_and_dt():
    with pytest.raises(ValueError):
        ControllerGains(kp=-1.0)
    with pytest.raises(ValueError):
        ControllerGains(repulsion="spring")
    arm = ArmModel()
    state = ControllerState(theta=np.asarray(arm.theta_init), integral=np.zeros(3))
    with pytest.raises(ValueError):
        controller_step(arm, ControllerGains(), state, np.zeros(3), dt=0.0)


def test_arm_validation():
    with pytest.raises(ValueError):
        ArmModel(link_lengths=(1.0,), lift=False)
    with pytest.raises(ValueError):
        ArmModel(link_lengths=(1.0, -1.0))
    with pytest.raises(ValueError):
        ArmModel(joint_limits=((1.0, 0.0),) * 4)


# --- rollouts --------------------------------------------------------------------


def test_goal_at_start_gives_constant_trajectory():
    arm = ArmModel(theta_init=(0.0, 2.4, 2.0, 0.0))
    start = forward_kinematics(arm, arm.theta_init)
    traj = simulate_trajectory(arm, ControllerGains(), start[:2])
    assert traj.samples.shape == (N_SAMPLES, 3)
    assert np.all(traj.samples == traj.samples[0])
    assert traj.converged_step == 0


@settings(max_examples=15, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_reachable_goal_converges(gx, gy):
    arm = ArmModel()
    traj = simulate_trajectory(arm, ControllerGains(), [gx, gy])
    assert np.linalg.norm(traj.samples[-1] - arm.lift_goal([gx, gy])) < 0.01


def test_speed_cap_and_hold():
    arm, gains = ArmModel(), ControllerGains()
    goals = TableBounds().sample(np.random.default_rng(5), 200)
    samples, conv = simulate_batch(arm, gains, goals)
    start = forward_kinematics(arm, arm.theta_init)
    path = np.concatenate([np.tile(start, (200, 1, 1)), samples], axis=1)
    steps = np.linalg.norm(np.diff(path, axis=1), axis=2)
    assert steps.max() <= gains.v_max * DT + 1e-12
    for traj, c in zip(samples, conv):
        if c >= 0:
            assert np.all(traj[c:] == traj[c])


def test_seeded_noise_is_deterministic():
    arm, gains = ArmModel(), ControllerGains()
    a = simulate_trajectory(arm, gains, [0.5, -1.0], noise_std=0.01, seed=9)
    b = simulate_trajectory(arm, gains, [0.5, -1.0], noise_std=0.01, seed=9)
    c = simulate_trajectory(arm, gains, [0.5, -1.0], noise_std=0.01, seed=10)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    clean = simulate_trajectory(arm, gains, [0.5, -1.0])
    assert 0.005 < np.std(a.samples - clean.samples) < 0.015


def test_unreachable_goal():
    with pytest.raises(UnreachableGoalError):
        simulate_trajectory(ArmModel(), ControllerGains(), [5.0, 0.0])


# --- datasets -------------------------------------------------------------------------


def test_single_record_round_trip(tmp_path):
    arm, gains = ArmModel(), ControllerGains()
    path = tmp_path / "one.txt"
    data = generate_dataset(arm, gains, 1, TableBounds(), seed=3, path=path)
    back = read_dataset(path)
    assert len(back) == 1
    assert np.array_equal(back.inputs, data.inputs) and np.array_equal(back.targets, data.targets)
    traj = simulate_trajectory(arm, gains, back.inputs[0])
    assert np.array_equal(traj.flat, back.targets[0])
    meta = back.meta
    assert meta["seed"] == "3" and meta["n"] == "1" and meta["format_version"] == "1"
    assert "np.float64" not in (tmp_path / "one.txt.meta").read_text()
    assert path.read_text().splitlines()[0] == dataset_header()
    assert len(dataset_header().split()) == 1 + 2 + 270


def test_full_size_dataset_has_no_unreachable_abort():
    data = generate_dataset(ArmModel(), ControllerGains(), 10_000, TableBounds(), seed=1)
    assert data.inputs.shape == (10_000, 2) and data.targets.shape == (10_000, 270)
    assert np.all(np.abs(data.inputs) <= 2.0)


def test_seeds_change_goals():
    a = generate_dataset(ArmModel(), ControllerGains(), 5, TableBounds(), seed=1)
    b = generate_dataset(ArmModel(), ControllerGains(), 5, TableBounds(), seed=2)
    assert not np.array_equal(a.inputs, b.inputs)


def test_unreachable_bounds_abort():
    with pytest.raises(UnreachableGoalError):
        generate_dataset(ArmModel(), ControllerGains(), 10, TableBounds(5, 9, 5, 9), seed=0)


def test_parse_errors(tmp_path):
    data = generate_dataset(ArmModel(), ControllerGains(), 2, TableBounds(), seed=0)
    path = tmp_path / "d.txt"
    write_dataset(data, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:2] + [lines[2] + " 1.0"]) + "\n")
    with pytest.raises(DatasetParseError) as info:
        read_dataset(path)
    assert info.value.line == 3
    path.write_text("\n".join(lines[:2] + [lines[2].replace(lines[2].split()[5], "abc", 1)]) + "\n")
    with pytest.raises(DatasetParseError):
        read_dataset(path)
    path.write_text(lines[0] + "\n")
    with pytest.raises(EmptyDatasetError):
        read_dataset(path)
