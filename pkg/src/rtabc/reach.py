"""Kinematic reaching simulator.

A planar chain of revolute joints about the vertical axis, optionally topped
by a prismatic lift along z, is driven toward a goal on the table plane by a
task-space PID + force-field controller.  Joint velocities come from a damped
Jacobian pseudo-inverse, with a secondary posture objective projected through
``I - J^+ J``.  Each rollout yields 90 hand positions at 30 Hz.

All kinematic functions accept a single configuration ``(J,)`` or a batch
``(B, J)``; batches are simulated in lock-step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

N_SAMPLES = 90
RATE_HZ = 30.0
DT = 1.0 / RATE_HZ
DATASET_VERSION = 1


class UnreachableGoalError(ValueError):
    pass


class SimulationDiverged(FloatingPointError):
    pass


@dataclass
class ArmModel:
    link_lengths: tuple = (1.4, 1.0, 0.8)
    lift: bool = True
    joint_limits: tuple | None = None
    base: tuple = (0.0, 0.0, 0.0)
    theta_sec: tuple | None = None
    theta_init: tuple | None = None
    table_height: float = 0.0

    def __post_init__(self):
        self.link_lengths = tuple(float(v) for v in self.link_lengths)
        if len(self.link_lengths) < 1 or any(v <= 0 for v in self.link_lengths):
            raise ValueError("link lengths must be positive")
        n = self.n_joints
        if n < 2:
            raise ValueError("arm needs at least two joints")
        if self.joint_limits is None:
            lims = [(-2 * math.pi, 2 * math.pi)] * len(self.link_lengths)
            if self.lift:
                lims.append((-1.0, 1.0))
            self.joint_limits = tuple(lims)
        lims = np.asarray(self.joint_limits, dtype=float)
        if lims.shape != (n, 2) or np.any(lims[:, 0] >= lims[:, 1]):
            raise ValueError("joint limits must be (lo, hi) pairs with lo < hi")
        self.joint_limits = tuple(tuple(float(v) for v in row) for row in lims)
        if self.theta_init is None:
            init = [0.0, 2.4, 2.0, 0.3][:n] if n <= 4 else [0.0] * n
            if len(init) < n:
                init += [0.0] * (n - len(init))
            self.theta_init = tuple(init)
        if self.theta_sec is None:
            self.theta_sec = tuple(self.theta_init)
        if len(self.theta_init) != n or len(self.theta_sec) != n:
            raise ValueError("theta_init/theta_sec length must equal the joint count")

    @property
    def n_joints(self) -> int:
        return len(self.link_lengths) + int(self.lift)

    @property
    def limits(self) -> np.ndarray:
        return np.asarray(self.joint_limits)

    @property
    def reach(self) -> tuple[float, float]:
        """Inner and outer radius of the planar workspace annulus."""
        lengths = np.asarray(self.link_lengths)
        outer = float(lengths.sum())
        inner = max(0.0, float(2 * lengths.max() - outer))
        return inner, outer

    def lift_goal(self, goal_xy) -> np.ndarray:
        """Table-plane goal(s) to 3-D points at table height."""
        g = np.atleast_2d(np.asarray(goal_xy, dtype=float))
        out = np.column_stack([g[:, :2], np.full(g.shape[0], self.table_height)])
        return out if np.ndim(goal_xy) > 1 else out[0]

    def is_reachable(self, goal_xy, margin: float = 0.05) -> np.ndarray:
        g = np.atleast_2d(np.asarray(goal_xy, dtype=float))
        r = np.hypot(g[:, 0] - self.base[0], g[:, 1] - self.base[1])
        inner, outer = self.reach
        ok = (r >= inner + margin) & (r <= outer - margin)
        if self.lift:
            dz = self.table_height - self.base[2]
            lo, hi = self.joint_limits[-1]
            ok &= lo <= dz <= hi
        else:
            ok &= abs(self.table_height - self.base[2]) < 1e-9
        return ok


@dataclass
class ControllerGains:
    kp: float = 4.0
    ki: float = 0.1
    kd: float = 0.05
    k_rep: float = 0.0
    k_null: float = 1.0
    obstacles: tuple = ()
    repulsion: str = "inverse_square"
    v_max: float = 2.0
    damping: float = 1e-3
    tol: float = 0.005

    def __post_init__(self):
        for name in ("kp", "ki", "kd", "k_rep", "k_null", "damping"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"gain {name} must be finite and non-negative")
        if self.repulsion not in ("inverse_square", "linear"):
            raise ValueError("repulsion must be 'inverse_square' or 'linear'")
        if self.v_max <= 0 or self.tol <= 0:
            raise ValueError("v_max and tol must be positive")


def _chain(arm: ArmModel, theta: np.ndarray):
    """Hand position and revolute joint positions for a batch of configs."""
    theta = np.atleast_2d(theta)
    n_rev = len(arm.link_lengths)
    angles = np.cumsum(theta[:, :n_rev], axis=1)
    lengths = np.asarray(arm.link_lengths)
    steps_x = lengths * np.cos(angles)
    steps_y = lengths * np.sin(angles)
    b = theta.shape[0]
    joints = np.zeros((b, n_rev + 1, 3))
    joints[:, :, 0] = arm.base[0]
    joints[:, :, 1] = arm.base[1]
    joints[:, 1:, 0] += np.cumsum(steps_x, axis=1)
    joints[:, 1:, 1] += np.cumsum(steps_y, axis=1)
    joints[:, :, 2] = arm.base[2] + (theta[:, -1:] if arm.lift else 0.0)
    return joints[:, -1], joints[:, :-1]


def forward_kinematics(arm: ArmModel, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != arm.n_joints:
        raise ValueError(f"expected {arm.n_joints} joint values, got {theta.shape[-1]}")
    hand, _ = _chain(arm, theta)
    return hand if theta.ndim > 1 else hand[0]


def jacobian(arm: ArmModel, theta) -> np.ndarray:
    """Positional geometric Jacobian, shape ``(3, J)`` or ``(B, 3, J)``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != arm.n_joints:
        raise ValueError(f"expected {arm.n_joints} joint values, got {theta.shape[-1]}")
    hand, joints = _chain(arm, theta)
    d = hand[:, None, :] - joints
    jac = np.zeros((hand.shape[0], 3, arm.n_joints))
    # z x (p - p_i) = (-dy, dx, 0)
    jac[:, 0, : d.shape[1]] = -d[:, :, 1]
    jac[:, 1, : d.shape[1]] = d[:, :, 0]
    if arm.lift:
        jac[:, 2, -1] = 1.0
    return jac if theta.ndim > 1 else jac[0]


def pseudo_inverse(jac, damping: float = 1e-3) -> np.ndarray:
    """Damped least-squares inverse ``J^T (J J^T + damping^2 I)^-1``."""
    jac = np.asarray(jac, dtype=float)
    if damping < 0:
        raise ValueError("damping must be non-negative")
    jjt = jac @ np.swapaxes(jac, -1, -2)
    rows = jac.shape[-2]
    a = jjt + (damping**2) * np.eye(rows)
    return np.swapaxes(np.linalg.solve(a, jac), -1, -2)


@dataclass
class ControllerState:
    theta: np.ndarray
    integral: np.ndarray
    prev_error: np.ndarray | None = None
    flags: list = field(default_factory=list)


def _repulsion(hand, gains: ControllerGains, flags):
    force = np.zeros_like(hand)
    if gains.k_rep == 0 or not gains.obstacles:
        return force
    for obj in np.atleast_2d(np.asarray(gains.obstacles, dtype=float)):
        d = hand - obj
        dist = np.linalg.norm(d, axis=-1, keepdims=True)
        near = dist[..., 0] < 1e-6
        if np.any(near):
            flags.append("obstacle_at_hand")
        if gains.repulsion == "linear":
            term = d * gains.k_rep
        else:
            term = d * gains.k_rep / np.maximum(dist, 1e-6) ** 3
        force += np.where(near[..., None], 0.0, term)
    return force


def controller_step(arm: ArmModel, gains: ControllerGains, state: ControllerState, goal, dt: float = DT):
    """Advance one explicit-Euler step; returns ``(new_state, hand_velocity)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    theta = np.atleast_2d(state.theta)
    goal = np.atleast_2d(np.asarray(goal, dtype=float))
    hand = forward_kinematics(arm, theta)
    err = goal - hand
    integral = np.atleast_2d(state.integral) + err * dt
    prev = err if state.prev_error is None else np.atleast_2d(state.prev_error)
    flags = list(state.flags)
    xdot = gains.kp * err + gains.ki * integral + gains.kd * (err - prev) / dt
    xdot = xdot + _repulsion(hand, gains, flags)
    speed = np.linalg.norm(xdot, axis=1, keepdims=True)
    xdot = xdot * np.minimum(1.0, gains.v_max / np.maximum(speed, 1e-300))

    jac = jacobian(arm, theta)
    jpinv = pseudo_inverse(jac, gains.damping)
    null = np.eye(arm.n_joints) - jpinv @ jac
    posture = (np.asarray(arm.theta_sec) - theta) * gains.k_null
    thetadot = np.einsum("bij,bj->bi", jpinv, xdot) + np.einsum("bij,bj->bi", null, posture)
    step = thetadot * dt
    lims = arm.limits
    new_theta = np.clip(theta + step, lims[:, 0], lims[:, 1])

    # keep the realised hand displacement under the speed cap
    cap = gains.v_max * dt
    for _ in range(4):
        moved = np.linalg.norm(forward_kinematics(arm, new_theta) - hand, axis=1)
        over = moved > cap
        if not np.any(over):
            break
        scale = np.where(over, 0.98 * cap / np.maximum(moved, 1e-300), 1.0)[:, None]
        new_theta = np.clip(theta + (new_theta - theta) * scale, lims[:, 0], lims[:, 1])

    if not np.all(np.isfinite(new_theta)):
        raise SimulationDiverged("controller produced non-finite joint values")
    single = np.ndim(state.theta) == 1
    new_state = ControllerState(
        theta=new_theta[0] if single else new_theta,
        integral=integral[0] if single else integral,
        prev_error=err[0] if single else err,
        flags=flags,
    )
    return new_state, (xdot[0] if single else xdot)


@dataclass
class Trajectory:
    samples: np.ndarray
    goal: np.ndarray
    converged_step: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1)


def simulate_batch(
    arm: ArmModel,
    gains: ControllerGains,
    goals_xy,
    theta0=None,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Roll out many goals in lock-step.

    Returns ``(samples, converged_step)`` with samples of shape ``(B, 90, 3)``;
    ``converged_step`` is -1 for rollouts that never met the tolerance.
    """
    goals_xy = np.atleast_2d(np.asarray(goals_xy, dtype=float))
    b = goals_xy.shape[0]
    goals = arm.lift_goal(goals_xy)
    theta = np.tile(np.asarray(arm.theta_init if theta0 is None else theta0, dtype=float), (b, 1))
    state = ControllerState(theta=theta, integral=np.zeros((b, 3)))
    hand = forward_kinematics(arm, theta)
    held = np.zeros(b, dtype=bool)
    converged = np.full(b, -1)
    out = np.empty((b, N_SAMPLES, 3))
    for i in range(N_SAMPLES):
        done = np.linalg.norm(goals - hand, axis=1) < gains.tol
        newly = done & ~held
        converged[newly] = i
        held |= done
        state, _ = controller_step(arm, gains, state, goals)
        # converged rollouts hold their hand (and joints) still
        state.theta[held] = theta[held]
        theta = state.theta
        hand = forward_kinematics(arm, theta)
        out[:, i] = hand
    if not np.all(np.isfinite(out)):
        raise SimulationDiverged("non-finite hand sample")
    if noise_std > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        out = out + noise_std * rng.standard_normal(out.shape)
    return out, converged


def simulate_trajectory(
    arm: ArmModel,
    gains: ControllerGains,
    goal,
    theta0=None,
    noise_std: float = 0.0,
    seed: int | None = None,
) -> Trajectory:
    goal = np.asarray(goal, dtype=float)[:2]
    if not arm.is_reachable(goal, margin=0.0)[0]:
        raise UnreachableGoalError(f"goal {goal.tolist()} is outside the workspace annulus {arm.reach}")
    rng = np.random.default_rng(seed)
    samples, conv = simulate_batch(arm, gains, goal[None], theta0, noise_std, rng)
    step = int(conv[0])
    return Trajectory(
        samples=samples[0],
        goal=goal.copy(),
        converged_step=None if step < 0 else step,
        meta={"seed": seed, "noise_std": noise_std},
    )


def raw_forward(arm: ArmModel, gains: ControllerGains, chunk: int = 4096):
    """Forward handle that runs the simulator on every latent goal."""

    def forward(xs):
        xs = np.atleast_2d(xs)
        parts = [simulate_batch(arm, gains, xs[i : i + chunk])[0] for i in range(0, len(xs), chunk)]
        return np.concatenate(parts).reshape(len(xs), -1)

    return forward


# --- dataset files -----------------------------------------------------------


@dataclass
class TableBounds:
    x_lo: float = -2.0
    x_hi: float = 2.0
    y_lo: float = -2.0
    y_hi: float = 2.0

    @property
    def center(self):
        return np.array([(self.x_lo + self.x_hi) / 2, (self.y_lo + self.y_hi) / 2])

    @property
    def radius(self):
        return np.array([(self.x_hi - self.x_lo) / 2, (self.y_hi - self.y_lo) / 2])

    def sample(self, rng, n):
        return np.column_stack(
            [rng.uniform(self.x_lo, self.x_hi, n), rng.uniform(self.y_lo, self.y_hi, n)]
        )


def dataset_header() -> str:
    cols = ["goal_x[m]", "goal_y[m]"]
    for i in range(N_SAMPLES):
        cols += [f"x{i}[m]", f"y{i}[m]", f"z{i}[m]"]
    return "# " + " ".join(cols)


def generate_dataset(
    arm: ArmModel,
    gains: ControllerGains,
    n: int,
    bounds: TableBounds,
    seed: int,
    noise_std: float = 0.0,
    path=None,
    chunk: int = 2048,
):
    """Sample reachable goals uniformly on the table and simulate each.

    Unreachable draws are replaced; if more than half of the first draws are
    unreachable the bounds are rejected.
    """
    from .surrogate import Dataset

    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    goals = np.empty((0, 2))
    first = True
    while len(goals) < n:
        want = max(n - len(goals), 64)
        draw = bounds.sample(rng, want)
        ok = arm.is_reachable(draw)
        if first and ok.mean() < 0.5:
            inner, outer = arm.reach
            raise UnreachableGoalError(
                f"{100 * (1 - ok.mean()):.1f}% of goals in table bounds "
                f"x[{bounds.x_lo}, {bounds.x_hi}] y[{bounds.y_lo}, {bounds.y_hi}] are outside "
                f"the arm's reach annulus [{inner:.3f}, {outer:.3f}] m around base {arm.base[:2]}"
            )
        first = False
        goals = np.concatenate([goals, draw[ok]])[:n]
    samples, conv = [], []
    for i in range(0, n, chunk):
        s, c = simulate_batch(arm, gains, goals[i : i + chunk], noise_std=noise_std, rng=rng)
        samples.append(s)
        conv.append(c)
    samples = np.concatenate(samples).reshape(n, -1)
    conv = np.concatenate(conv)
    meta = {
        "format_version": DATASET_VERSION,
        "n": n,
        "seed": seed,
        "noise_std": noise_std,
        "arm": asdict(arm),
        "gains": asdict(gains),
        "bounds": asdict(bounds),
        "converged_steps": conv.tolist(),
    }
    data = Dataset(goals, samples, meta)
    if path is not None:
        write_dataset(data, path)
    return data


class EmptyDatasetError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def meta_path(path) -> Path:
    return Path(str(path) + ".meta")


def write_dataset(data, path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(dataset_header() + "\n")
        for goal, traj in zip(data.inputs, data.targets):
            fh.write(" ".join(repr(float(v)) for v in (*goal, *traj)) + "\n")
    with open(meta_path(path), "w") as fh:
        for key, value in data.meta.items():
            if isinstance(value, (list, tuple)) and key == "converged_steps":
                value = ",".join(str(v) for v in value)
            fh.write(f"{key}={value}\n")


def read_dataset(path):
    """Parse a dataset file; malformed lines raise :class:`DatasetParseError`."""
    from .surrogate import Dataset

    width = 2 + 3 * N_SAMPLES
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != width:
                raise DatasetParseError(path, lineno, f"expected {width} columns, found {len(parts)}")
            try:
                row = [float(p) for p in parts]
            except ValueError as exc:
                raise DatasetParseError(path, lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in row):
                raise DatasetParseError(path, lineno, "non-finite value")
            rows.append(row)
    if not rows:
        raise EmptyDatasetError(f"{path}: no records")
    arr = np.array(rows)
    meta = {}
    mp = meta_path(path)
    if mp.exists():
        for line in mp.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    return Dataset(arr[:, :2], arr[:, 2:], meta)
