"""Feed-forward neural surrogate of the trajectory simulator.

Plain numpy MLP: tanh hidden layers, identity output, trained by mini-batch
SGD on targets that are re-corrupted with Gaussian noise at every
presentation.  Inputs and outputs are linearly mapped to [-1, 1] with bounds
stored on the network, so :func:`forward_batch` works in original units.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RTABCMLP"
FORMAT_VERSION = 1
ACTIVATIONS = {"tanh": 0, "identity": 1}


class WeightFileError(Exception):
    code = 10


class BadMagicError(WeightFileError):
    code = 11


class VersionMismatchError(WeightFileError):
    code = 12


class TruncatedFileError(WeightFileError):
    code = 13


# a batch loss this many times the untrained loss counts as divergence
BLOWUP_FACTOR = 1e6


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass
class Mlp:
    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"
    in_lo: np.ndarray | None = None
    in_hi: np.ndarray | None = None
    out_lo: np.ndarray | None = None
    out_hi: np.ndarray | None = None

    def __post_init__(self):
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i + 1], self.sizes[i]) or b.shape != (self.sizes[i + 1],):
                raise ValueError(f"layer {i} has inconsistent parameter shapes")
        if self.in_lo is None:
            self.in_lo, self.in_hi = -np.ones(self.sizes[0]), np.ones(self.sizes[0])
        if self.out_lo is None:
            self.out_lo, self.out_hi = -np.ones(self.sizes[-1]), np.ones(self.sizes[-1])

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, hidden_activation: str = "tanh") -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-lim, lim, (fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(list(sizes), weights, biases, hidden_activation)

    @classmethod
    def zeros(cls, sizes, hidden_activation: str = "tanh") -> "Mlp":
        return cls(
            list(sizes),
            [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
            hidden_activation,
        )

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.in_lo.copy(), self.in_hi.copy(), self.out_lo.copy(), self.out_hi.copy(),
        )

    def set_scaling(self, inputs: np.ndarray, targets: np.ndarray, shared_output_span: bool = True) -> None:
        """Record per-dimension bounds so data maps onto [-1, 1].

        With ``shared_output_span`` every output keeps its own midpoint but all
        use the widest half-range, so nearly constant outputs are not blown up
        (and the training noise with them).
        """
        self.in_lo, self.in_hi = _bounds(inputs)
        lo, hi = _bounds(targets)
        if shared_output_span:
            mid, half = (lo + hi) / 2, np.max(hi - lo) / 2
            lo, hi = mid - half, mid + half
        self.out_lo, self.out_hi = lo, hi

    def scale_in(self, x):
        return 2.0 * (x - self.in_lo) / (self.in_hi - self.in_lo) - 1.0

    def scale_out(self, z):
        return 2.0 * (z - self.out_lo) / (self.out_hi - self.out_lo) - 1.0

    def unscale_out(self, y):
        return self.out_lo + (y + 1.0) * 0.5 * (self.out_hi - self.out_lo)

    def __call__(self, xs):
        return forward_batch(self, xs)


def _bounds(a):
    a = np.atleast_2d(a)
    lo, hi = a.min(axis=0), a.max(axis=0)
    flat = hi - lo < 1e-12
    return np.where(flat, lo - 1.0, lo), np.where(flat, hi + 1.0, hi)


def _act(name, z):
    return np.tanh(z) if name == "tanh" else z


def _forward_scaled(net: Mlp, h: np.ndarray, keep: bool = False, exact: bool = False):
    """``exact`` uses einsum, whose per-element summation order does not
    depend on the batch; BLAS rounding can differ with a row's position."""
    acts = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = (np.einsum("ij,kj->ik", h, w) if exact else h @ w.T) + b
        h = z if i == last else _act(net.hidden_activation, z)
        if keep:
            acts.append(h)
    return (h, acts) if keep else h


def forward_batch(net: Mlp, xs) -> np.ndarray:
    """Predict one output row per latent point, in original units."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[1] != net.sizes[0]:
        raise ValueError(f"inputs have {xs.shape[1]} columns, network expects {net.sizes[0]}")
    return net.unscale_out(_forward_scaled(net, net.scale_in(xs), exact=True))


def loss_and_grad(net: Mlp, x_scaled: np.ndarray, t_scaled: np.ndarray):
    """Mean over the batch of squared error, and its gradient per parameter.

    Works in scaled units; gradients are returned in the order of
    ``net.params``.
    """
    out, acts = _forward_scaled(net, x_scaled, keep=True)
    n = x_scaled.shape[0]
    diff = out - t_scaled
    loss = float(np.sum(diff * diff) / n)
    delta = 2.0 * diff / n
    grads: list[np.ndarray] = []
    for i in range(len(net.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ acts[i])
        if i:
            delta = delta @ net.weights[i]
            if net.hidden_activation == "tanh":
                delta = delta * (1.0 - acts[i] ** 2)
    grads.reverse()
    return loss, grads


@dataclass
class TrainConfig:
    epsilon_star: float = 0.02
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0

    def validate(self):
        if self.epsilon_star < 0:
            raise ValueError("epsilon_star must be non-negative")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning rate, batch size and epochs must be positive")


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets differ in length")

    def __len__(self):
        return self.inputs.shape[0]


def train_sgd(net: Mlp, data: Dataset, cfg: TrainConfig, log=None) -> list[float]:
    """Train in place; returns the mean batch loss of every epoch.

    Noise with std ``epsilon_star`` (original units) is drawn afresh for every
    presented target.
    """
    cfg.validate()
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    x_all = net.scale_in(data.inputs)
    out_span = 0.5 * (net.out_hi - net.out_lo)
    history = []
    params = net.params
    reference = None  # loss of the untrained net on its first batch
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            target = data.targets[idx]
            if cfg.epsilon_star > 0:
                target = target + cfg.epsilon_star * rng.standard_normal(target.shape)
            t_scaled = net.scale_out(target)
            loss, grads = loss_and_grad(net, x_all[idx], t_scaled)
            if reference is None:
                reference = max(loss, 1e-12)
            if not math.isfinite(loss) or loss > BLOWUP_FACTOR * reference:
                raise DivergenceError(epoch, loss)
            for p, g in zip(params, grads):
                p -= cfg.learning_rate * g
            total += loss
            batches += 1
        mean = total / batches
        if not math.isfinite(mean):
            raise DivergenceError(epoch, mean)
        history.append(mean)
        if log is not None:
            log(epoch, mean)
    return history


def save_weights(net: Mlp, path) -> None:
    """Binary little-endian file: magic, version, sizes, scaling, parameters."""
    act = ACTIVATIONS[net.hidden_activation]
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, act, len(net.sizes))]
    parts.append(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
    for arr in (net.in_lo, net.in_hi, net.out_lo, net.out_hi, *net.params):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> Mlp:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a weight file (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 12:
        raise TruncatedFileError(f"{path}: truncated header")
    version, act, n_sizes = struct.unpack_from("<III", raw, pos)
    pos += 12
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < pos + 4 * n_sizes:
        raise TruncatedFileError(f"{path}: truncated layer table")
    sizes = list(struct.unpack_from(f"<{n_sizes}I", raw, pos))
    pos += 4 * n_sizes
    names = {v: k for k, v in ACTIVATIONS.items()}
    if act not in names or n_sizes < 2:
        raise WeightFileError(f"{path}: corrupt header")

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(raw):
            raise TruncatedFileError(f"{path}: truncated parameters")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(float).reshape(shape)
        pos = end
        return arr

    in_lo, in_hi = take((sizes[0],)), take((sizes[0],))
    out_lo, out_hi = take((sizes[-1],)), take((sizes[-1],))
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(take((fan_out, fan_in)))
        biases.append(take((fan_out,)))
    if pos != len(raw):
        raise WeightFileError(f"{path}: {len(raw) - pos} trailing bytes")
    return Mlp(sizes, weights, biases, names[act], in_lo, in_hi, out_lo, out_hi)
