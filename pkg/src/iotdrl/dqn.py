"""Double-DQN machinery: a tiny numpy Q-network, replay buffer and epsilon schedule.

Everything here is deterministic given explicit ``numpy.random.Generator``
instances; no global random state is touched.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STATE_DIM = 2  # one-hot of the binary ACK state


@dataclass
class Hyperparams:
    learning_rate: float = 0.01
    gamma: float = 0.6
    episodes: int = 500
    steps_per_episode: int = 20
    batch_size: int = 16
    sync_period: int = 10
    buffer_capacity: int = 10000
    hidden_units: int = 16

    def validate(self) -> None:
        """Raise ``ValueError`` naming the first offending field."""
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0):
            raise ValueError("learning_rate: must be > 0")
        if not (isinstance(self.gamma, (int, float)) and 0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma: must lie in [0, 1]")
        for name in ("episodes", "steps_per_episode", "batch_size", "sync_period",
                     "buffer_capacity", "hidden_units"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"{name}: must be a positive integer")
        if self.episodes < 2:
            raise ValueError("episodes: must be >= 2 for the linear epsilon schedule")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size: must not exceed buffer_capacity")


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: int
    next_state: int

    def __post_init__(self):
        if self.state not in (0, 1) or self.next_state not in (0, 1):
            raise ValueError(f"states must be binary, got {self.state}, {self.next_state}")
        if self.reward not in (0, 1):
            raise ValueError(f"reward must be binary, got {self.reward}")
        if self.reward != self.next_state:
            raise ValueError(
                f"reward ({self.reward}) must equal next_state ({self.next_state})")
        if self.action < 0:
            raise ValueError(f"action must be a channel index, got {self.action}")


@dataclass(frozen=True)
class Architecture:
    input_dim: int = STATE_DIM
    hidden_dim: int = 16
    output_dim: int = 3

    def shapes(self) -> list[tuple[int, ...]]:
        return [
            (self.input_dim, self.hidden_dim),
            (self.hidden_dim,),
            (self.hidden_dim, self.output_dim),
            (self.output_dim,),
        ]


class QNetwork:
    """One-hidden-layer ReLU network holding main and target parameters.

    ``theta`` is ``[W1, b1, W2, b2]`` with ``q = relu(x @ W1 + b1) @ W2 + b2``.
    """

    def __init__(self, arch: Architecture, theta: list[np.ndarray],
                 theta_target: list[np.ndarray] | None = None):
        for p, shape in zip(theta, arch.shapes()):
            if p.shape != shape:
                raise ValueError(f"weight shape {p.shape} does not match {shape}")
        self.arch = arch
        self.theta = [np.array(p, dtype=np.float64) for p in theta]
        if theta_target is None:
            theta_target = theta
        self.theta_target = [np.array(p, dtype=np.float64) for p in theta_target]

    @property
    def num_actions(self) -> int:
        return self.arch.output_dim

    def copy(self) -> "QNetwork":
        return QNetwork(self.arch, self.theta, self.theta_target)

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.theta + self.theta_target)


def init_network(seed: int, arch: Architecture) -> QNetwork:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    k1 = 1.0 / math.sqrt(arch.input_dim)
    k2 = 1.0 / math.sqrt(arch.hidden_dim)
    theta = [
        rng.uniform(-k1, k1, size=(arch.input_dim, arch.hidden_dim)),
        np.zeros(arch.hidden_dim),
        rng.uniform(-k2, k2, size=(arch.hidden_dim, arch.output_dim)),
        np.zeros(arch.output_dim),
    ]
    return QNetwork(arch, theta)


def _q_values(params: list[np.ndarray], states: np.ndarray) -> np.ndarray:
    # one-hot input means x @ W1 is a row lookup
    w1, b1, w2, b2 = params
    hidden = np.maximum(w1[states] + b1, 0.0)
    return hidden @ w2 + b2


def forward(net: QNetwork, state: int, use_target: bool = False) -> np.ndarray:
    if state not in (0, 1):
        raise ValueError(f"state must be 0 or 1, got {state}")
    params = net.theta_target if use_target else net.theta
    return _q_values(params, np.array([state]))[0]


def select_action(net: QNetwork, state: int, epsilon: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy choice; greedy ties go to the lowest channel index.

    Always consumes one uniform draw, plus one integer draw when exploring.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        return int(rng.integers(net.num_actions))
    return int(np.argmax(forward(net, state)))


@dataclass(frozen=True)
class EpsilonSchedule:
    total_episodes: int

    def __post_init__(self):
        if self.total_episodes < 2:
            raise ValueError("total_episodes must be >= 2")

    def at(self, n: int) -> float:
        if not 1 <= n <= self.total_episodes:
            raise ValueError(f"episode {n} outside [1, {self.total_episodes}]")
        eps = 1.0 - (n - 1) / (self.total_episodes - 1)
        return min(1.0, max(0.0, eps))


def epsilon_at(schedule: EpsilonSchedule, n: int) -> float:
    return schedule.at(n)


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform sampling without replacement."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, t: Transition) -> None:
        if not isinstance(t, Transition):
            raise TypeError("expected a Transition")
        if t.reward != t.next_state:
            raise ValueError("transition violates reward == next_state")
        self._items.append(t)

    def clear(self) -> None:
        self._items.clear()

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition] | None:
        """Return ``batch_size`` distinct transitions, or ``None`` if not ready."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(self._items) < batch_size:
            return None
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


def sample_minibatch(buffer: ReplayBuffer, batch_size: int,
                     rng: np.random.Generator) -> list[Transition] | None:
    return buffer.sample(batch_size, rng)


def _batch_arrays(batch: list[Transition]):
    s = np.fromiter((t.state for t in batch), dtype=np.intp, count=len(batch))
    a = np.fromiter((t.action for t in batch), dtype=np.intp, count=len(batch))
    r = np.fromiter((t.reward for t in batch), dtype=np.float64, count=len(batch))
    s2 = np.fromiter((t.next_state for t in batch), dtype=np.intp, count=len(batch))
    return s, a, r, s2


def _double_targets(net: QNetwork, rewards: np.ndarray, next_states: np.ndarray,
                    gamma: float) -> np.ndarray:
    best = np.argmax(_q_values(net.theta, next_states), axis=1)
    q_eval = _q_values(net.theta_target, next_states)
    return rewards + gamma * q_eval[np.arange(len(best)), best]


def double_dqn_target(net: QNetwork, t: Transition, gamma: float) -> float:
    """r + gamma * Q_target(s', argmax_a' Q_main(s', a'))."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return float(_double_targets(net, np.array([float(t.reward)]),
                                 np.array([t.next_state]), gamma)[0])


def loss_and_gradient(theta: list[np.ndarray], states: np.ndarray, actions: np.ndarray,
                      targets: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean squared TD error over the batch and its gradient w.r.t. ``theta``.

    Targets are treated as constants.
    """
    w1, b1, w2, b2 = theta
    n = len(states)
    pre = w1[states] + b1
    hidden = np.maximum(pre, 0.0)
    q = hidden @ w2 + b2
    rows = np.arange(n)
    err = q[rows, actions] - targets
    loss = float(np.mean(err * err))

    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * err / n
    g_w2 = hidden.T @ dq
    g_b2 = dq.sum(axis=0)
    dpre = (dq @ w2.T) * (pre > 0.0)
    g_w1 = np.zeros_like(w1)
    np.add.at(g_w1, states, dpre)
    g_b1 = dpre.sum(axis=0)
    return loss, [g_w1, g_b1, g_w2, g_b2]


def train_step(net: QNetwork, batch: list[Transition], hp: Hyperparams) -> float:
    """One SGD step on the batch; returns the pre-step loss. Mutates ``net.theta``."""
    if not batch:
        raise ValueError("batch must be non-empty")
    s, a, r, s2 = _batch_arrays(batch)
    if a.max() >= net.num_actions:
        raise ValueError("action index out of range for this network")
    targets = _double_targets(net, r, s2, hp.gamma)
    loss, grads = loss_and_gradient(net.theta, s, a, targets)
    for p, g in zip(net.theta, grads):
        p -= hp.learning_rate * g
    return loss


def sync_target(net: QNetwork) -> None:
    net.theta_target = [p.copy() for p in net.theta]


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_FORMAT = "iotdrl-qnet/1"


def save_checkpoint(net: QNetwork, path: str | Path, seed: int | None = None) -> None:
    """Write ``net`` as JSON. Floats use repr so the round trip is bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "architecture": {
            "input_dim": net.arch.input_dim,
            "hidden_dim": net.arch.hidden_dim,
            "output_dim": net.arch.output_dim,
        },
        "layers": [p.ravel(order="C").tolist() for p in net.theta],
        "target_layers": [p.ravel(order="C").tolist() for p in net.theta_target],
        "seed": seed,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path: str | Path) -> tuple[QNetwork, int | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a Q-network checkpoint")
    arch = Architecture(**doc["architecture"])
    shapes = arch.shapes()

    def unflatten(flat_layers):
        if len(flat_layers) != len(shapes):
            raise ValueError(f"{path}: expected {len(shapes)} layers")
        out = []
        for flat, shape in zip(flat_layers, shapes):
            arr = np.asarray(flat, dtype=np.float64)
            if arr.size != math.prod(shape):
                raise ValueError(f"{path}: layer size {arr.size} does not match {shape}")
            out.append(arr.reshape(shape))
        return out

    net = QNetwork(arch, unflatten(doc["layers"]), unflatten(doc["target_layers"]))
    return net, doc.get("seed")
