import numpy as np
import pytest

from iotdrl.dqn import Architecture, QNetwork


def bias_net(main_q, target_q=None, hidden=2):
    """Network whose Q-values are just the output bias (all weights zero)."""
    k = len(main_q)
    arch = Architecture(hidden_dim=hidden, output_dim=k)

    def params(q):
        return [np.zeros((2, hidden)), np.zeros(hidden), np.zeros((hidden, k)),
                np.array(q, dtype=float)]

    return QNetwork(arch, params(main_q), params(target_q if target_q is not None else main_q))


def state_net(q_state0, q_state1, hidden=2):
    """Network with a different bias-free Q-vector per state.

    Hidden unit j carries the one-hot input for state j; the output layer maps
    it straight to that state's Q-values.
    """
    k = len(q_state0)
    arch = Architecture(hidden_dim=hidden, output_dim=k)
    w1 = np.zeros((2, hidden))
    w1[0, 0] = w1[1, 1] = 1.0
    w2 = np.zeros((hidden, k))
    w2[0], w2[1] = q_state0, q_state1
    theta = [w1, np.zeros(hidden), w2, np.zeros(k)]
    return QNetwork(arch, theta)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
