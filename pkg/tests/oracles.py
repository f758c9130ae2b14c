"""Independent reference implementations used as test oracles."""

import numpy as np

from iotdrl.dqn import Architecture, QNetwork, Transition


def reference_q(theta, state):
    w1, b1, w2, b2 = (np.asarray(p).tolist() for p in theta)
    x = [1.0 if i == state else 0.0 for i in range(len(w1))]
    hidden = [max(0.0, sum(x[i] * w1[i][j] for i in range(len(x))) + b1[j])
              for j in range(len(b1))]
    return [sum(hidden[j] * w2[j][a] for j in range(len(hidden))) + b2[a]
            for a in range(len(b2))]


def reference_loss(theta, batch, targets):
    return sum((reference_q(theta, t.state)[t.action] - y) ** 2
               for t, y in zip(batch, targets)) / len(batch)


def fd_gradient(theta, batch, targets, h=1e-4):
    grads = []
    for k, p in enumerate(theta):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in theta]
            minus = [q.copy() for q in theta]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (reference_loss(plus, batch, targets)
                      - reference_loss(minus, batch, targets)) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def random_case(rng, hidden=4, actions=3, batch=5, margin=1e-3):
    """Random network and batch with every hidden pre-activation away from the ReLU kink."""
    arch = Architecture(hidden_dim=hidden, output_dim=actions)
    while True:
        theta = [rng.normal(size=s) for s in arch.shapes()]
        pre = theta[0] + theta[1]
        if np.min(np.abs(pre)) > margin:
            break
    bits = rng.integers(0, 2, size=batch)
    trans = [Transition(int(rng.integers(2)), int(rng.integers(actions)), int(b), int(b))
             for b in bits]
    targets = rng.normal(size=batch)
    return QNetwork(arch, theta), trans, targets
