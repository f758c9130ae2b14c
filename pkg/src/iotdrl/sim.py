"""Multi-agent training, testing and baseline loops.

Each agent is an independent Double-DQN learner. Agents only interact
through the shared slot: all actions are collected, resolved together,
then every agent learns from its own ACK bit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .dqn import (Architecture, EpsilonSchedule, Hyperparams, QNetwork, ReplayBuffer,
                  Transition, init_network, select_action, sync_target, train_step)
from .env import ChannelPlan, LinkModel, feedback, resolve_slot

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6

# Stream identifiers mixed into the master seed. Agent streams also take the
# agent index, so adding agents never perturbs existing ones.
INIT, POLICY, REPLAY = 0, 1, 2
ENV_TRAIN, ENV_TEST, ENV_BASELINE = 10, 11, 12
POLICY_TEST, POLICY_BASELINE = 20, 21


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AgentState:
    agent_id: int
    net: QNetwork
    buffer: ReplayBuffer
    rng: np.random.Generator
    replay_rng: np.random.Generator
    state: int = 0
    t: int = 0
    steps: int = 0
    updates: int = 0
    pushed: int = 0
    init_seed: int | None = None


@dataclass
class RunState:
    hp: Hyperparams = field(default_factory=Hyperparams)
    plan: ChannelPlan = field(default_factory=ChannelPlan)
    link: LinkModel = field(default_factory=LinkModel)
    num_agents: int = 2
    seed: int = 0
    reset_buffer_per_episode: bool = False
    reset_state_per_episode: bool = False
    episode: int = 0
    agents: list[AgentState] = field(default_factory=list)

    def validate(self) -> None:
        self.hp.validate()
        self.plan.validate()
        self.link.validate()
        if isinstance(self.num_agents, bool) or not isinstance(self.num_agents, int) \
                or self.num_agents < 1:
            raise ValueError("num_agents: must be a positive integer")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError("seed: must be a non-negative integer")

    @property
    def architecture(self) -> Architecture:
        return Architecture(hidden_dim=self.hp.hidden_units,
                            output_dim=self.plan.num_channels)


@dataclass
class EpisodeMetrics:
    episode: int
    successes: list[int]
    steps: int
    epsilon: float

    @property
    def fsr(self) -> list[float]:
        return [s / self.steps for s in self.successes]

    @property
    def mean_fsr(self) -> float:
        f = self.fsr
        return sum(f) / len(f)


class SlotChannel(Protocol):
    """Carries one slot's channel choices to the radio and returns ACK bits."""

    def exchange(self, actions: Sequence[int]) -> list[int]: ...


class InProcessChannel:
    def __init__(self, plan: ChannelPlan, link: LinkModel, rng: np.random.Generator,
                 trace: list | None = None):
        self.plan = plan
        self.link = link
        self.rng = rng
        self.trace = trace
        self.slot = 0

    def exchange(self, actions):
        outcome = resolve_slot(self.plan, self.link, actions, self.rng)
        if self.trace is not None:
            for i, rec in enumerate(outcome.records):
                self.trace.append((self.slot, i, rec.channel, rec.success, rec.cause))
        self.slot += 1
        return [feedback(outcome, i)[1] for i in range(len(actions))]


def make_agents(run: RunState, policy_stream: int = POLICY) -> list[AgentState]:
    arch = run.architecture
    agents = []
    for i in range(run.num_agents):
        init_seed = derive_seed(run.seed, INIT, i)
        agents.append(AgentState(
            agent_id=i,
            net=init_network(init_seed, arch),
            buffer=ReplayBuffer(run.hp.buffer_capacity),
            rng=derive_rng(run.seed, policy_stream, i),
            replay_rng=derive_rng(run.seed, REPLAY, i),
            init_seed=init_seed,
        ))
    return agents


def learn(agent: AgentState, action: int, ack: int, hp: Hyperparams) -> float | None:
    """Store the transition, train when the buffer is ready, sync every C steps."""
    agent.buffer.push(Transition(agent.state, action, ack, ack))
    agent.pushed += 1
    loss = None
    batch = agent.buffer.sample(hp.batch_size, agent.replay_rng)
    if batch is not None:
        loss = train_step(agent.net, batch, hp)
        agent.updates += 1
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise TrainingDiverged(
                f"agent {agent.agent_id}: loss {loss!r} after {agent.steps} steps")
    agent.steps += 1
    if agent.steps % hp.sync_period == 0:
        sync_target(agent.net)
    agent.state = ack
    return loss


def run_training(run: RunState, channel: SlotChannel | None = None,
                 trace: list | None = None) -> tuple[list[AgentState], list[EpisodeMetrics]]:
    """Train ``run.num_agents`` agents for N episodes of T slots each."""
    run.validate()
    hp = run.hp
    if channel is None:
        channel = InProcessChannel(run.plan, run.link, derive_rng(run.seed, ENV_TRAIN),
                                   trace)
    schedule = EpsilonSchedule(hp.episodes)
    agents = make_agents(run)
    run.agents = agents
    metrics = []
    for n in range(1, hp.episodes + 1):
        run.episode = n
        eps = schedule.at(n)
        for ag in agents:
            ag.t = 0
            if run.reset_buffer_per_episode:
                ag.buffer.clear()
            if run.reset_state_per_episode:
                ag.state = 0
        successes = [0] * len(agents)
        for _ in range(hp.steps_per_episode):
            actions = [select_action(ag.net, ag.state, eps, ag.rng) for ag in agents]
            acks = channel.exchange(actions)
            for i, (ag, a, ack) in enumerate(zip(agents, actions, acks)):
                learn(ag, a, ack, hp)
                ag.t += 1
                successes[i] += ack
        metrics.append(EpisodeMetrics(n, successes, hp.steps_per_episode, eps))
        if n % 100 == 0:
            log.info("episode %d eps=%.3f mean_fsr=%.3f", n, eps, metrics[-1].mean_fsr)
    return agents, metrics


def _rollout(agents: list[AgentState], channel: SlotChannel, episodes: int, steps: int,
             epsilon: float) -> list[EpisodeMetrics]:
    metrics = []
    for n in range(1, episodes + 1):
        successes = [0] * len(agents)
        for _ in range(steps):
            actions = [select_action(ag.net, ag.state, epsilon, ag.rng) for ag in agents]
            acks = channel.exchange(actions)
            for i, (ag, ack) in enumerate(zip(agents, acks)):
                ag.state = ack
                successes[i] += ack
        metrics.append(EpisodeMetrics(n, successes, steps, epsilon))
    return metrics


def run_testing(agents: Sequence[AgentState | QNetwork], run: RunState, episodes: int,
                channel: SlotChannel | None = None) -> list[EpisodeMetrics]:
    """Greedy rollout of trained networks: no exploration, no learning.

    Every agent restarts from state 0 with fresh test streams, so the result
    only depends on the weights and the master seed.
    """
    nets = [a.net if isinstance(a, AgentState) else a for a in agents]
    if len(nets) != run.num_agents:
        raise ValueError(f"expected {run.num_agents} agents, got {len(nets)}")
    testers = [
        AgentState(i, net, ReplayBuffer(1), derive_rng(run.seed, POLICY_TEST, i),
                   derive_rng(run.seed, POLICY_TEST, i, 1))
        for i, net in enumerate(nets)
    ]
    if channel is None:
        channel = InProcessChannel(run.plan, run.link, derive_rng(run.seed, ENV_TEST))
    return _rollout(testers, channel, episodes, run.hp.steps_per_episode, 0.0)


def run_baseline_untrained(run: RunState, episodes: int, epsilon: float = 1.0,
                           channel: SlotChannel | None = None) -> list[EpisodeMetrics]:
    """Freshly initialized agents acting epsilon-greedily without learning."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    run.validate()
    agents = make_agents(run, POLICY_BASELINE)
    if channel is None:
        channel = InProcessChannel(run.plan, run.link, derive_rng(run.seed, ENV_BASELINE))
    return _rollout(agents, channel, episodes, run.hp.steps_per_episode, epsilon)


# --- metrics ---------------------------------------------------------------

METRICS_COLUMNS = ("episode", "agent_id", "successes", "fsr", "mean_fsr", "epsilon",
                   "rolling_mean_fsr")


def mean_fsr(metrics: Sequence[EpisodeMetrics]) -> float:
    if not metrics:
        return float("nan")
    return sum(m.mean_fsr for m in metrics) / len(metrics)


def rolling_mean_fsr(metrics: Sequence[EpisodeMetrics], window: int = 100) -> list[float]:
    means = np.array([m.mean_fsr for m in metrics])
    csum = np.concatenate([[0.0], np.cumsum(means)])
    out = []
    for i in range(len(means)):
        lo = max(0, i + 1 - window)
        out.append(float((csum[i + 1] - csum[lo]) / (i + 1 - lo)))
    return out


def window_means(metrics: Sequence[EpisodeMetrics], window: int = 100) -> tuple[float, float]:
    """Mean FSR over the first and the last ``window`` episodes."""
    return mean_fsr(metrics[:window]), mean_fsr(metrics[-window:])


def write_metrics_csv(path, metrics: Sequence[EpisodeMetrics], window: int = 100) -> None:
    rolling = rolling_mean_fsr(metrics, window)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for m, roll in zip(metrics, rolling):
            for agent, (succ, fsr) in enumerate(zip(m.successes, m.fsr)):
                w.writerow([m.episode, agent, succ, repr(fsr), repr(m.mean_fsr),
                            repr(m.epsilon), repr(roll)])
