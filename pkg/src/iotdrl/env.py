"""Slotted multi-channel radio environment with a single gateway.

Agents transmit simultaneously once per slot. A frame is acknowledged when
its channel is receivable by the gateway, no other agent used the same
channel in that slot, and the link did not drop it.
"""

from __future__ import annotations

import csv
import enum
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class Cause(enum.Enum):
    NONE = "NONE"
    NOT_RECEIVABLE = "NOT_RECEIVABLE"
    COLLISION = "COLLISION"
    LINK_LOSS = "LINK_LOSS"


@dataclass(frozen=True)
class Channel:
    index: int
    freq_mhz: float
    bandwidth_khz: float = 125.0


def _default_channels():
    return [Channel(0, 922.4), Channel(1, 922.8), Channel(2, 923.2)]


@dataclass
class ChannelPlan:
    channels: list[Channel] = field(default_factory=_default_channels)
    gateway_receivable: frozenset[int] = frozenset({1, 2})

    def __post_init__(self):
        self.gateway_receivable = frozenset(self.gateway_receivable)
        self.validate()

    def validate(self) -> None:
        indices = [c.index for c in self.channels]
        if not indices:
            raise ValueError("channels: at least one channel is required")
        if indices != list(range(len(indices))):
            raise ValueError("channels: indices must be 0..K-1 in order")
        if not self.gateway_receivable:
            raise ValueError("gateway_receivable: at least one receivable channel")
        if not self.gateway_receivable <= set(indices):
            raise ValueError("gateway_receivable: must be a subset of channel indices")

    @property
    def num_channels(self) -> int:
        return len(self.channels)


@dataclass
class LinkModel:
    loss_probability: float = 0.0
    ack_always_delivered: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability: must lie in [0, 1]")


@dataclass(frozen=True)
class AgentOutcome:
    channel: int
    success: bool
    cause: Cause
    # False only when the uplink succeeded but the ACK was lost on the way back.
    ack_received: bool


@dataclass(frozen=True)
class SlotOutcome:
    records: tuple[AgentOutcome, ...]

    def __len__(self):
        return len(self.records)

    def __getitem__(self, agent: int) -> AgentOutcome:
        return self.records[agent]


def resolve_slot(plan: ChannelPlan, link: LinkModel, choices: Sequence[int],
                 rng: np.random.Generator) -> SlotOutcome:
    """Resolve one synchronized slot.

    Draws exactly ``len(choices)`` uniforms for the uplink loss and, when
    ACKs can be lost, another ``len(choices)`` for the downlink, regardless
    of the choices made. This keeps the random stream aligned across runs.
    """
    k = plan.num_channels
    for c in choices:
        if not 0 <= c < k:
            raise ValueError(f"channel index {c} out of range [0, {k})")
    uplink = rng.random(len(choices))
    downlink = None if link.ack_always_delivered else rng.random(len(choices))
    counts = np.bincount(np.asarray(choices, dtype=np.intp), minlength=k)

    records = []
    for i, c in enumerate(choices):
        if c not in plan.gateway_receivable:
            cause = Cause.NOT_RECEIVABLE
        elif counts[c] >= 2:
            cause = Cause.COLLISION
        elif uplink[i] < link.loss_probability:
            cause = Cause.LINK_LOSS
        else:
            cause = Cause.NONE
        success = cause is Cause.NONE
        ack = success and (downlink is None or downlink[i] >= link.loss_probability)
        records.append(AgentOutcome(int(c), success, cause, ack))
    return SlotOutcome(tuple(records))


def feedback(outcome: SlotOutcome, agent: int) -> tuple[int, int]:
    """(next_state, reward): (1, 1) if an ACK came back, else (0, 0)."""
    bit = 1 if outcome[agent].ack_received else 0
    return bit, bit


def expected_fsr_oracle(plan: ChannelPlan, link: LinkModel,
                        policy: Sequence[Sequence[float]]) -> float:
    """Exact expected per-slot FSR, averaged over agents, by enumeration.

    ``policy[i][c]`` is the probability that agent ``i`` picks channel ``c``.
    """
    k = plan.num_channels
    probs = []
    for i, dist in enumerate(policy):
        dist = [float(p) for p in dist]
        if len(dist) != k or any(p < 0 for p in dist) or abs(sum(dist) - 1.0) > 1e-9:
            raise ValueError(f"policy[{i}] is not a distribution over {k} channels")
        probs.append(dist)
    n = len(probs)
    if n == 0:
        raise ValueError("policy must cover at least one agent")

    keep = 1.0 - link.loss_probability
    per_frame = keep if link.ack_always_delivered else keep * keep
    total = 0.0
    for joint in itertools.product(range(k), repeat=n):
        weight = 1.0
        for i, c in enumerate(joint):
            weight *= probs[i][c]
        if weight == 0.0:
            continue
        clean = sum(
            1 for c in joint if c in plan.gateway_receivable and joint.count(c) == 1)
        total += weight * clean
    return total * per_frame / n


TRACE_COLUMNS = ("slot", "agent", "channel", "success", "cause")


def write_trace(path, rows) -> None:
    """Write ``(slot, agent, channel, success, cause)`` rows as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for slot, agent, channel, success, cause in rows:
            w.writerow([slot, agent, channel, int(success), cause.value])
