"""Framed PC <-> end-device protocol over an abstract byte stream.

Wire layout (all single bytes unless noted)::

    0x49 0x54 | version | msg_type | agent_id | payload_len | payload... | xor

The trailing checksum is the XOR of every preceding byte. The PC side
(``coordinator_*``) assigns channels and collects ACK bits. ``mock_device``
stands in for a radio node and answers from the simulated environment.
"""

from __future__ import annotations

import enum
import logging
import queue
import threading
import time
from dataclasses import dataclass
from functools import reduce
from operator import xor

import numpy as np

from .dqn import EpsilonSchedule, Transition, select_action
from .env import ChannelPlan, LinkModel, feedback, resolve_slot

log = logging.getLogger(__name__)

MAGIC = b"\x49\x54"
VERSION = 0x01
HEADER_LEN = 6
MAX_PAYLOAD = 255


class MsgType(enum.IntEnum):
    ASSIGN_CHANNEL = 0x01
    TX_RESULT = 0x02
    PING = 0x03
    PONG = 0x04
    ERROR = 0x7F


class ErrorCode(enum.IntEnum):
    CHECKSUM_MISMATCH = 0x01
    TRUNCATED = 0x02
    BAD_MAGIC = 0x03
    TRAILING_DATA = 0x04
    UNKNOWN_TYPE = 0x05
    BAD_VERSION = 0x06
    BAD_PAYLOAD = 0x07


class FrameError(ValueError):
    code: ErrorCode

    def __init__(self, message: str = ""):
        super().__init__(message or self.code.name)


class ChecksumMismatch(FrameError):
    code = ErrorCode.CHECKSUM_MISMATCH


class Truncated(FrameError):
    code = ErrorCode.TRUNCATED


class BadMagic(FrameError):
    code = ErrorCode.BAD_MAGIC


class TrailingData(FrameError):
    code = ErrorCode.TRAILING_DATA


class TransportError(IOError):
    """The byte stream itself failed (closed, broken). Never an ACK signal."""


@dataclass(frozen=True)
class Frame:
    msg_type: int
    agent_id: int
    payload: bytes = b""
    version: int = VERSION


def _checksum(data: bytes) -> int:
    return reduce(xor, data, 0)


def encode_frame(f: Frame) -> bytes:
    payload = bytes(f.payload)
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    for name in ("version", "msg_type", "agent_id"):
        if not 0 <= getattr(f, name) <= 0xFF:
            raise ValueError(f"{name} must fit in one byte")
    body = MAGIC + bytes([f.version, f.msg_type, f.agent_id, len(payload)]) + payload
    return body + bytes([_checksum(body)])


def _try_frame(buf: bytes | bytearray, start: int):
    """Inspect a candidate frame at ``start``. Returns ``(frame, end)`` or raises."""
    if len(buf) - start < HEADER_LEN + 1:
        raise Truncated()
    end = start + HEADER_LEN + buf[start + 5] + 1
    if end > len(buf):
        raise Truncated()
    raw = bytes(buf[start:end])
    if _checksum(raw) != 0:
        raise ChecksumMismatch()
    return Frame(raw[3], raw[4], raw[HEADER_LEN:-1], raw[2]), end


def _magic_positions(buf, start: int = 0):
    pos = buf.find(MAGIC, start)
    while pos != -1:
        yield pos
        pos = buf.find(MAGIC, pos + 1)


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame, skipping any leading garbage.

    The frame must end at the end of ``data``; this catches corrupted length
    bytes that would otherwise yield a shorter, accidentally valid frame.
    """
    data = bytes(data)
    first_error = None
    for pos in _magic_positions(data):
        try:
            frame, end = _try_frame(data, pos)
            if end != len(data):
                raise TrailingData(f"{len(data) - end} bytes after frame")
            return frame
        except FrameError as exc:
            first_error = first_error or exc
    raise first_error or BadMagic()


class FrameDecoder:
    """Incremental decoder for a byte stream.

    ``feed`` returns complete frames and ``FrameError`` instances in arrival
    order. Bytes before a magic marker are dropped silently; a candidate that
    fails its checksum is reported and scanning resumes one byte later.
    """

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame | FrameError]:
        self._buf.extend(data)
        out: list[Frame | FrameError] = []
        while True:
            pos = self._buf.find(MAGIC)
            if pos == -1:
                # keep a trailing 0x49 that may be the first half of a marker
                keep = 1 if self._buf.endswith(MAGIC[:1]) else 0
                del self._buf[:len(self._buf) - keep]
                return out
            del self._buf[:pos]
            try:
                frame, end = _try_frame(self._buf, 0)
            except Truncated:
                # A spurious marker in garbage can claim bytes that never come;
                # prefer a complete valid frame further on if one exists.
                skip = self._complete_frame_after(1)
                if skip is None:
                    return out
                del self._buf[:skip]
                continue
            except ChecksumMismatch as exc:
                out.append(exc)
                del self._buf[:1]
                continue
            out.append(frame)
            del self._buf[:end]

    def _complete_frame_after(self, start: int) -> int | None:
        for pos in _magic_positions(self._buf, start):
            try:
                _try_frame(self._buf, pos)
                return pos
            except FrameError:
                continue
        return None


# --- transports ------------------------------------------------------------

class Transport:
    """Duplex byte stream. ``read`` returns at least one byte or raises."""

    timeout_ms: int = 1000

    def write(self, data: bytes) -> None:
        raise NotImplementedError

    def read(self, timeout_ms: int | None = None) -> bytes:
        """Block for data; raise ``TimeoutError`` or ``TransportError``."""
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class _Pipe:
    def __init__(self):
        self.chunks: queue.Queue = queue.Queue()
        self.closed = threading.Event()


_CLOSED = object()


class MemoryTransport(Transport):
    """One end of an in-memory duplex pipe; see ``memory_pipe``."""

    def __init__(self, inbox: _Pipe, outbox: _Pipe, timeout_ms: int = 1000):
        self._inbox = inbox
        self._outbox = outbox
        self.timeout_ms = timeout_ms

    def write(self, data: bytes) -> None:
        if self._outbox.closed.is_set():
            raise TransportError("write on closed transport")
        self._outbox.chunks.put(bytes(data))

    def read(self, timeout_ms: int | None = None) -> bytes:
        if timeout_ms is None:
            timeout_ms = self.timeout_ms
        try:
            chunk = self._inbox.chunks.get(timeout=timeout_ms / 1000.0)
        except queue.Empty:
            raise TimeoutError(f"no data within {timeout_ms} ms") from None
        if chunk is _CLOSED:
            self._inbox.chunks.put(_CLOSED)
            raise TransportError("peer closed the transport")
        return chunk

    def close(self) -> None:
        for pipe in (self._inbox, self._outbox):
            if not pipe.closed.is_set():
                pipe.closed.set()
                pipe.chunks.put(_CLOSED)


def memory_pipe(timeout_ms: int = 1000) -> tuple[MemoryTransport, MemoryTransport]:
    a_to_b, b_to_a = _Pipe(), _Pipe()
    return (MemoryTransport(b_to_a, a_to_b, timeout_ms),
            MemoryTransport(a_to_b, b_to_a, timeout_ms))


class FramedLink:
    """Frame-level view of a transport; partial frames never leak out."""

    def __init__(self, transport: Transport):
        self.transport = transport
        self._decoder = FrameDecoder()
        self._pending: list[Frame | FrameError] = []

    def send(self, frame: Frame) -> None:
        self.transport.write(encode_frame(frame))

    def recv(self, timeout_ms: int | None = None) -> Frame | FrameError:
        if timeout_ms is None:
            timeout_ms = self.transport.timeout_ms
        deadline = time.monotonic() + timeout_ms / 1000.0
        while not self._pending:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"no complete frame within {timeout_ms} ms")
            self._pending.extend(self._decoder.feed(
                self.transport.read(max(1, int(remaining * 1000)))))
        return self._pending.pop(0)


# --- PC side ---------------------------------------------------------------

def send_assignment(link: FramedLink, agent_id: int, channel: int) -> None:
    link.send(Frame(MsgType.ASSIGN_CHANNEL, agent_id, bytes([channel])))


def await_result(link: FramedLink, agent_id: int, timeout_ms: int | None = None) -> int:
    """ACK bit for ``agent_id``. A timeout counts as no-ACK and is logged."""
    if timeout_ms is None:
        timeout_ms = link.transport.timeout_ms
    deadline = time.monotonic() + timeout_ms / 1000.0
    while True:
        remaining = int((deadline - time.monotonic()) * 1000)
        try:
            if remaining <= 0:
                raise TimeoutError()
            msg = link.recv(remaining)
        except TimeoutError:
            log.warning("agent %d: TX_RESULT timeout after %d ms, treating as no-ACK",
                        agent_id, timeout_ms)
            return 0
        if isinstance(msg, FrameError):
            log.warning("agent %d: dropped corrupt frame (%s)", agent_id, msg.code.name)
            continue
        if msg.msg_type == MsgType.TX_RESULT and msg.agent_id == agent_id \
                and len(msg.payload) == 1:
            return 1 if msg.payload[0] else 0
        log.warning("agent %d: ignoring unexpected frame type 0x%02x",
                    agent_id, msg.msg_type)


def coordinator_step(agent, link: FramedLink, schedule: EpsilonSchedule, episode: int,
                     timeout_ms: int | None = None) -> Transition:
    """Assign an epsilon-greedy channel to one device and turn its reply into a Transition.

    ``agent`` is a ``sim.AgentState``; its network and policy stream are used.
    """
    action = select_action(agent.net, agent.state, schedule.at(episode), agent.rng)
    send_assignment(link, agent.agent_id, action)
    ack = await_result(link, agent.agent_id, timeout_ms)
    return Transition(agent.state, action, ack, ack)


class HilChannel:
    """``sim.SlotChannel`` that talks to one device per agent over framed links."""

    def __init__(self, links: list[FramedLink], timeout_ms: int | None = None):
        self.links = links
        self.timeout_ms = timeout_ms

    def exchange(self, actions):
        for i, (link, a) in enumerate(zip(self.links, actions)):
            send_assignment(link, i, a)
        return [await_result(link, i, self.timeout_ms) for i, link in enumerate(self.links)]


# --- device side -----------------------------------------------------------

class SlotAggregator:
    """Barrier that gathers every device's channel before resolving the slot."""

    def __init__(self, plan: ChannelPlan, link: LinkModel, num_devices: int,
                 rng: np.random.Generator):
        self.plan = plan
        self.link = link
        self.num_devices = num_devices
        self.rng = rng
        self._cond = threading.Condition()
        self._choices: dict[int, int] = {}
        self._results: dict[int, int] = {}
        self._generation = 0

    def submit(self, device: int, channel: int, timeout: float | None = None) -> int:
        with self._cond:
            gen = self._generation
            if device in self._choices:
                raise RuntimeError(f"device {device} submitted twice in one slot")
            self._choices[device] = channel
            if len(self._choices) == self.num_devices:
                order = sorted(self._choices)
                outcome = resolve_slot(self.plan, self.link,
                                       [self._choices[d] for d in order], self.rng)
                self._results = {d: feedback(outcome, k)[1] for k, d in enumerate(order)}
                self._choices = {}
                self._generation += 1
                self._cond.notify_all()
            elif not self._cond.wait_for(lambda: self._generation != gen, timeout):
                raise TimeoutError("slot barrier timed out")
            return self._results[device]


def mock_device(plan: ChannelPlan, link: LinkModel, transport: Transport,
                rng: np.random.Generator | None = None,
                aggregator: SlotAggregator | None = None, device_id: int = 0) -> None:
    """Serve one simulated end device until the transport closes.

    With no ``aggregator`` the device resolves each slot alone using ``rng``.
    """
    if aggregator is None:
        if rng is None:
            raise ValueError("a standalone mock device needs an rng")
        aggregator = SlotAggregator(plan, link, 1, rng)
        device_id = 0
    framed = FramedLink(transport)
    while True:
        try:
            msg = framed.recv(timeout_ms=3_600_000)
        except (TransportError, TimeoutError):
            return
        try:
            if isinstance(msg, FrameError):
                framed.send(Frame(MsgType.ERROR, 0, bytes([msg.code])))
            elif msg.version != VERSION:
                framed.send(Frame(MsgType.ERROR, msg.agent_id, bytes([ErrorCode.BAD_VERSION])))
            elif msg.msg_type == MsgType.PING:
                framed.send(Frame(MsgType.PONG, msg.agent_id, msg.payload))
            elif msg.msg_type == MsgType.ASSIGN_CHANNEL:
                if len(msg.payload) != 1 or msg.payload[0] >= plan.num_channels:
                    framed.send(Frame(MsgType.ERROR, msg.agent_id,
                                      bytes([ErrorCode.BAD_PAYLOAD])))
                    continue
                ack = aggregator.submit(device_id, msg.payload[0])
                framed.send(Frame(MsgType.TX_RESULT, msg.agent_id, bytes([ack])))
            else:
                framed.send(Frame(MsgType.ERROR, msg.agent_id, bytes([ErrorCode.UNKNOWN_TYPE])))
        except TransportError:
            return


class MockTestbed:
    """N mock devices on background threads sharing one slot aggregator."""

    def __init__(self, plan: ChannelPlan, link: LinkModel, num_devices: int,
                 rng: np.random.Generator, timeout_ms: int = 5000):
        self.aggregator = SlotAggregator(plan, link, num_devices, rng)
        self.links: list[FramedLink] = []
        self._device_ends: list[Transport] = []
        self._threads: list[threading.Thread] = []
        for d in range(num_devices):
            pc_end, dev_end = memory_pipe(timeout_ms)
            th = threading.Thread(target=mock_device, daemon=True, name=f"mock-ed-{d}",
                                  args=(plan, link, dev_end),
                                  kwargs={"aggregator": self.aggregator, "device_id": d})
            th.start()
            self.links.append(FramedLink(pc_end))
            self._device_ends.append(dev_end)
            self._threads.append(th)

    def channel(self, timeout_ms: int | None = None) -> HilChannel:
        return HilChannel(self.links, timeout_ms)

    def close(self) -> None:
        for link in self.links:
            link.transport.close()
        for th in self._threads:
            th.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_training_hil(run, timeout_ms: int = 5000):
    """``sim.run_training`` with every slot routed through mock devices."""
    from .sim import ENV_TRAIN, derive_rng, run_training

    with MockTestbed(run.plan, run.link, run.num_agents,
                     derive_rng(run.seed, ENV_TRAIN), timeout_ms) as bed:
        return run_training(run, channel=bed.channel())
