import logging
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotdrl.dqn import EpsilonSchedule, Hyperparams
from iotdrl.env import ChannelPlan, LinkModel
from iotdrl.hil import (BadMagic, ChecksumMismatch, ErrorCode, Frame, FrameDecoder,
                        FramedLink, FrameError, MsgType, TrailingData, TransportError,
                        Truncated, await_result, coordinator_step, decode_frame,
                        encode_frame, memory_pipe, mock_device, run_training_hil,
                        send_assignment)
from iotdrl.sim import AgentState, RunState, run_training
from iotdrl.dqn import ReplayBuffer

from conftest import bias_net

GOLDEN_ASSIGN = bytes.fromhex("49540101000101" "1d")

frames = st.builds(Frame, st.integers(0, 255), st.integers(0, 255),
                   st.binary(max_size=255))


# --- codec -------------------------------------------------------------------

def test_golden_assign_channel_bytes():
    # 0x49^0x54 = 0x1d, then ^01 ^01 ^00 ^01 ^01 leaves 0x1d
    assert encode_frame(Frame(MsgType.ASSIGN_CHANNEL, 0, b"\x01")) == GOLDEN_ASSIGN


def test_ping_round_trip():
    f = Frame(MsgType.PING, 7)
    assert decode_frame(encode_frame(f)) == f


def test_oversized_payload_rejected():
    with pytest.raises(ValueError):
        encode_frame(Frame(MsgType.TX_RESULT, 0, bytes(256)))


@given(frames)
def test_round_trip_property(f):
    assert decode_frame(encode_frame(f)) == f


def test_payload_bit_flip_is_checksum_mismatch():
    raw = bytearray(encode_frame(Frame(MsgType.ASSIGN_CHANNEL, 0, b"\x01")))
    raw[6] ^= 0x04
    with pytest.raises(ChecksumMismatch):
        decode_frame(bytes(raw))


@settings(max_examples=300)
@given(frames, st.data())
def test_any_single_bit_flip_is_detected(f, data):
    raw = bytearray(encode_frame(f))
    bit = data.draw(st.integers(0, len(raw) * 8 - 1))
    raw[bit // 8] ^= 1 << (bit % 8)
    try:
        decoded = decode_frame(bytes(raw))
    except FrameError:
        return
    pytest.fail(f"corruption accepted as {decoded}")


def test_errors_are_distinguishable():
    good = encode_frame(Frame(MsgType.PONG, 1, b"ab"))
    with pytest.raises(Truncated):
        decode_frame(good[:-2])
    with pytest.raises(BadMagic):
        decode_frame(b"\x00\x01\x02\x03")
    with pytest.raises(TrailingData):
        decode_frame(good + b"\x00")
    codes = {Truncated.code, BadMagic.code, ChecksumMismatch.code, TrailingData.code}
    assert len(codes) == 4


def test_resync_after_three_garbage_bytes():
    f = Frame(MsgType.ASSIGN_CHANNEL, 1, b"\x02")
    assert decode_frame(b"\x00\xff\x49" + encode_frame(f)) == f


@settings(max_examples=300)
@given(frames, st.binary(max_size=64))
def test_resync_from_leading_garbage(f, garbage):
    assert decode_frame(garbage + encode_frame(f)) == f


@settings(max_examples=300)
@given(frames, st.binary(max_size=64), st.binary(max_size=64), st.integers(1, 17))
def test_stream_decoder_recovers_embedded_frame(f, before, after, chunk):
    stream = before + encode_frame(f) + after
    dec = FrameDecoder()
    got = []
    for i in range(0, len(stream), chunk):
        got.extend(x for x in dec.feed(stream[i:i + chunk]) if isinstance(x, Frame))
    assert f in got


def test_stream_decoder_splits_back_to_back_frames():
    fs = [Frame(MsgType.PING, i, bytes([i] * i)) for i in range(5)]
    dec = FrameDecoder()
    out = []
    for byte in b"".join(encode_frame(f) for f in fs):
        out.extend(dec.feed(bytes([byte])))
    assert out == fs


def test_stream_decoder_reports_corruption():
    raw = bytearray(encode_frame(Frame(MsgType.PING, 0, b"xyz")))
    raw[7] ^= 1
    out = FrameDecoder().feed(bytes(raw))
    assert any(isinstance(x, ChecksumMismatch) for x in out)


# --- coordinator -------------------------------------------------------------

def make_agent(q=(0.0, 1.0, 0.0), state=0):
    return AgentState(0, bias_net(list(q)), ReplayBuffer(10), np.random.default_rng(0),
                      np.random.default_rng(1), state=state)


def scripted_device(transport, reply_bit):
    link = FramedLink(transport)
    msg = link.recv(2000)
    link.send(Frame(MsgType.TX_RESULT, msg.agent_id, bytes([reply_bit])))


@pytest.mark.parametrize("bit", [1, 0])
def test_coordinator_maps_reply(bit):
    pc, dev = memory_pipe(timeout_ms=2000)
    th = threading.Thread(target=scripted_device, args=(dev, bit))
    th.start()
    t = coordinator_step(make_agent(state=1), FramedLink(pc), EpsilonSchedule(10), 10)
    th.join()
    assert (t.state, t.action, t.reward, t.next_state) == (1, 1, bit, bit)


def test_coordinator_timeout_is_no_ack(caplog):
    pc, _silent = memory_pipe(timeout_ms=50)
    with caplog.at_level(logging.WARNING, logger="iotdrl.hil"):
        t = coordinator_step(make_agent(), FramedLink(pc), EpsilonSchedule(10), 10)
    assert (t.reward, t.next_state) == (0, 0)
    assert any("timeout" in r.message for r in caplog.records)


def test_transport_failure_is_not_no_ack():
    pc, dev = memory_pipe(timeout_ms=500)
    dev.close()
    with pytest.raises(TransportError):
        coordinator_step(make_agent(), FramedLink(pc), EpsilonSchedule(10), 10)


def test_coordinator_skips_corrupt_reply():
    pc, dev = memory_pipe(timeout_ms=1000)
    bad = bytearray(encode_frame(Frame(MsgType.TX_RESULT, 0, b"\x01")))
    bad[6] ^= 0xFF
    dev.write(bytes(bad) + encode_frame(Frame(MsgType.TX_RESULT, 0, b"\x01")))
    assert await_result(FramedLink(pc), 0) == 1


# --- mock device -------------------------------------------------------------

@pytest.fixture
def device():
    pc, dev = memory_pipe(timeout_ms=2000)
    th = threading.Thread(target=mock_device,
                          args=(ChannelPlan(), LinkModel(0.0), dev, np.random.default_rng(0)),
                          daemon=True)
    th.start()
    link = FramedLink(pc)
    yield link
    pc.close()
    th.join(timeout=2)
    assert not th.is_alive()


def test_device_rejects_non_receivable_channel(device):
    send_assignment(device, 0, 0)
    assert await_result(device, 0) == 0


def test_device_acks_receivable_channel(device):
    send_assignment(device, 0, 1)
    assert await_result(device, 0) == 1


def test_device_answers_ping(device):
    device.send(Frame(MsgType.PING, 3, b"hi"))
    assert device.recv() == Frame(MsgType.PONG, 3, b"hi")


def test_device_reports_malformed_frame(device):
    raw = bytearray(encode_frame(Frame(MsgType.ASSIGN_CHANNEL, 0, b"\x01")))
    raw[6] ^= 0x10
    device.transport.write(bytes(raw))
    assert device.recv() == Frame(MsgType.ERROR, 0, bytes([ErrorCode.CHECKSUM_MISMATCH]))


def test_device_rejects_unknown_type_and_bad_channel(device):
    device.send(Frame(0x42, 1))
    assert device.recv() == Frame(MsgType.ERROR, 1, bytes([ErrorCode.UNKNOWN_TYPE]))
    device.send(Frame(MsgType.ASSIGN_CHANNEL, 1, b"\x09"))
    assert device.recv() == Frame(MsgType.ERROR, 1, bytes([ErrorCode.BAD_PAYLOAD]))


# --- transport transparency --------------------------------------------------

@pytest.mark.parametrize("seed, loss", [(1, 0.0), (4, 0.05), (9, 0.3)])
def test_hil_training_matches_in_process(seed, loss):
    def run():
        return RunState(hp=Hyperparams(episodes=40), link=LinkModel(loss), seed=seed)

    agents_a, direct = run_training(run())
    agents_b, via_hil = run_training_hil(run())
    assert [(m.successes, m.epsilon) for m in direct] == \
        [(m.successes, m.epsilon) for m in via_hil]
    for x, y in zip(agents_a, agents_b):
        assert all(np.array_equal(p, q) for p, q in zip(x.net.theta, y.net.theta))
