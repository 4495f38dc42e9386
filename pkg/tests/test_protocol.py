import socket
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ringrl.dist import protocol as proto
from ringrl.rl_core import Transition


def random_transitions(rng, n):
    out = []
    for _ in range(n):
        mask = rng.random(8) < 0.5
        mask[rng.integers(8)] = True
        a = int(rng.choice(np.flatnonzero(mask))) + 1
        out.append(Transition(rng.normal(0, 10, 18), a, -float(rng.random() * 3), -float(rng.random() * 50),
                              rng.normal(0, 10, 18), bool(rng.random() < 0.5), mask, float(rng.integers(1, 30)) / 2))
    return out


def same_transitions(a, b):
    return all(np.array_equal(x.state, y.state) and x.action == y.action
               and x.old_log_prob == y.old_log_prob and x.reward == y.reward
               and np.array_equal(x.next_state, y.next_state) and x.terminal == y.terminal
               and np.array_equal(np.asarray(x.mask, bool), y.mask) and x.dt == y.dt
               for x, y in zip(a, b)) and len(a) == len(b)


def test_heartbeat_frame_layout():
    frame = proto.encode(proto.ProtocolMessage(proto.Tag.HEARTBEAT))
    # magic 4 + version 1 + tag 1 + length 4 + crc 4
    assert len(frame) == 14
    assert frame[:4] == b"RBRL" and frame[4] == 1 and frame[5] == 0x04
    assert frame[6:10] == b"\x00\x00\x00\x00"
    assert frame[10:] == struct.pack("<I", zlib.crc32(b""))


def test_transition_record_size():
    assert proto.TRANSITION_DTYPE.itemsize == 18 * 8 + 1 + 8 + 8 + 18 * 8 + 1 + 1 + 8


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(list(proto.Tag)), st.binary(max_size=512))
def test_roundtrip_any_payload(tag, payload):
    msg = proto.ProtocolMessage(tag, payload)
    assert proto.decode(proto.encode(msg)) == msg


def test_snapshot_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    a, c = rng.normal(size=1000), rng.normal(size=300)
    a[3] = np.nextafter(0.0, 1.0)
    snap = proto.parse_snapshot(proto.decode(proto.encode(
        proto.snapshot_message(proto.PolicySnapshot(2 ** 40 + 3, a, c)))).payload)
    assert snap.version == 2 ** 40 + 3
    assert snap.actor.tobytes() == a.tobytes() and snap.critic.tobytes() == c.tobytes()


def test_experience_roundtrip_bit_exact():
    rng = np.random.default_rng(1)
    trs = random_transitions(rng, 50)
    msg = proto.experience_message(proto.ExperienceBatch(7, 12, trs))
    assert len(msg.payload) == 16 + 50 * 315
    back = proto.parse_experience(proto.decode(proto.encode(msg)).payload)
    assert back.worker_id == 7 and back.version == 12
    assert same_transitions(trs, back.transitions)
    assert back.mean_reward == pytest.approx(np.mean([t.reward for t in trs]))
    assert back.length == 50


def test_hello_roundtrip():
    h = proto.WorkerHello(3, 4, 2 ** 63 + 5)
    assert proto.parse_hello(proto.hello_message(h).payload) == h
    with pytest.raises(proto.ProtocolError):
        proto.parse_hello(b"\x00" * 15)


@pytest.mark.parametrize("mutate", ["magic", "version", "tag", "length_short", "length_long", "crc",
                                    "payload", "truncate", "extra"])
def test_corrupted_frames_rejected(mutate):
    frame = bytearray(proto.encode(proto.ProtocolMessage(proto.Tag.EXPERIENCE_PUSH, b"abcdefgh")))
    if mutate == "magic":
        frame[0] ^= 0xFF
    elif mutate == "version":
        frame[4] = 9
    elif mutate == "tag":
        frame[5] = 0x77
    elif mutate == "length_short":
        frame[6:10] = struct.pack("<I", 4)
    elif mutate == "length_long":
        frame[6:10] = struct.pack("<I", 400)
    elif mutate == "crc":
        frame[-1] ^= 1
    elif mutate == "payload":
        frame[12] ^= 0x10
    elif mutate == "truncate":
        frame = frame[:-3]
    elif mutate == "extra":
        frame += b"\x00"
    with pytest.raises(proto.ProtocolError):
        proto.decode(bytes(frame))


def test_bad_experience_payloads_rejected():
    rng = np.random.default_rng(2)
    msg = proto.experience_message(proto.ExperienceBatch(0, 0, random_transitions(rng, 2)))
    with pytest.raises(proto.ProtocolError):
        proto.parse_experience(msg.payload[:-1])
    with pytest.raises(proto.ProtocolError):
        proto.parse_experience(b"\x00" * 5)
    bad = bytearray(msg.payload)
    bad[16 + 144] = 0  # action byte of the first record
    with pytest.raises(proto.ProtocolError):
        proto.parse_experience(bytes(bad))
    with pytest.raises(proto.ProtocolError):
        proto.parse_snapshot(b"\x01\x00")


def test_socket_stream_framing():
    a, b = socket.socketpair()
    try:
        msgs = [proto.ProtocolMessage(proto.Tag.HEARTBEAT),
                proto.ProtocolMessage(proto.Tag.SHUTDOWN, b"bye")]
        for m in msgs:
            proto.send_message(a, m)
        assert [proto.read_message(b) for _ in msgs] == msgs
        a.close()
        with pytest.raises(ConnectionError):
            proto.read_message(b)
    finally:
        b.close()


def test_staleness_boundary():
    assert proto.staleness_filter(5, 6, 1)
    assert not proto.staleness_filter(4, 6, 1)
    assert proto.staleness_filter(0, 10 ** 6, float("inf"))
    assert proto.staleness_filter(6, 6, 0)
