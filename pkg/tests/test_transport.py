from __future__ import annotations

import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from carfl.config import RunConfig
from carfl.experiment import build_setup
from carfl.federation import run_training
from carfl.transport import (
    ERROR,
    EXIT_CONNECT,
    EXIT_DISCONNECT,
    EXIT_OK,
    GLOBAL_MODEL,
    HELLO,
    INIT,
    LOCAL_MODEL,
    METRICS,
    MSG_NAMES,
    SHUTDOWN,
    BadMagicError,
    BadVersionError,
    CodecError,
    Message,
    OversizeFrameError,
    PayloadError,
    TrailingBytesError,
    TransportError,
    TruncatedFrameError,
    UnknownTypeError,
    decode_message,
    decode_tensors,
    encode_message,
    encode_tensors,
    json_message,
    model_from_tensors,
    model_message,
    parse_model_message,
    recv_message,
    send_message,
    serve_aggregator,
    serve_client,
)

from conftest import tensors_equal
from netutil import run_networked


def test_shutdown_frame_bytes():
    assert encode_message(Message(SHUTDOWN)) == b"FCAR\x01\x06\x00\x00\x00\x00"


def test_header_is_big_endian_length():
    frame = encode_message(Message(ERROR, b"x" * 258))
    assert frame[6:10] == b"\x00\x00\x01\x02"


def test_tensor_payload_byte_layout():
    buf = encode_tensors([np.array([[1.5, -2.0]])])
    expected = struct.pack("<III", 1, 2, 1) + struct.pack("<I", 2) + struct.pack("<dd", 1.5, -2.0)
    assert buf == expected


def test_zero_tensor_round_trip():
    t = np.zeros((2, 2))
    assert np.array_equal(decode_tensors(encode_tensors([t]))[0], t)


@given(st.lists(arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4)),
                max_size=4))
def test_tensor_round_trip_is_bitwise(tensors):
    back = decode_tensors(encode_tensors(tensors))
    assert len(back) == len(tensors)
    for a, b in zip(tensors, back):
        assert a.shape == b.shape and a.tobytes() == b.tobytes()


@given(st.sampled_from(sorted(MSG_NAMES)), st.binary(max_size=64))
def test_frame_round_trip(msg_type, payload):
    msg = Message(msg_type, payload)
    assert decode_message(encode_message(msg)) == msg


def test_distinct_codec_errors():
    good = encode_message(Message(METRICS, b"{}"))
    cases = [
        (b"XXXX" + good[4:], BadMagicError),
        (good[:4] + b"\x02" + good[5:], BadVersionError),
        (good[:5] + b"\x09" + good[6:], UnknownTypeError),
        (good[:-1], TruncatedFrameError),
        (good[:7], TruncatedFrameError),
        (good + b"\x00", TrailingBytesError),
    ]
    for frame, err in cases:
        with pytest.raises(err):
            decode_message(frame)
    with pytest.raises(OversizeFrameError):
        decode_message(good, max_payload=1)
    with pytest.raises(OversizeFrameError):
        encode_message(Message(ERROR, b"abc"), max_payload=2)
    kinds = {BadMagicError, BadVersionError, UnknownTypeError, TruncatedFrameError,
             OversizeFrameError, TrailingBytesError}
    assert len(kinds) == 6 and all(issubclass(k, CodecError) for k in kinds)


@given(st.sampled_from([SHUTDOWN, METRICS, LOCAL_MODEL]), st.integers(0, 9),
       st.integers(0, 255), st.integers(0, 255))
def test_header_mutations_never_decode_silently(msg_type, pos, value, extra):
    payload = b"" if msg_type == SHUTDOWN else bytes([extra]) * 5
    frame = bytearray(encode_message(Message(msg_type, payload)))
    if frame[pos] == value:
        return
    frame[pos] = value
    try:
        msg = decode_message(bytes(frame), max_payload=1 << 16)
    except CodecError:
        return
    # Only the type byte can change into another valid frame; then it must
    # decode to exactly what the mutated bytes say.
    assert pos == 5 and value in MSG_NAMES
    assert encode_message(msg) == bytes(frame)


@given(st.binary(max_size=40))
def test_arbitrary_bytes_only_raise_codec_errors(buf):
    try:
        decode_message(buf)
    except CodecError:
        pass
    try:
        decode_tensors(buf)
    except CodecError:
        pass


def test_tensor_payload_rejects_inconsistent_lengths():
    buf = encode_tensors([np.ones((2, 3))])
    with pytest.raises(PayloadError):
        decode_tensors(buf[:-8])
    with pytest.raises(PayloadError):
        decode_tensors(buf + b"\x00")
    with pytest.raises(PayloadError):
        decode_tensors(struct.pack("<II", 1, 99))


def test_model_message_round_trip_and_shape_check():
    setup = build_setup(RunConfig({"data.n_per_class": 5}))
    msg = model_message(LOCAL_MODEL, 7, setup.init)
    rnd, tensors = parse_model_message(decode_message(encode_message(msg)))
    assert rnd == 7
    assert tensors_equal(model_from_tensors(setup.init, tensors).trainable(),
                         setup.init.trainable())
    with pytest.raises(PayloadError):
        model_from_tensors(setup.init, [t.T for t in tensors])
    with pytest.raises(PayloadError):
        model_from_tensors(setup.init, tensors[:-1])


def _rc(**kw):
    base = {"data.n_per_class": 40, "fed.T": 3, "fed.E": 1, "fed.lr": 0.05,
            "fed.parallel": False}
    return RunConfig({**base, **kw})


def _assert_same_run(net, ref):
    assert len(net.records) == len(ref.records)
    for a, b in zip(net.records, ref.records):
        assert a.to_dict(timing=False) == b.to_dict(timing=False)
        assert [c.grad_norms for c in a.clients] == [c.grad_norms for c in b.clients]
    assert tensors_equal(net.model.trainable(), ref.model.trainable())


@pytest.mark.parametrize("kw", [
    {"fed.m": 1},
    {"fed.m": 2, "dp.mode": "adaptive", "dp.c0": 0.1},
    {"fed.m": 3, "dp.mode": "fixed", "model.mode": "adapter_and_classifier",
     "model.pre_classifier": True},
])
def test_networked_run_equals_in_process_run(kw):
    rc = _rc(**kw)
    s = build_setup(rc)
    ref = run_training(s.fed, s.enc, s.train, s.val, s.init)
    net, codes = run_networked(rc)
    assert codes == [EXIT_OK] * rc["fed.m"]
    _assert_same_run(net, ref)


def _fake_client(port, script):
    """Connect as client 0 and follow ``script(sock)``."""
    sock = socket.create_connection(("127.0.0.1", port), timeout=10)
    send_message(sock, Message(HELLO, struct.pack("<I", 0)))
    assert recv_message(sock).msg_type == INIT
    return script(sock)


def _with_aggregator(rc, script, timeout_s=5.0):
    ready = threading.Event()
    port, out = [], {}

    def agg():
        try:
            out["result"] = serve_aggregator(rc, ("127.0.0.1", 0), timeout_s,
                                             on_listen=lambda p: (port.append(p), ready.set()))
        except Exception as exc:
            out["result"] = exc

    th = threading.Thread(target=agg)
    th.start()
    ready.wait()
    client_out = _fake_client(port[0], script)
    th.join()
    return out["result"], client_out


def test_wrong_tensor_shapes_get_error_frame_and_abort():
    rc = _rc(**{"fed.m": 1})

    def script(sock):
        msg = recv_message(sock)
        assert msg.msg_type == GLOBAL_MODEL
        bad = Message(LOCAL_MODEL, struct.pack("<I", 0) + encode_tensors([np.zeros((1, 1))]))
        send_message(sock, bad)
        return recv_message(sock)

    result, reply = _with_aggregator(rc, script)
    assert isinstance(result, TransportError) and "expected" in str(result)
    assert reply.msg_type == ERROR


def test_hello_phase_times_out_with_missing_clients():
    rc = _rc(**{"fed.m": 2})
    ready = threading.Event()
    port = []
    with pytest.raises(TransportError, match="1 of 2 clients"):
        th = threading.Thread(target=lambda: (ready.wait(), _hello_only(port[0])))
        th.start()
        serve_aggregator(rc, ("127.0.0.1", 0), 0.5,
                         on_listen=lambda p: (port.append(p), ready.set()))
    th.join()


def _hello_only(port):
    sock = socket.create_connection(("127.0.0.1", port), timeout=5)
    send_message(sock, Message(HELLO, struct.pack("<I", 0)))
    try:
        sock.recv(1)
    except OSError:
        pass
    sock.close()


def test_barrier_never_aggregates_a_partial_round():
    rc = _rc(**{"fed.m": 2})
    setup = build_setup(rc)
    ready = threading.Event()
    port, records, out = [], [], {}

    def agg():
        try:
            serve_aggregator(rc, ("127.0.0.1", 0), 1.0, on_record=records.append,
                             on_listen=lambda p: (port.append(p), ready.set()))
        except TransportError as exc:
            out["error"] = exc

    th = threading.Thread(target=agg)
    th.start()
    ready.wait()
    socks = []
    for cid in (0, 1):
        sock = socket.create_connection(("127.0.0.1", port[0]), timeout=5)
        send_message(sock, Message(HELLO, struct.pack("<I", cid)))
        socks.append(sock)
    for sock in socks:
        assert recv_message(sock).msg_type == INIT
        assert recv_message(sock).msg_type == GLOBAL_MODEL
    # Only client 0 answers; client 1 stays silent.
    send_message(socks[0], model_message(LOCAL_MODEL, 0, setup.init))
    stats = {"cid": 0, "loss": 0.0, "accuracy": 0.0, "delta_norm": 0.0, "clipped": False,
             "C": 1.0, "compute_ms": 0.0}
    send_message(socks[0], json_message(METRICS, stats))
    th.join()
    assert records == []
    assert "waiting for clients [1]" in str(out["error"])
    assert recv_message(socks[1]).msg_type == ERROR
    for sock in socks:
        sock.close()


def test_disconnect_mid_round_aborts_aggregator():
    rc = _rc(**{"fed.m": 1})

    def script(sock):
        recv_message(sock)
        sock.close()

    result, _ = _with_aggregator(rc, script)
    assert isinstance(result, TransportError) and "disconnected" in str(result)


def _fake_aggregator(script):
    server = socket.create_server(("127.0.0.1", 0))
    port = server.getsockname()[1]

    def run():
        conn, _ = server.accept()
        recv_message(conn)
        send_message(conn, json_message(INIT, {"client_id": 0, "config": _rc(**{"fed.m": 1})
                                               .to_dict()}))
        script(conn)
        conn.close()
        server.close()

    th = threading.Thread(target=run)
    th.start()
    return port, th


def test_client_exits_cleanly_on_immediate_shutdown():
    port, th = _fake_aggregator(lambda c: send_message(c, Message(SHUTDOWN)))
    assert serve_client(0, ("127.0.0.1", port), timeout_s=10) == EXIT_OK
    th.join()


def test_client_exits_nonzero_when_aggregator_vanishes_mid_round():
    setup = build_setup(_rc(**{"fed.m": 1}))

    def script(conn):
        send_message(conn, model_message(GLOBAL_MODEL, 0, setup.init))
        assert recv_message(conn).msg_type == LOCAL_MODEL

    port, th = _fake_aggregator(script)
    assert serve_client(0, ("127.0.0.1", port), timeout_s=10) == EXIT_DISCONNECT
    th.join()


def test_client_gives_up_after_bounded_retries():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    assert serve_client(0, ("127.0.0.1", port), timeout_s=1, backoff_s=0.01) == EXIT_CONNECT
