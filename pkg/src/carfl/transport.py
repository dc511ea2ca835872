"""Federation over TCP: frame codec, tensor payloads, aggregator and client.

Frame layout (header big-endian)::

    b"FCAR"  u8 version=1  u8 msg_type  u32 payload_len  payload

Tensor payload (little-endian)::

    u32 count, then per tensor: u32 rank, rank x u32 dims, values as f64

Model messages carry ``u32 round`` followed by a tensor payload. HELLO holds
the client id as ``u32``; INIT and METRICS are UTF-8 JSON objects; ERROR is
UTF-8 text; SHUTDOWN is empty.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from carfl.federation import (
    ClientRound,
    RoundRecord,
    TrainResult,
    aggregate,
    aggregation_weights,
    evaluate_model,
    local_update,
    make_clients,
)
from carfl.model import ModelParams

log = logging.getLogger(__name__)

MAGIC = b"FCAR"
VERSION = 1
HEADER = struct.Struct(">4sBBI")
HELLO, INIT, GLOBAL_MODEL, LOCAL_MODEL, METRICS, SHUTDOWN, ERROR = range(1, 8)
MSG_NAMES = {1: "HELLO", 2: "INIT", 3: "GLOBAL_MODEL", 4: "LOCAL_MODEL", 5: "METRICS",
             6: "SHUTDOWN", 7: "ERROR"}
DEFAULT_MAX_PAYLOAD = 256 * 1024 * 1024
MAX_RANK = 8


class CodecError(ValueError):
    pass


class BadMagicError(CodecError):
    pass


class BadVersionError(CodecError):
    pass


class UnknownTypeError(CodecError):
    pass


class TruncatedFrameError(CodecError):
    pass


class OversizeFrameError(CodecError):
    pass


class TrailingBytesError(CodecError):
    pass


class PayloadError(CodecError):
    """A frame is well formed but its payload does not parse for its type."""


class TransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class Message:
    msg_type: int
    payload: bytes = b""

    def __post_init__(self):
        if self.msg_type not in MSG_NAMES:
            raise UnknownTypeError(f"unknown message type {self.msg_type}")

    @property
    def name(self) -> str:
        return MSG_NAMES[self.msg_type]


def encode_message(msg: Message, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    if len(msg.payload) > max_payload:
        raise OversizeFrameError(f"payload of {len(msg.payload)} bytes exceeds cap {max_payload}")
    return HEADER.pack(MAGIC, VERSION, msg.msg_type, len(msg.payload)) + bytes(msg.payload)


def parse_header(head: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> tuple[int, int]:
    """Validate a 10-byte header; returns ``(msg_type, payload_len)``."""
    if len(head) < 4 or head[:4] != MAGIC:
        if len(head) < 4 and MAGIC.startswith(bytes(head)):
            raise TruncatedFrameError(f"frame truncated inside the magic ({len(head)} bytes)")
        raise BadMagicError(f"bad magic {bytes(head[:4])!r}")
    if len(head) < HEADER.size:
        raise TruncatedFrameError(f"header needs {HEADER.size} bytes, got {len(head)}")
    _, version, msg_type, length = HEADER.unpack_from(head)
    if version != VERSION:
        raise BadVersionError(f"unsupported protocol version {version}")
    if msg_type not in MSG_NAMES:
        raise UnknownTypeError(f"unknown message type {msg_type}")
    if length > max_payload:
        raise OversizeFrameError(f"declared payload {length} exceeds cap {max_payload}")
    return msg_type, length


def decode_message(buf: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Message:
    """Decode exactly one frame; extra bytes after it are an error."""
    buf = bytes(buf)
    msg_type, length = parse_header(buf[:HEADER.size], max_payload)
    end = HEADER.size + length
    if len(buf) < end:
        raise TruncatedFrameError(f"payload needs {length} bytes, got {len(buf) - HEADER.size}")
    if len(buf) > end:
        raise TrailingBytesError(f"{len(buf) - end} bytes after the frame")
    return Message(msg_type, buf[HEADER.size:end])


def encode_tensors(tensors: Sequence[np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.asarray(t, dtype=np.float64)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes, offset: int = 0) -> list[np.ndarray]:
    buf = bytes(buf)

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(buf):
            raise PayloadError(f"tensor payload truncated at byte {offset}")
        out = struct.unpack_from(fmt, buf, offset)
        offset += size
        return out

    (count,) = take("<I")
    tensors = []
    for _ in range(count):
        (rank,) = take("<I")
        if rank > MAX_RANK:
            raise PayloadError(f"tensor rank {rank} exceeds {MAX_RANK}")
        dims = take(f"<{rank}I")
        n = int(np.prod(dims, dtype=object)) if dims else 1
        if offset + 8 * n > len(buf):
            raise PayloadError(f"tensor of shape {dims} runs past the payload end")
        values = np.frombuffer(buf, dtype="<f8", count=n, offset=offset)
        offset += 8 * n
        tensors.append(values.astype(np.float64).reshape(dims))
    if offset != len(buf):
        raise PayloadError(f"{len(buf) - offset} unexpected bytes after the tensors")
    return tensors


def model_message(msg_type: int, round_index: int, model: ModelParams) -> Message:
    tensors = list(model.named_tensors().values())
    return Message(msg_type, struct.pack("<I", round_index) + encode_tensors(tensors))


def parse_model_message(msg: Message) -> tuple[int, list[np.ndarray]]:
    if len(msg.payload) < 4:
        raise PayloadError("model message lacks a round number")
    (round_index,) = struct.unpack_from("<I", msg.payload)
    return round_index, decode_tensors(msg.payload, 4)


def model_from_tensors(template: ModelParams, tensors: Sequence[np.ndarray]) -> ModelParams:
    """Place ``tensors`` into ``template``'s layout, checking count and shapes."""
    shapes = template.shapes()
    if len(tensors) != len(shapes):
        raise PayloadError(f"expected {len(shapes)} tensors, got {len(tensors)}")
    for (name, shape), t in zip(shapes.items(), tensors):
        if t.shape != shape:
            raise PayloadError(f"tensor {name} has shape {t.shape}, expected {shape}")
    return template.with_tensors(dict(zip(shapes, tensors)))


def json_message(msg_type: int, obj) -> Message:
    return Message(msg_type, json.dumps(obj, sort_keys=True).encode("utf-8"))


def parse_json(msg: Message):
    try:
        return json.loads(msg.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PayloadError(f"{msg.name} payload is not JSON: {exc}") from None


class ConnectionClosed(ConnectionError):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionClosed(f"peer closed the connection ({got}/{n} bytes read)")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def recv_message(sock: socket.socket, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Message:
    head = _recv_exact(sock, HEADER.size)
    msg_type, length = parse_header(head, max_payload)
    return Message(msg_type, _recv_exact(sock, length))


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address {text!r} is not host:port")
    return host or "127.0.0.1", int(port)


def _reader(cid: int, sock: socket.socket, inbox: queue.Queue) -> None:
    try:
        while True:
            inbox.put((cid, recv_message(sock)))
    except (OSError, CodecError) as exc:
        inbox.put((cid, exc))


def _send_quiet(sock: socket.socket, msg: Message) -> None:
    try:
        send_message(sock, msg)
    except OSError:
        pass


def serve_aggregator(rc, bind: tuple[str, int] = ("127.0.0.1", 0), timeout_s: float = 120.0,
                     on_listen: Optional[Callable[[int], None]] = None,
                     on_record=None, setup=None) -> TrainResult:
    """Accept ``fed.m`` clients and run the federation over the network.

    Args:
        rc: Run configuration shared with every client through INIT.
        bind: Listen address; port 0 picks a free port.
        timeout_s: Deadline for the HELLO phase and for each round.
        on_listen: Called with the bound port once the socket listens.
        on_record: Called with each finished :class:`RoundRecord`.
        setup: Prebuilt setup for ``rc`` (rebuilt when omitted).

    Raises:
        TransportError: A client disconnected, misbehaved or timed out.
    """
    from carfl.experiment import build_setup

    setup = setup or build_setup(rc)
    fed = setup.fed
    sizes = [len(c.shard) for c in make_clients(setup.train, fed)]
    weights = aggregation_weights(sizes, fed.aggregation)
    conns: dict[int, socket.socket] = {}
    server = socket.create_server(bind)
    t_start = time.perf_counter()
    try:
        server.settimeout(timeout_s)
        if on_listen is not None:
            on_listen(server.getsockname()[1])
        deadline = time.monotonic() + timeout_s
        while len(conns) < fed.m:
            server.settimeout(max(deadline - time.monotonic(), 1e-3))
            try:
                sock, addr = server.accept()
            except socket.timeout:
                raise TransportError(f"only {len(conns)} of {fed.m} clients connected "
                                     f"within {timeout_s:g} s") from None
            sock.settimeout(timeout_s)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            try:
                hello = recv_message(sock)
                if hello.msg_type != HELLO or len(hello.payload) != 4:
                    raise PayloadError(f"expected HELLO, got {hello.name}")
                (cid,) = struct.unpack("<I", hello.payload)
                if cid >= fed.m or cid in conns:
                    raise PayloadError(f"client id {cid} invalid or already connected")
            except (OSError, CodecError) as exc:
                log.warning("rejecting connection from %s: %s", addr, exc)
                _send_quiet(sock, Message(ERROR, str(exc).encode()))
                sock.close()
                continue
            conns[cid] = sock
        for cid, sock in conns.items():
            send_message(sock, json_message(INIT, {"client_id": cid, "config": rc.to_dict()}))
        return _run_rounds(conns, setup, weights, timeout_s, on_record, t_start)
    finally:
        for sock in conns.values():
            sock.close()
        server.close()


def _run_rounds(conns, setup, weights, timeout_s, on_record, t_start) -> TrainResult:
    fed = setup.fed
    inbox: queue.Queue = queue.Queue()
    for cid, sock in conns.items():
        sock.settimeout(None)
        threading.Thread(target=_reader, args=(cid, sock, inbox), daemon=True).start()

    def abort(reason: str):
        for sock in conns.values():
            _send_quiet(sock, Message(ERROR, reason.encode()))
        raise TransportError(reason)

    model = setup.init
    records, models = [], [model] if fed.keep_trace else []
    for t in range(fed.T):
        r0 = time.perf_counter()
        for sock in conns.values():
            send_message(sock, model_message(GLOBAL_MODEL, t, model))
        locals_: dict[int, ModelParams] = {}
        stats: dict[int, ClientRound] = {}
        deadline = time.monotonic() + timeout_s
        while len(locals_) < fed.m or len(stats) < fed.m:
            try:
                cid, item = inbox.get(timeout=max(deadline - time.monotonic(), 1e-3))
            except queue.Empty:
                missing = sorted(set(conns) - set(locals_))
                abort(f"round {t}: timed out after {timeout_s:g} s waiting for clients {missing}")
            if isinstance(item, Exception):
                abort(f"round {t}: client {cid} disconnected: {item}")
            try:
                if item.msg_type == LOCAL_MODEL:
                    rnd, tensors = parse_model_message(item)
                    if rnd != t:
                        raise PayloadError(f"LOCAL_MODEL for round {rnd} during round {t}")
                    locals_[cid] = model_from_tensors(model, tensors)
                elif item.msg_type == METRICS:
                    stats[cid] = ClientRound(**parse_json(item))
                elif item.msg_type == ERROR:
                    abort(f"round {t}: client {cid} reported: "
                          f"{item.payload.decode('utf-8', 'replace')}")
                else:
                    raise PayloadError(f"unexpected {item.name} from client {cid}")
            except (CodecError, TypeError) as exc:
                abort(f"round {t}: bad message from client {cid}: {exc}")
        a0 = time.perf_counter()
        order = sorted(locals_)
        model = aggregate([locals_[c] for c in order], weights)
        agg_ms = (time.perf_counter() - a0) * 1e3
        val_loss, val_acc = evaluate_model(model, setup.enc, setup.val)
        round_stats = [stats[c] for c in order]
        rec = RoundRecord(t, round_stats, val_loss, val_acc,
                          wall_ms=(time.perf_counter() - r0) * 1e3,
                          distributed_ms=max(s.compute_ms for s in round_stats) + agg_ms)
        records.append(rec)
        if fed.keep_trace:
            models.append(model)
        if on_record is not None:
            on_record(rec)
    for sock in conns.values():
        _send_quiet(sock, Message(SHUTDOWN))
    return TrainResult(model, records, [], (time.perf_counter() - t_start) * 1e3, models)


EXIT_OK = 0
EXIT_CONNECT = 10
EXIT_DISCONNECT = 11
EXIT_PROTOCOL = 12
EXIT_REMOTE_ERROR = 13


def connect_with_retry(address: tuple[str, int], attempts: int = 3,
                       backoff_s: float = 0.25, timeout_s: float = 120.0) -> socket.socket:
    last = None
    for k in range(attempts):
        try:
            sock = socket.create_connection(address, timeout=timeout_s)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            last = exc
            if k + 1 < attempts:
                time.sleep(backoff_s * 2 ** k)
    raise ConnectionError(f"cannot reach {address[0]}:{address[1]} after {attempts} "
                          f"attempts: {last}")


def serve_client(cid: int, address: tuple[str, int], timeout_s: float = 120.0,
                 attempts: int = 3, backoff_s: float = 0.25) -> int:
    """Run one federated client until SHUTDOWN; returns a process exit status."""
    from carfl.config import RunConfig
    from carfl.experiment import build_setup

    try:
        sock = connect_with_retry(address, attempts, backoff_s, timeout_s)
    except ConnectionError as exc:
        log.error("client %d: %s", cid, exc)
        return EXIT_CONNECT
    rounds = 0
    try:
        with sock, threadpool_limits(1):
            send_message(sock, Message(HELLO, struct.pack("<I", cid)))
            init = recv_message(sock)
            if init.msg_type == ERROR:
                log.error("client %d: rejected: %s", cid, init.payload.decode("utf-8", "replace"))
                return EXIT_REMOTE_ERROR
            if init.msg_type != INIT:
                raise PayloadError(f"expected INIT, got {init.name}")
            setup = build_setup(RunConfig(parse_json(init)["config"]))
            client = make_clients(setup.train, setup.fed)[cid]
            fingerprint = setup.enc.fingerprint()
            sock.settimeout(None)
            while True:
                msg = recv_message(sock)
                if msg.msg_type == SHUTDOWN:
                    log.info("client %d: shutdown after %d rounds", cid, rounds)
                    return EXIT_OK
                if msg.msg_type == ERROR:
                    log.error("client %d: aggregator error: %s", cid,
                              msg.payload.decode("utf-8", "replace"))
                    return EXIT_REMOTE_ERROR
                if msg.msg_type != GLOBAL_MODEL:
                    raise PayloadError(f"unexpected {msg.name}")
                t, tensors = parse_model_message(msg)
                model = model_from_tensors(setup.init, tensors)
                new, stats, client = local_update(client, model, setup.enc, setup.fed, t)
                if setup.enc.fingerprint() != fingerprint:
                    raise RuntimeError("frozen encoder changed during training")
                send_message(sock, model_message(LOCAL_MODEL, t, new))
                send_message(sock, json_message(METRICS, asdict(stats)))
                rounds += 1
    except CodecError as exc:
        log.error("client %d: protocol error after %d rounds: %s", cid, rounds, exc)
        return EXIT_PROTOCOL
    except OSError as exc:
        log.error("client %d: connection lost after %d rounds: %s", cid, rounds, exc)
        return EXIT_DISCONNECT
