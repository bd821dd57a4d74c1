"""Framed wire protocol and the two transports that carry it.

Frame layout (all integers little-endian)::

    magic "SPLW" | version u8 | msg_type u8 | client_id u16 | round_id u32 |
    payload_len u32 | payload

Tensor payloads use ``rank u8 | dims u32 x rank | dtype u8 | raw data`` with
dtype 1 = float32, 2 = float64, 3 = uint8. A FeatureMap payload is the
feature tensor followed by a (b, 1) uint8 label tensor; a CutGradient payload
is one tensor; Control and Metrics payloads are UTF-8 JSON objects.
"""
from __future__ import annotations

import base64
import json
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    DuplicateFrameError,
    LengthMismatchError,
    PayloadError,
    ProtocolError,
    RoundAbortError,
    TruncatedFrameError,
    UnknownMessageTypeError,
)
from .model import CutActivation

MAGIC = b"SPLW"
VERSION = 1
HEADER = struct.Struct("<4sBBHII")
HEADER_SIZE = HEADER.size  # 16
MAX_PAYLOAD = 1 << 30


class MsgType(IntEnum):
    FEATURE_MAP = 1
    CUT_GRADIENT = 2
    CONTROL = 3
    METRICS = 4


WIRE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    client_id: int
    round_id: int
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.client_id < 1 << 16:
            raise ProtocolError(f"client_id {self.client_id} does not fit in u16")
        if not 0 <= self.round_id < 1 << 32:
            raise ProtocolError(f"round_id {self.round_id} does not fit in u32")
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        object.__setattr__(self, "payload", bytes(self.payload))


def encode(env: Envelope) -> bytes:
    if len(env.payload) > MAX_PAYLOAD:
        raise LengthMismatchError(f"payload of {len(env.payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, VERSION, env.msg_type, env.client_id, env.round_id,
                       len(env.payload)) + env.payload


def parse_header(head: bytes):
    """Validate a 16-byte header; returns (msg_type, client_id, round_id, payload_len)."""
    if head[:4] != MAGIC[:len(head[:4])]:
        raise BadMagicError(f"bad magic {head[:4]!r}")
    if len(head) < HEADER_SIZE:
        raise TruncatedFrameError(f"frame of {len(head)} bytes is shorter than the header")
    _, version, msg_type, client_id, round_id, length = HEADER.unpack(head[:HEADER_SIZE])
    if version != VERSION:
        raise BadVersionError(f"unsupported protocol version {version}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise UnknownMessageTypeError(f"unknown message type {msg_type}") from None
    if length > MAX_PAYLOAD:
        raise LengthMismatchError(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return msg_type, client_id, round_id, length


def decode(frame: bytes) -> Envelope:
    frame = bytes(frame)
    msg_type, client_id, round_id, length = parse_header(frame[:HEADER_SIZE])
    body = len(frame) - HEADER_SIZE
    if body < length:
        raise TruncatedFrameError(f"payload has {body} of {length} declared bytes")
    if body > length:
        raise LengthMismatchError(f"{body - length} bytes after the declared payload")
    return Envelope(msg_type, client_id, round_id, frame[HEADER_SIZE:])


# ---------------------------------------------------------------------------
# payloads

def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ProtocolError(f"no wire encoding for dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ProtocolError("tensor rank exceeds 255")
    head = struct.pack(f"<B{arr.ndim}IB", arr.ndim, *arr.shape, code)
    return head + np.ascontiguousarray(arr, dtype=WIRE_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0):
    """Parse one tensor at ``offset``; returns (array, next offset)."""
    if offset + 1 > len(buf):
        raise PayloadError("missing tensor rank")
    rank = buf[offset]
    end_head = offset + 1 + 4 * rank + 1
    if end_head > len(buf):
        raise PayloadError("tensor header truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 1)
    code = buf[end_head - 1]
    if code not in WIRE_DTYPES:
        raise PayloadError(f"unknown tensor dtype code {code}")
    dtype = WIRE_DTYPES[code]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if end_head + nbytes > len(buf):
        raise PayloadError(f"tensor data truncated ({len(buf) - end_head} of {nbytes} bytes)")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=end_head).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=False), end_head + nbytes


def tensor_wire_size(shape, itemsize: int = 4) -> int:
    n = 1
    for d in shape:
        n *= d
    return 2 + 4 * len(shape) + n * itemsize


def feature_envelope(act: CutActivation) -> Envelope:
    payload = encode_tensor(act.features) + encode_tensor(act.labels.astype(np.uint8))
    return Envelope(MsgType.FEATURE_MAP, act.client_id, act.round_id, payload)


def gradient_envelope(client_id: int, round_id: int, grad: np.ndarray) -> Envelope:
    return Envelope(MsgType.CUT_GRADIENT, client_id, round_id, encode_tensor(grad))


def json_envelope(msg_type: MsgType, client_id: int, round_id: int, body: dict) -> Envelope:
    raw = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return Envelope(msg_type, client_id, round_id, raw)


def control(client_id: int, round_id: int = 0, **body) -> Envelope:
    return json_envelope(MsgType.CONTROL, client_id, round_id, body)


def decode_payload(env: Envelope):
    """Typed view of a payload: CutActivation, ndarray, or dict."""
    buf = env.payload
    if env.msg_type == MsgType.FEATURE_MAP:
        feats, pos = decode_tensor(buf)
        labels, pos = decode_tensor(buf, pos)
        if pos != len(buf):
            raise PayloadError("trailing bytes after feature map")
        try:
            return CutActivation(feats, labels, env.client_id, env.round_id)
        except ValueError as exc:
            raise PayloadError(f"invalid feature map: {exc}") from None
    if env.msg_type == MsgType.CUT_GRADIENT:
        grad, pos = decode_tensor(buf)
        if pos != len(buf):
            raise PayloadError("trailing bytes after cut gradient")
        return grad
    try:
        body = json.loads(buf.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise PayloadError(f"invalid JSON payload: {exc}") from None
    if not isinstance(body, dict):
        raise PayloadError("JSON payload must be an object")
    return body


def tensor_to_text(arr: np.ndarray) -> str:
    return base64.b64encode(encode_tensor(arr)).decode("ascii")


def tensor_from_text(text: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError):
        raise PayloadError("bad base64 tensor") from None
    arr, pos = decode_tensor(raw)
    if pos != len(raw):
        raise PayloadError("trailing bytes after tensor")
    return arr.copy()


# ---------------------------------------------------------------------------
# endpoints

class ServerEndpoint:
    """Server side of either transport: one inbox fed by every client link."""

    def __init__(self):
        self.inbox: queue.Queue = queue.Queue()
        self._senders: dict = {}
        self._lock = threading.Lock()

    def register(self, client_id: int, sender) -> None:
        with self._lock:
            if client_id in self._senders:
                raise DuplicateFrameError(f"client {client_id} registered twice")
            self._senders[client_id] = sender

    @property
    def clients(self) -> list:
        with self._lock:
            return sorted(self._senders)

    def send(self, client_id: int, env: Envelope) -> None:
        with self._lock:
            sender = self._senders.get(client_id)
        if sender is None:
            raise ProtocolError(f"no link to client {client_id}")
        sender(encode(env))

    def recv(self, timeout: float | None = None) -> Envelope:
        try:
            item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no frame before timeout") from None
        if isinstance(item, Exception):
            raise item
        return decode(item)

    def wait_for_clients(self, expected, timeout: float) -> list:
        """Consume hello frames until every expected client has announced itself."""
        expected = set(expected)
        seen: set = set()
        deadline = time.monotonic() + timeout
        while seen != expected:
            left = deadline - time.monotonic()
            try:
                env = self.recv(max(left, 0))
            except TimeoutError:
                raise RoundAbortError(0, expected - seen) from None
            if env.msg_type != MsgType.CONTROL or decode_payload(env).get("op") != "hello":
                raise ProtocolError(f"expected hello from clients, got {env.msg_type.name}")
            if env.client_id not in expected or env.client_id in seen:
                raise ProtocolError(f"unexpected hello from client {env.client_id}")
            seen.add(env.client_id)
        return sorted(seen)

    def close(self) -> None:
        pass


class ClientEndpoint:
    """Client side of the in-process transport."""

    def __init__(self, client_id: int, to_server: queue.Queue, from_server: queue.Queue):
        self.client_id = client_id
        self._out = to_server
        self._in = from_server

    def send(self, env: Envelope) -> None:
        self._out.put(encode(env))

    def recv(self, timeout: float | None = None) -> Envelope:
        try:
            return decode(self._in.get(timeout=timeout))
        except queue.Empty:
            raise TimeoutError("no frame before timeout") from None

    def close(self) -> None:
        pass


def inprocess_links(server: ServerEndpoint, client_ids) -> dict:
    """Queue-backed links for ``client_ids``; returns their client endpoints."""
    ends = {}
    for cid in client_ids:
        down: queue.Queue = queue.Queue()
        server.register(cid, down.put)
        ends[cid] = ClientEndpoint(cid, server.inbox, down)
    return ends


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes | None:
    """One complete frame from a stream, or None on a clean end of stream."""
    head = _recv_exact(sock, HEADER_SIZE)
    if not head:
        return None
    _, _, _, length = parse_header(head)
    body = _recv_exact(sock, length)
    if len(body) != length:
        raise TruncatedFrameError(f"stream ended after {len(body)} of {length} payload bytes")
    return head + body


class SocketServerEndpoint(ServerEndpoint):
    """TCP listener; one reader thread per connection feeds the shared inbox."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        super().__init__()
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()[:2]
        self._conns: list = []
        self._closed = threading.Event()
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()

    def _reader(self, conn: socket.socket):
        send_lock = threading.Lock()

        def sender(frame: bytes):
            with send_lock:
                conn.sendall(frame)

        registered = False
        try:
            while True:
                frame = read_frame(conn)
                if frame is None:
                    return
                if not registered:
                    env = decode(frame)
                    self.register(env.client_id, sender)
                    registered = True
                self.inbox.put(frame)
        except (ProtocolError, OSError) as exc:
            if not self._closed.is_set():
                self.inbox.put(exc if isinstance(exc, ProtocolError) else ProtocolError(str(exc)))

    def close(self) -> None:
        self._closed.set()
        self._listener.close()
        for c in self._conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()


class SocketClientEndpoint:
    def __init__(self, client_id: int, host: str, port: int, connect_timeout: float = 30.0):
        self.client_id = client_id
        deadline = time.monotonic() + connect_timeout
        while True:
            try:
                self._sock = socket.create_connection((host, port), timeout=connect_timeout)
                break
            except ConnectionRefusedError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
        self._sock.settimeout(None)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, env: Envelope) -> None:
        self._sock.sendall(encode(env))

    def recv(self, timeout: float | None = None) -> Envelope:
        self._sock.settimeout(timeout)
        try:
            frame = read_frame(self._sock)
        except socket.timeout:
            raise TimeoutError("no frame before timeout") from None
        finally:
            self._sock.settimeout(None)
        if frame is None:
            raise ConnectionError("server closed the connection")
        return decode(frame)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


# ---------------------------------------------------------------------------
# barrier

def round_rendezvous(endpoint: ServerEndpoint, expected_ids, round_id: int, timeout: float,
                     received: dict | None = None) -> list:
    """Block until one FeatureMap per expected client for ``round_id`` arrived.

    ``received`` carries frames already collected by an earlier, aborted
    attempt at the same round. Returns activations sorted by client id.
    """
    expected = set(expected_ids)
    got = {} if received is None else received
    deadline = time.monotonic() + timeout
    while expected - got.keys():
        left = deadline - time.monotonic()
        try:
            if left <= 0:
                raise TimeoutError
            env = endpoint.recv(left)
        except TimeoutError:
            raise RoundAbortError(round_id, expected - got.keys()) from None
        if env.msg_type == MsgType.CONTROL:
            body = decode_payload(env)
            if body.get("op") == "error":
                raise ProtocolError(f"client {env.client_id} failed: {body.get('message')}")
            continue
        if env.msg_type != MsgType.FEATURE_MAP:
            raise ProtocolError(f"unexpected {env.msg_type.name} from client {env.client_id}")
        if env.client_id not in expected:
            raise ProtocolError(f"feature map from unexpected client {env.client_id}")
        if env.round_id != round_id:
            raise ProtocolError(
                f"client {env.client_id} sent round {env.round_id} while collecting round {round_id}"
            )
        if env.client_id in got:
            raise DuplicateFrameError(f"second feature map from client {env.client_id} in round {round_id}")
        got[env.client_id] = decode_payload(env)
    return [got[c] for c in sorted(got)]
