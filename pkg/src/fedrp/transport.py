"""Wire protocol: framing, 32-bit scalar payloads, byte-exact metering.

Frame layout (normative, little-endian throughout):

    msg_type : 1 byte   (1=SEED_ENVELOPE, 2=CLIENT_UPDATE, 3=SERVER_BROADCAST, 4=FULL_PARAMS)
    round    : 4 bytes  (uint32)
    client_id: 4 bytes  (uint32; 0xFFFFFFFF is the server)
    payload_len : 4 bytes (uint32)
    payload  : payload_len bytes

Vector payloads are IEEE-754 binary32 little-endian, 4 bytes per scalar.
Metering counts payload bytes only (headers excluded); seed envelopes go
to a separate category because the communication comparison excludes them.
The loopback and TCP transports share this codec.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
from dataclasses import dataclass, field

import numpy as np

SERVER_ID = 0xFFFFFFFF
HEADER = struct.Struct("<BIII")
_ENVELOPE_HEAD = struct.Struct("<III")


class MsgType(enum.IntEnum):
    SEED_ENVELOPE = 1
    CLIENT_UPDATE = 2
    SERVER_BROADCAST = 3
    FULL_PARAMS = 4


class CodecError(ValueError):
    """Base for malformed frames."""


class TruncatedFrameError(CodecError):
    pass


class UnknownTypeError(CodecError):
    pass


class LengthMismatchError(CodecError):
    pass


class EncodeError(ValueError):
    pass


class TransportClosedError(ConnectionError):
    """Peer went away; the round must abort (full participation is required)."""


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    round: int
    client_id: int
    payload: bytes

    @classmethod
    def from_vector(
        cls, msg_type: MsgType, round: int, client_id: int, values: np.ndarray
    ) -> "WireMessage":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise EncodeError("vector payloads must be 1-D")
        if values.size > 0xFFFFFFFE:
            raise EncodeError("vector too long for a 32-bit frame")
        if not np.all(np.isfinite(values)):
            raise EncodeError("vector entries must be finite")
        payload = values.astype("<f4").tobytes()
        return cls(msg_type=msg_type, round=round, client_id=client_id, payload=payload)

    def vector(self) -> np.ndarray:
        """Payload as float64 (values carry 32-bit precision)."""
        return np.frombuffer(self.payload, dtype="<f4").astype(np.float64)


def encode(msg: WireMessage) -> bytes:
    if len(msg.payload) > 0xFFFFFFFF:
        raise EncodeError("payload exceeds frame limit")
    return HEADER.pack(int(msg.msg_type), msg.round, msg.client_id, len(msg.payload)) + msg.payload


def decode(buf: bytes) -> WireMessage:
    """Inverse of encode; one exact frame, distinct errors per failure mode."""
    if len(buf) < HEADER.size:
        raise TruncatedFrameError(f"frame needs {HEADER.size} header bytes, got {len(buf)}")
    raw_type, round_, client_id, payload_len = HEADER.unpack_from(buf)
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise UnknownTypeError(f"unknown msg_type {raw_type}") from None
    end = HEADER.size + payload_len
    if len(buf) < end:
        raise TruncatedFrameError(f"payload declared {payload_len} bytes, frame has {len(buf) - HEADER.size}")
    if len(buf) > end:
        raise LengthMismatchError(f"{len(buf) - end} trailing bytes after declared payload")
    return WireMessage(msg_type=msg_type, round=round_, client_id=client_id, payload=buf[HEADER.size : end])


def encode_envelope_payload(sender: int, recipient: int, sealed: bytes) -> bytes:
    return _ENVELOPE_HEAD.pack(sender, recipient, len(sealed)) + sealed


def decode_envelope_payload(payload: bytes) -> tuple[int, int, bytes]:
    if len(payload) < _ENVELOPE_HEAD.size:
        raise TruncatedFrameError("envelope payload shorter than its header")
    sender, recipient, sealed_len = _ENVELOPE_HEAD.unpack_from(payload)
    if len(payload) != _ENVELOPE_HEAD.size + sealed_len:
        raise LengthMismatchError("envelope sealed length does not match payload")
    return sender, recipient, payload[_ENVELOPE_HEAD.size :]


# --- metering ---------------------------------------------------------------


@dataclass
class ByteMeter:
    per_round_up: int = 0
    per_round_down: int = 0
    cumulative: int = 0
    envelope_round: int = 0
    envelope_total: int = 0
    header_total: int = 0

    def start_round(self) -> None:
        self.per_round_up = 0
        self.per_round_down = 0
        self.envelope_round = 0

    def record(self, msg: WireMessage) -> None:
        size = len(msg.payload)
        self.header_total += HEADER.size
        if msg.msg_type == MsgType.SEED_ENVELOPE:
            self.envelope_round += size
            self.envelope_total += size
            return
        if msg.msg_type == MsgType.SERVER_BROADCAST:
            self.per_round_down += size
        else:  # CLIENT_UPDATE / FULL_PARAMS travel client -> server
            self.per_round_up += size
        self.cumulative += size


def meter(byte_meter: ByteMeter, msg: WireMessage) -> ByteMeter:
    byte_meter.record(msg)
    return byte_meter


# --- transports -------------------------------------------------------------


class LoopbackDuplex:
    """In-process reliable ordered channel; messages still pass the codec."""

    def __init__(self, inbox: "queue.Queue[bytes | None]", outbox: "queue.Queue[bytes | None]"):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    @classmethod
    def pair(cls) -> tuple["LoopbackDuplex", "LoopbackDuplex"]:
        a: queue.Queue = queue.Queue()
        b: queue.Queue = queue.Queue()
        return cls(a, b), cls(b, a)

    def send(self, msg: WireMessage) -> None:
        if self._closed:
            raise TransportClosedError("channel closed")
        self._outbox.put(encode(msg))

    def recv(self) -> WireMessage:
        item = self._inbox.get()
        if item is None:
            raise TransportClosedError("peer disconnected")
        return decode(item)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


class TcpDuplex:
    """The same frames over a connected socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def _recv_exact(self, count: int) -> bytes:
        chunks = []
        got = 0
        while got < count:
            try:
                chunk = self._sock.recv(count - got)
            except OSError as exc:
                raise TransportClosedError(f"socket error: {exc}") from exc
            if not chunk:
                raise TransportClosedError("peer disconnected")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def send(self, msg: WireMessage) -> None:
        try:
            self._sock.sendall(encode(msg))
        except OSError as exc:
            raise TransportClosedError(f"socket error: {exc}") from exc

    def recv(self) -> WireMessage:
        header = self._recv_exact(HEADER.size)
        _, _, _, payload_len = HEADER.unpack(header)
        payload = self._recv_exact(payload_len)
        return decode(header + payload)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


@dataclass
class ChannelSet:
    """Server-side and client-side endpoints for K clients, plus teardown."""

    server_side: list
    client_side: list
    _extra_close: list = field(default_factory=list)

    def close(self) -> None:
        for ch in (*self.server_side, *self.client_side):
            ch.close()
        for closer in self._extra_close:
            closer()


def open_channels(mode: str, num_clients: int, host: str = "127.0.0.1", port: int = 0) -> ChannelSet:
    """K bidirectional channels; clients connect in id order for both modes."""
    if mode == "loopback":
        server_side, client_side = [], []
        for _ in range(num_clients):
            a, b = LoopbackDuplex.pair()
            server_side.append(a)
            client_side.append(b)
        return ChannelSet(server_side=server_side, client_side=client_side)
    if mode != "tcp":
        raise ValueError(f"unknown transport mode {mode!r}")

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(num_clients)
    server_side, client_side = [], []
    addr = listener.getsockname()
    for _ in range(num_clients):
        # sequential connect/accept: accept order is client id order
        c = socket.create_connection(addr)
        s, _ = listener.accept()
        c.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        server_side.append(TcpDuplex(s))
        client_side.append(TcpDuplex(c))
    return ChannelSet(server_side=server_side, client_side=client_side, _extra_close=[listener.close])
