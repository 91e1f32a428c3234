"""Framed binary protocol shared by client and server.

Frame layout (big-endian)::

    magic "AAS1" | frame_type u8 | length u32 | payload

Handshake (pre-shared per-principal secret, no PKI)::

    C -> S  HELLO      principal_len u8 | principal | client_nonce (16) |
                       location_zone, application, device_id (each u16 len | UTF-8)
    S -> C  HELLO_ACK  session_id (16) | server_nonce (16)
    C -> S  ACK        HMAC(secret, "aas/client-proof" | HELLO | HELLO_ACK)
    S -> C  ACK        HMAC(secret, "aas/server-proof" | HELLO | HELLO_ACK)

Both sides then hold ``session_key = HMAC(secret, "aas/session" | client_nonce |
server_nonce | session_id)``. A replayed HELLO/ACK pair fails because the
server nonce is fresh on every attempt.

After the handshake every request frame (PUT/GET/DELETE/LIST) carries a merged
stream whose payload is a request body sealed under a session subkey; PUT is
followed by a STREAM frame holding the merged envelope. Responses are ACK,
STREAM (GET/LIST) or ERR (``code u16 | message``).
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import BinaryIO

from . import chaff, envelope
from .chaff import ChaffPolicy, MergedStream
from .envelope import DataKey
from .errors import (
    AuthenticationFailure,
    BadMagic,
    BadType,
    ConnectionLost,
    LengthMismatch,
    ProtocolError,
)
from .ledger import Op
from .session import DeclaredStamps

MAGIC = b"AAS1"
MAX_PAYLOAD = 16 * 1024 * 1024
HEADER = struct.Struct(">4sBI")
NONCE_SIZE = 16
PROOF_SIZE = 32


class FrameType(enum.IntEnum):
    HELLO = 1
    HELLO_ACK = 2
    PUT = 3
    GET = 4
    DELETE = 5
    LIST = 6
    STREAM = 7
    ACK = 8
    ERR = 9


REQUEST_OPS = {
    FrameType.PUT: Op.PUT,
    FrameType.GET: Op.GET,
    FrameType.DELETE: Op.DELETE,
    FrameType.LIST: Op.LIST,
}
OP_FRAMES = {v: k for k, v in REQUEST_OPS.items()}


@dataclass(frozen=True)
class Frame:
    frame_type: FrameType
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise LengthMismatch(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, int(frame.frame_type), len(frame.payload)) + bytes(frame.payload)


def _check_header(raw: bytes) -> tuple[FrameType, int]:
    magic, ftype, length = HEADER.unpack(raw)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    try:
        t = FrameType(ftype)
    except ValueError:
        raise BadType(f"unknown frame type {ftype}") from None
    if length > MAX_PAYLOAD:
        raise LengthMismatch(f"declared length {length} exceeds {MAX_PAYLOAD}")
    return t, length


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame occupying all of ``data``."""
    data = bytes(data)
    if len(data) < HEADER.size:
        raise LengthMismatch("buffer shorter than frame header")
    t, length = _check_header(data[:HEADER.size])
    if len(data) - HEADER.size != length:
        raise LengthMismatch(f"declared length {length}, {len(data) - HEADER.size} bytes present")
    return Frame(t, data[HEADER.size:])


def split_frames(data: bytes) -> tuple[list[bytes], bytes]:
    """Cut a byte stream into raw frames; returns ``(frames, leftover)``."""
    out = []
    pos = 0
    while len(data) - pos >= HEADER.size:
        _, length = _check_header(data[pos:pos + HEADER.size])
        end = pos + HEADER.size + length
        if end > len(data):
            break
        out.append(data[pos:end])
        pos = end
    return out, data[pos:]


def _read_exact(rfile: BinaryIO, n: int) -> bytes:
    buf = rfile.read(n)
    if buf is None or len(buf) != n:
        raise ConnectionLost(f"connection closed ({0 if not buf else len(buf)}/{n} bytes)")
    return buf


def read_frame(rfile: BinaryIO) -> Frame:
    head = rfile.read(HEADER.size)
    if not head:
        raise ConnectionLost("connection closed")
    if len(head) != HEADER.size:
        raise ConnectionLost("connection closed inside frame header")
    t, length = _check_header(head)
    return Frame(t, _read_exact(rfile, length) if length else b"")


def write_frame(wfile: BinaryIO, frame: Frame) -> None:
    wfile.write(encode_frame(frame))
    wfile.flush()


# -- handshake -------------------------------------------------------------

def _lp(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("field too long")
    return struct.pack(">H", len(raw)) + raw


@dataclass(frozen=True)
class Hello:
    principal: str
    client_nonce: bytes
    stamps: DeclaredStamps

    def encode(self) -> bytes:
        p = self.principal.encode("utf-8")
        if not 1 <= len(p) <= 255:
            raise ProtocolError("principal must be 1..255 bytes")
        return (struct.pack(">B", len(p)) + p + self.client_nonce + _lp(self.stamps.location_zone)
                + _lp(self.stamps.application) + _lp(self.stamps.device_id))

    @classmethod
    def decode(cls, data: bytes) -> "Hello":
        try:
            n = data[0]
            principal = data[1:1 + n].decode("utf-8")
            pos = 1 + n
            nonce = data[pos:pos + NONCE_SIZE]
            if len(nonce) != NONCE_SIZE:
                raise ValueError("short nonce")
            pos += NONCE_SIZE
            fields = []
            for _ in range(3):
                (ln,) = struct.unpack_from(">H", data, pos)
                if pos + 2 + ln > len(data):
                    raise ValueError("field runs past payload")
                fields.append(data[pos + 2:pos + 2 + ln].decode("utf-8"))
                pos += 2 + ln
            if pos != len(data):
                raise ValueError("trailing bytes")
        except (IndexError, struct.error, UnicodeDecodeError, ValueError) as exc:
            raise ProtocolError(f"malformed HELLO: {exc}") from None
        return cls(principal, nonce, DeclaredStamps(*fields))


def encode_hello_ack(session_id: bytes, server_nonce: bytes) -> bytes:
    return session_id + server_nonce


def decode_hello_ack(data: bytes) -> tuple[bytes, bytes]:
    if len(data) != 2 * NONCE_SIZE:
        raise ProtocolError("malformed HELLO_ACK")
    return data[:NONCE_SIZE], data[NONCE_SIZE:]


def proof(secret: bytes, role: bytes, hello: bytes, hello_ack: bytes) -> bytes:
    return hmac.new(secret, b"aas/" + role + b"-proof" + hello + hello_ack, hashlib.sha256).digest()


def derive_session_key(secret: bytes, client_nonce: bytes, server_nonce: bytes,
                       session_id: bytes) -> bytes:
    return hmac.new(secret, b"aas/session" + client_nonce + server_nonce + session_id,
                    hashlib.sha256).digest()


def new_nonce() -> bytes:
    return os.urandom(NONCE_SIZE)


# -- request / response bodies ---------------------------------------------

_REQ = struct.Struct(">QBIIH")


@dataclass(frozen=True)
class RequestBody:
    seq: int
    op: Op
    policy: ChaffPolicy
    object_id: str = ""

    def encode(self) -> bytes:
        r = self.policy.effective_ratio
        return (_REQ.pack(self.seq, list(Op).index(self.op), r.numerator, r.denominator,
                          self.policy.bench_size) + self.object_id.encode("utf-8"))

    @classmethod
    def decode(cls, data: bytes) -> "RequestBody":
        try:
            seq, op, num, den, bs = _REQ.unpack_from(data)
            return cls(seq, list(Op)[op], ChaffPolicy(ratio=Fraction(num, den), bench_size=bs),
                       data[_REQ.size:].decode("utf-8"))
        except (struct.error, IndexError, ZeroDivisionError, UnicodeDecodeError) as exc:
            raise ProtocolError(f"malformed request body: {exc}") from None


def _direction_key(session_key: bytes, direction: bytes) -> DataKey:
    return DataKey("aas-" + direction.decode(), hmac.new(session_key, b"aas/" + direction, hashlib.sha256).digest())


def seal_body(session_key: bytes, direction: bytes, ftype: FrameType, body: bytes,
              policy: ChaffPolicy) -> bytes:
    """Seal ``body`` under the per-direction session key and chaff it."""
    env = envelope.seal(body, _direction_key(session_key, direction), aad=bytes([ftype]))
    return chaff.merge_payload(env.to_bytes(), policy, session_key).to_bytes()


def open_body(session_key: bytes, direction: bytes, ftype: FrameType, payload: bytes) -> bytes:
    stream = MergedStream.from_bytes(payload)
    sealed = chaff.extract(stream, session_key)
    try:
        return envelope.open_bytes(sealed, _direction_key(session_key, direction), aad=bytes([ftype]))
    except AuthenticationFailure as exc:
        raise ProtocolError(f"request body failed authentication: {exc}") from None


def encode_err(code: int, message: str = "") -> bytes:
    return struct.pack(">H", code) + message.encode("utf-8")[:1024]


def decode_err(payload: bytes) -> tuple[int, str]:
    if len(payload) < 2:
        return 0, ""
    (code,) = struct.unpack_from(">H", payload)
    return code, payload[2:].decode("utf-8", "replace")
