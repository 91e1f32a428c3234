"""Bench splitting, fake-bench generation and keyed interleaving.

A payload is cut into fixed-size benches. Fake benches are appended at a
policy ratio and every bench is placed at a position drawn from a keyed
pseudorandom permutation of the stream, so the receiver (who shares the
session key) knows where the real benches sit and an observer does not.

Wire layout of a merged stream (big-endian)::

    stream_nonce (16) | bench_size u16 | total_count u32 |
    sealed_header_len u16 | sealed_header | benches (total_count * bench_size)

The sealed header is an envelope under a key derived from the session key
and holds ``real_count u32 | payload_len u64``. The clear prefix fields are
bound into it as associated data.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import math
import os
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import envelope
from .envelope import DataKey
from .errors import (
    AuthenticationFailure,
    CountOverflow,
    HeaderAuthFailure,
    PolicyInvalid,
    TruncatedStream,
    ZeroBenchSize,
)

DEFAULT_BENCH_SIZE = 64
NONCE_SIZE = 16
MAX_BENCH_SIZE = 0xFFFF
MAX_TOTAL_COUNT = 0xFFFFFFFF
_PREFIX = struct.Struct(">16sHI")
_HEADER_BODY = struct.Struct(">IQ")

Bench = bytes


class Priority(enum.Enum):
    SPEED = "speed"
    BALANCED = "balanced"
    SECURITY = "security"


DEFAULT_RATIOS = {
    Priority.SPEED: Fraction(1, 4),
    Priority.BALANCED: Fraction(1),
    Priority.SECURITY: Fraction(2),
}


@dataclass(frozen=True)
class ChaffPolicy:
    priority: Priority = Priority.BALANCED
    ratio: Fraction | None = None
    bench_size: int = DEFAULT_BENCH_SIZE

    def __post_init__(self) -> None:
        if self.ratio is not None:
            r = Fraction(self.ratio)
            if r < 0:
                raise PolicyInvalid("ratio must be >= 0")
            object.__setattr__(self, "ratio", r)
        if not isinstance(self.bench_size, int) or not 1 <= self.bench_size <= MAX_BENCH_SIZE:
            raise PolicyInvalid(f"bench_size must be in 1..{MAX_BENCH_SIZE}")

    @property
    def effective_ratio(self) -> Fraction:
        return self.ratio if self.ratio is not None else DEFAULT_RATIOS[self.priority]

    def fake_count(self, real_count: int) -> int:
        return fake_count(real_count, self.effective_ratio)

    @classmethod
    def from_ratio(cls, ratio: float | Fraction | str, bench_size: int = DEFAULT_BENCH_SIZE) -> "ChaffPolicy":
        r = Fraction(ratio) if not isinstance(ratio, float) else Fraction(ratio).limit_denominator(1 << 16)
        return cls(ratio=r, bench_size=bench_size)


def fake_count(real_count: int, ratio: Fraction) -> int:
    """Exact ``ceil(real_count * ratio)``."""
    return math.ceil(Fraction(real_count) * Fraction(ratio))


@dataclass(frozen=True)
class MergePlan:
    total_count: int
    real_count: int
    real_positions: tuple[int, ...]

    def real_mask(self) -> np.ndarray:
        mask = np.zeros(self.total_count, dtype=bool)
        mask[list(self.real_positions)] = True
        return mask


@dataclass(frozen=True)
class MergedStream:
    stream_nonce: bytes
    bench_size: int
    total_count: int
    sealed_header: bytes
    bench_data: bytes

    @property
    def benches(self) -> list[Bench]:
        b = self.bench_size
        return [self.bench_data[i:i + b] for i in range(0, len(self.bench_data), b)]

    def to_bytes(self) -> bytes:
        return (_PREFIX.pack(self.stream_nonce, self.bench_size, self.total_count)
                + struct.pack(">H", len(self.sealed_header)) + self.sealed_header + self.bench_data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MergedStream":
        data = bytes(data)
        if len(data) < _PREFIX.size + 2:
            raise TruncatedStream("merged stream shorter than its prefix")
        nonce, bench_size, total = _PREFIX.unpack_from(data)
        (hlen,) = struct.unpack_from(">H", data, _PREFIX.size)
        start = _PREFIX.size + 2
        if bench_size == 0:
            raise ZeroBenchSize("stream declares bench_size 0")
        if len(data) < start + hlen:
            raise TruncatedStream("sealed header truncated")
        header = data[start:start + hlen]
        body = data[start + hlen:]
        if len(body) != total * bench_size:
            raise TruncatedStream(
                f"expected {total} benches of {bench_size} bytes, got {len(body)} bytes")
        return cls(nonce, bench_size, total, header, body)

    def wire_prefix(self) -> bytes:
        return _PREFIX.pack(self.stream_nonce, self.bench_size, self.total_count)


def split_benches(data: bytes, bench_size: int) -> list[Bench]:
    """Cut ``data`` into ``bench_size`` blocks, zero-padding the last one."""
    if bench_size < 1:
        raise ZeroBenchSize("bench_size must be >= 1")
    out = [bytes(data[i:i + bench_size]) for i in range(0, len(data), bench_size)]
    if out and len(out[-1]) < bench_size:
        out[-1] = out[-1].ljust(bench_size, b"\0")
    return out


def _subkey(session_key: bytes, label: bytes, *parts: bytes) -> bytes:
    return hmac.new(bytes(session_key), label + b"".join(parts), hashlib.sha256).digest()


def _keystream(key: bytes, nbytes: int, start_block: int = 0) -> bytes:
    """AES-256-CTR keystream beginning at 16-byte block ``start_block``."""
    if nbytes <= 0:
        return b""
    iv = (start_block % (1 << 128)).to_bytes(16, "big")
    enc = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
    return enc.update(bytes(nbytes)) + enc.finalize()


def _permutation(session_key: bytes, stream_nonce: bytes, real_count: int, total_count: int) -> np.ndarray:
    # random-key sort: every element gets a 64-bit keystream key; ties are
    # broken by index via the stable sort, so the result is deterministic
    if total_count == 0:
        return np.zeros(0, dtype=np.int64)
    key = _subkey(session_key, b"aas/plan", bytes(stream_nonce), struct.pack(">II", real_count, total_count))
    sort_keys = np.frombuffer(_keystream(key, 8 * total_count), dtype=">u8")
    return np.argsort(sort_keys, kind="stable")


def derive_plan(session_key: bytes, stream_nonce: bytes, real_count: int, total_count: int) -> MergePlan:
    """Real-bench positions: the first ``real_count`` outputs of a keyed
    permutation of ``range(total_count)``."""
    if real_count < 0 or total_count < 0:
        raise CountOverflow("counts must be non-negative")
    if real_count > total_count:
        raise CountOverflow(f"real_count {real_count} > total_count {total_count}")
    perm = _permutation(session_key, stream_nonce, real_count, total_count)
    return MergePlan(total_count, real_count, tuple(int(i) for i in perm[:real_count]))


def _real_slots(session_key: bytes, stream_nonce: bytes, real_count: int, total_count: int) -> np.ndarray:
    """Sorted real positions; real bench ``i`` goes to slot ``i``."""
    perm = _permutation(session_key, stream_nonce, real_count, total_count)
    return np.sort(perm[:real_count])


def gen_fake_bench(chaff_key: bytes, counter: int, bench_size: int) -> Bench:
    """Fake bench number ``counter``: bytes ``[counter*bs, (counter+1)*bs)`` of
    the AES-CTR keystream under ``chaff_key``."""
    if bench_size < 1:
        raise ZeroBenchSize("bench_size must be >= 1")
    start = counter * bench_size
    block, skip = divmod(start, 16)
    return _keystream(bytes(chaff_key), skip + bench_size, block)[skip:]


def gen_fake_benches(chaff_key: bytes, count: int, bench_size: int, first: int = 0) -> bytes:
    """``count`` consecutive fake benches starting at ``first``, concatenated."""
    start = first * bench_size
    block, skip = divmod(start, 16)
    return _keystream(bytes(chaff_key), skip + count * bench_size, block)[skip:]


def _header_key(session_key: bytes) -> DataKey:
    return DataKey("aas-stream", _subkey(session_key, b"aas/header"))


def _view(data: bytes, bench_size: int) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).reshape(-1, bench_size)


def merge(real: Sequence[Bench] | bytes, policy: ChaffPolicy, session_key: bytes,
          stream_nonce: bytes | None = None, payload_len: int | None = None,
          chaff_key: bytes | None = None) -> MergedStream:
    """Interleave real benches with fake ones.

    ``real`` is either a list of benches or their concatenation. The fake
    generator key defaults to a fresh random key per stream.
    """
    bs = policy.bench_size
    if isinstance(real, (bytes, bytearray, memoryview)):
        data = bytes(real)
        if len(data) % bs:
            raise PolicyInvalid("real bench bytes are not a multiple of bench_size")
    else:
        if any(len(b) != bs for b in real):
            raise PolicyInvalid("benches must all be bench_size bytes")
        data = b"".join(real)
    real_count = len(data) // bs
    if payload_len is None:
        payload_len = len(data)
    if not (payload_len <= real_count * bs < payload_len + bs or (real_count == 0 and payload_len == 0)):
        raise PolicyInvalid("payload_len inconsistent with real bench count")
    total = real_count + policy.fake_count(real_count)
    if total > MAX_TOTAL_COUNT:
        raise PolicyInvalid("stream too large")
    nonce = os.urandom(NONCE_SIZE) if stream_nonce is None else bytes(stream_nonce)
    if len(nonce) != NONCE_SIZE:
        raise PolicyInvalid("stream_nonce must be 16 bytes")
    if chaff_key is None:
        chaff_key = os.urandom(32)

    out = np.empty((total, bs), dtype=np.uint8)
    slots = _real_slots(session_key, nonce, real_count, total)
    mask = np.zeros(total, dtype=bool)
    mask[slots] = True
    if real_count:
        out[slots] = _view(data, bs)
    nfake = total - real_count
    if nfake:
        out[~mask] = _view(gen_fake_benches(chaff_key, nfake, bs), bs)

    prefix = _PREFIX.pack(nonce, bs, total)
    header = envelope.seal(_HEADER_BODY.pack(real_count, payload_len), _header_key(session_key), aad=prefix)
    return MergedStream(nonce, bs, total, header.to_bytes(), out.tobytes())


def merge_payload(payload: bytes, policy: ChaffPolicy, session_key: bytes, **kw) -> MergedStream:
    """Split and merge in one step."""
    bs = policy.bench_size
    pad = (-len(payload)) % bs
    return merge(bytes(payload) + bytes(pad), policy, session_key, payload_len=len(payload), **kw)


def open_header(stream: MergedStream, session_key: bytes) -> tuple[int, int]:
    """Return ``(real_count, payload_len)`` from the sealed header."""
    try:
        body = envelope.open_bytes(stream.sealed_header, _header_key(session_key), aad=stream.wire_prefix())
    except AuthenticationFailure:
        raise HeaderAuthFailure("sealed stream header failed to open") from None
    if len(body) != _HEADER_BODY.size:
        raise HeaderAuthFailure("sealed stream header has wrong size")
    return _HEADER_BODY.unpack(body)


def extract(stream: MergedStream, session_key: bytes) -> bytes:
    """Recover the original payload; fake benches are dropped unread."""
    real_count, payload_len = open_header(stream, session_key)
    bs, total = stream.bench_size, stream.total_count
    if len(stream.bench_data) != total * bs:
        raise TruncatedStream(f"expected {total * bs} bench bytes, got {len(stream.bench_data)}")
    if real_count > total or payload_len > real_count * bs:
        raise TruncatedStream("header counts inconsistent with stream")
    slots = _real_slots(session_key, stream.stream_nonce, real_count, total)
    real = _view(stream.bench_data, bs)[slots]
    return real.tobytes()[:payload_len]


def wire_size(payload_len: int, policy: ChaffPolicy) -> int:
    """Bytes a merged stream of ``payload_len`` occupies on the wire."""
    real = -(-payload_len // policy.bench_size)
    total = real + policy.fake_count(real)
    header = 1 + len(b"aas-stream") + envelope.NONCE_SIZE + 8 + _HEADER_BODY.size + envelope.TAG_SIZE
    return _PREFIX.size + 2 + header + total * policy.bench_size
