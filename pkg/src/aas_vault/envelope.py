"""Client-side authenticated encryption of stored payloads.

An envelope is produced on the client and only ever opened there; the server
stores and forwards its serialized bytes without looking inside.

Serialized layout (big-endian)::

    key_id_len u8 | key_id | nonce (16) | plaintext_len u64 | ciphertext | tag (16)

The cipher is AES-256-GCM with a 16-byte nonce. Everything before the
ciphertext is bound into the tag as associated data.
"""

from __future__ import annotations

import hashlib
import os
import secrets
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationFailure, KeyNotFound, NonceExhausted

KEY_SIZE = 32
NONCE_SIZE = 16
TAG_SIZE = 16
MAX_KEY_ID = 255
_U64_MAX = (1 << 64) - 1


@dataclass(frozen=True)
class DataKey:
    key_id: str
    key_bytes: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.key_bytes, (bytes, bytearray)) or len(self.key_bytes) != KEY_SIZE:
            raise ValueError(f"key_bytes must be exactly {KEY_SIZE} bytes")
        raw = self.key_id.encode("utf-8")
        if not raw or len(raw) > MAX_KEY_ID:
            raise ValueError("key_id must be 1..255 bytes of UTF-8")

    def __repr__(self) -> str:
        return f"DataKey(key_id={self.key_id!r})"

    @classmethod
    def generate(cls, key_id: str) -> "DataKey":
        return cls(key_id, secrets.token_bytes(KEY_SIZE))


@dataclass(frozen=True)
class EncryptedEnvelope:
    key_id: str
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes
    plaintext_len: int

    def header(self) -> bytes:
        kid = self.key_id.encode("utf-8")
        return struct.pack(">B", len(kid)) + kid + self.nonce + struct.pack(">Q", self.plaintext_len)

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext + self.auth_tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedEnvelope":
        """Parse a serialized envelope. Raises ``ValueError`` on bad framing."""
        data = bytes(data)
        if len(data) < 1:
            raise ValueError("empty envelope")
        klen = data[0]
        fixed = 1 + klen + NONCE_SIZE + 8
        if klen == 0 or len(data) < fixed + TAG_SIZE:
            raise ValueError("envelope too short")
        try:
            key_id = data[1:1 + klen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValueError("key_id is not UTF-8") from exc
        nonce = data[1 + klen:1 + klen + NONCE_SIZE]
        (plen,) = struct.unpack_from(">Q", data, 1 + klen + NONCE_SIZE)
        body = data[fixed:]
        if len(body) != plen + TAG_SIZE:
            raise ValueError("ciphertext length does not match plaintext_len")
        return cls(key_id, nonce, body[:-TAG_SIZE], body[-TAG_SIZE:], plen)


class _NonceCounter:
    """Per-key nonce source: random 8-byte prefix plus a 64-bit counter."""

    def __init__(self, start: int = 0) -> None:
        self._prefix = os.urandom(8)
        self._next = start
        self._lock = threading.Lock()

    def take(self) -> bytes:
        with self._lock:
            if self._next > _U64_MAX:
                raise NonceExhausted("nonce counter exhausted for this key")
            n = self._next
            self._next += 1
        return self._prefix + n.to_bytes(8, "big")


_counters: dict[bytes, _NonceCounter] = {}
_counters_lock = threading.Lock()


def _counter_for(key: DataKey) -> _NonceCounter:
    ident = hashlib.sha256(key.key_id.encode() + b"\0" + bytes(key.key_bytes)).digest()
    with _counters_lock:
        c = _counters.get(ident)
        if c is None:
            c = _counters[ident] = _NonceCounter()
        return c


def seal(payload: bytes, key: DataKey, aad: bytes = b"") -> EncryptedEnvelope:
    """Encrypt ``payload`` under ``key``.

    ``aad`` is optional caller context that must be presented again to open.
    """
    nonce = _counter_for(key).take()
    env = EncryptedEnvelope(key.key_id, nonce, b"", b"", len(payload))
    sealed = AESGCM(bytes(key.key_bytes)).encrypt(nonce, bytes(payload), env.header() + aad)
    return EncryptedEnvelope(key.key_id, nonce, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:], len(payload))


def open(env: EncryptedEnvelope, key: "DataKey | Keyring", aad: bytes = b"") -> bytes:  # noqa: A001
    """Decrypt an envelope.

    With a :class:`Keyring` the key is looked up by ``env.key_id``; with a bare
    :class:`DataKey` the key is tried directly, so a wrong key surfaces as an
    authentication failure rather than a lookup miss.
    """
    if isinstance(key, Keyring):
        key = key.get(env.key_id)
    if len(env.nonce) != NONCE_SIZE or len(env.auth_tag) != TAG_SIZE:
        raise AuthenticationFailure("malformed envelope")
    try:
        out = AESGCM(bytes(key.key_bytes)).decrypt(
            env.nonce, env.ciphertext + env.auth_tag, env.header() + aad)
    except InvalidTag:
        raise AuthenticationFailure("envelope failed authentication") from None
    if len(out) != env.plaintext_len:
        raise AuthenticationFailure("plaintext length mismatch")
    return out


def open_bytes(data: bytes, key: "DataKey | Keyring", aad: bytes = b"") -> bytes:
    """Parse and open a serialized envelope; framing errors count as auth failures."""
    try:
        env = EncryptedEnvelope.from_bytes(data)
    except ValueError as exc:
        raise AuthenticationFailure(str(exc)) from None
    return open(env, key, aad)


class Keyring:
    """Client-local set of data keys, stored as ``key_id hexkey`` lines."""

    def __init__(self, keys: Iterable[DataKey] = ()) -> None:
        self._keys: dict[str, DataKey] = {}
        for k in keys:
            self.add(k)

    def add(self, key: DataKey) -> None:
        if key.key_id in self._keys:
            raise ValueError(f"duplicate key_id {key.key_id!r}")
        self._keys[key.key_id] = key

    def get(self, key_id: str) -> DataKey:
        try:
            return self._keys[key_id]
        except KeyError:
            raise KeyNotFound(f"no key {key_id!r} in keyring") from None

    def __contains__(self, key_id: object) -> bool:
        return key_id in self._keys

    def __len__(self) -> int:
        return len(self._keys)

    def default(self) -> DataKey:
        if not self._keys:
            raise KeyNotFound("keyring is empty")
        return next(iter(self._keys.values()))

    @classmethod
    def load(cls, path: str | Path) -> "Keyring":
        ring = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                kid, hexkey = line.split()
                ring.add(DataKey(kid, bytes.fromhex(hexkey)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        return ring

    def save(self, path: str | Path) -> None:
        p = Path(path)
        p.write_text("".join(f"{k.key_id} {bytes(k.key_bytes).hex()}\n" for k in self._keys.values()))
        os.chmod(p, 0o600)
