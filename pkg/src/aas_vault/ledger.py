"""Hash-chained, append-only access log.

Each block on disk is::

    block_len u32 | entry (canonical) | entry_hash (32) | prev_hash (32) | block_hash (32)

``entry_hash = SHA256(entry)``, ``block_hash = SHA256(prev_hash || entry_hash)``
and block 0 chains from 32 zero bytes. After every append the block count and
tail hash are mirrored to ``<ledger>.tail`` so that truncation is detectable
as well as mutation.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
import threading
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator

from .errors import StorageFailure

HASH_SIZE = 32
GENESIS = bytes(HASH_SIZE)
_U32 = struct.Struct(">I")
_TAIL = struct.Struct(">Q32s")


class Op(str, enum.Enum):
    PUT = "PUT"
    GET = "GET"
    DELETE = "DELETE"
    LIST = "LIST"
    HANDSHAKE = "HANDSHAKE"


class Outcome(str, enum.Enum):
    OK = "OK"
    DENIED = "DENIED"
    NOT_FOUND = "NOT_FOUND"
    ERROR = "ERROR"


_OPS = list(Op)
_OUTCOMES = list(Outcome)
STAMP_FIELDS = ("time_ns", "identity", "network", "location_zone", "application", "device_id")


@dataclass(frozen=True)
class AccessLogEntry:
    seq: int
    time_ns: int
    identity: str
    network: str
    location_zone: str
    application: str
    device_id: str
    op: Op
    object_id: str
    outcome: Outcome

    def canonical(self) -> bytes:
        parts = [struct.pack(">QQ", self.seq, self.time_ns)]
        for s in (self.identity, self.network, self.location_zone, self.application,
                  self.device_id):
            raw = s.encode("utf-8")
            parts.append(struct.pack(">H", len(raw)) + raw)
        parts.append(struct.pack(">B", _OPS.index(self.op)))
        raw = self.object_id.encode("utf-8")
        parts.append(struct.pack(">H", len(raw)) + raw)
        parts.append(struct.pack(">B", _OUTCOMES.index(self.outcome)))
        return b"".join(parts)

    @classmethod
    def from_canonical(cls, data: bytes) -> "AccessLogEntry":
        seq, time_ns = struct.unpack_from(">QQ", data, 0)
        pos = 16
        strs = []
        for _ in range(5):
            (n,) = struct.unpack_from(">H", data, pos)
            if pos + 2 + n > len(data):
                raise ValueError("string runs past entry")
            strs.append(data[pos + 2:pos + 2 + n].decode("utf-8"))
            pos += 2 + n
        op = _OPS[data[pos]]
        pos += 1
        (n,) = struct.unpack_from(">H", data, pos)
        if pos + 2 + n >= len(data):
            raise ValueError("object_id runs past entry")
        object_id = data[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        outcome = _OUTCOMES[data[pos]]
        if pos + 1 != len(data):
            raise ValueError("trailing bytes in entry")
        return cls(seq, time_ns, *strs, op, object_id, outcome)

    def stamps(self) -> dict[str, object]:
        return {f: getattr(self, f) for f in STAMP_FIELDS}

    def to_dict(self) -> dict[str, object]:
        d = asdict(self)
        d["op"] = self.op.value
        d["outcome"] = self.outcome.value
        return d


@dataclass(frozen=True)
class LedgerBlock:
    entry: AccessLogEntry
    entry_hash: bytes
    prev_hash: bytes
    block_hash: bytes

    def to_bytes(self) -> bytes:
        body = self.entry.canonical() + self.entry_hash + self.prev_hash + self.block_hash
        return _U32.pack(len(body)) + body

    @classmethod
    def chain(cls, entry: AccessLogEntry, prev_hash: bytes) -> "LedgerBlock":
        eh = hashlib.sha256(entry.canonical()).digest()
        return cls(entry, eh, prev_hash, hashlib.sha256(prev_hash + eh).digest())


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    first_bad: int | None = None
    checked: int = 0
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "OK" if self.ok else f"FirstBad({self.first_bad})"

    def to_dict(self) -> dict[str, object]:
        return {"status": "OK" if self.ok else "FirstBad", "first_bad": self.first_bad,
                "checked": self.checked, "reason": self.reason}


@dataclass
class _Parsed:
    blocks: list[LedgerBlock]
    offsets: list[int]
    end: int
    bad_at: int | None  # index of the first block that failed to parse
    reason: str


def _parse(data: bytes) -> _Parsed:
    blocks: list[LedgerBlock] = []
    offsets: list[int] = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            return _Parsed(blocks, offsets, pos, len(blocks), "partial length prefix")
        (n,) = _U32.unpack_from(data, pos)
        if n < 3 * HASH_SIZE or pos + 4 + n > len(data):
            return _Parsed(blocks, offsets, pos, len(blocks), "block length out of range")
        body = data[pos + 4:pos + 4 + n]
        try:
            entry = AccessLogEntry.from_canonical(body[:-3 * HASH_SIZE])
        except (ValueError, IndexError, struct.error, UnicodeDecodeError) as exc:
            return _Parsed(blocks, offsets, pos, len(blocks), f"undecodable entry: {exc}")
        h = body[-3 * HASH_SIZE:]
        blocks.append(LedgerBlock(entry, h[:32], h[32:64], h[64:]))
        offsets.append(pos)
        pos += 4 + n
    return _Parsed(blocks, offsets, pos, None, "")


class Ledger:
    """File-backed ledger with a single serialized appender.

    ``query`` and ``verify`` read a snapshot ending at the last fully flushed
    block and may run concurrently with appends.
    """

    def __init__(self, path: str | Path, fsync: bool = True, read_only: bool = False) -> None:
        self.path = Path(path)
        self.read_only = read_only
        self.tail_path = self.path.with_name(self.path.name + ".tail")
        self.fsync = fsync
        self._lock = threading.RLock()
        self._entries: list[AccessLogEntry] = []
        self._tail_hash = GENESIS
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._recover()
        self._fh = None if read_only else open(self.path, "ab")

    # -- lifecycle -------------------------------------------------------
    def _recover(self) -> None:
        data = self.path.read_bytes() if self.path.exists() else b""
        parsed = _parse(data)
        recorded = self._read_tail()
        if self.read_only:
            self._entries = [b.entry for b in parsed.blocks]
            self._tail_hash = parsed.blocks[-1].block_hash if parsed.blocks else GENESIS
            return
        if parsed.bad_at is not None and recorded is not None and recorded[0] <= parsed.bad_at:
            # torn final write that was never acknowledged: drop the fragment
            with open(self.path, "r+b") as fh:
                fh.truncate(parsed.end)
            parsed = _parse(data[:parsed.end])
        self._entries = [b.entry for b in parsed.blocks]
        self._tail_hash = parsed.blocks[-1].block_hash if parsed.blocks else GENESIS
        if recorded is None or (recorded[0] < len(parsed.blocks) and self._chain_ok(parsed.blocks)):
            # blocks flushed after the sidecar was last written
            self._write_tail()

    @staticmethod
    def _chain_ok(blocks: list[LedgerBlock]) -> bool:
        prev = GENESIS
        for i, b in enumerate(blocks):
            if LedgerBlock.chain(b.entry, prev) != b or b.entry.seq != i:
                return False
            prev = b.block_hash
        return True

    def _read_tail(self) -> tuple[int, bytes] | None:
        try:
            raw = self.tail_path.read_bytes()
        except FileNotFoundError:
            return None
        if len(raw) != _TAIL.size:
            return (-1, b"")
        return _TAIL.unpack(raw)

    def _write_tail(self) -> None:
        tmp = self.tail_path.with_name(self.tail_path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(_TAIL.pack(len(self._entries), self._tail_hash))
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, self.tail_path)

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()

    def __enter__(self) -> "Ledger":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    # -- writing ---------------------------------------------------------
    @property
    def lock(self) -> threading.RLock:
        return self._lock

    def append(self, entry: AccessLogEntry) -> LedgerBlock:
        """Assign the next seq, chain and flush the block.

        The ``seq`` of the passed entry is ignored. Returns only once the block
        and the tail sidecar are on disk.
        """
        if self._fh is None:
            raise StorageFailure("ledger opened read-only")
        with self._lock:
            seq = len(self._entries)
            last_t = self._entries[-1].time_ns if self._entries else 0
            if entry.time_ns < last_t:
                raise ValueError("time_ns must be non-decreasing")
            entry = replace(entry, seq=seq)
            block = LedgerBlock.chain(entry, self._tail_hash)
            try:
                self._fh.write(block.to_bytes())
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
                self._entries.append(entry)
                self._tail_hash = block.block_hash
                self._write_tail()
            except OSError as exc:
                raise StorageFailure(f"ledger append failed: {exc}") from exc
            return block

    # -- reading ---------------------------------------------------------
    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[AccessLogEntry]:
        with self._lock:
            return list(self._entries)

    @property
    def last_time_ns(self) -> int:
        with self._lock:
            return self._entries[-1].time_ns if self._entries else 0

    def query(self, identity: str | None = None, object_id: str | None = None,
              time_range: tuple[int, int] | None = None, outcome: Outcome | str | None = None,
              op: Op | str | None = None) -> list[AccessLogEntry]:
        """Entries matching every given predicate, in seq order.

        ``time_range`` is half-open ``[start_ns, end_ns)``.
        """
        oc = Outcome(outcome) if outcome is not None else None
        o = Op(op) if op is not None else None
        out = []
        for e in self.entries():
            if identity is not None and e.identity != identity:
                continue
            if object_id is not None and e.object_id != object_id:
                continue
            if time_range is not None and not time_range[0] <= e.time_ns < time_range[1]:
                continue
            if oc is not None and e.outcome != oc:
                continue
            if o is not None and e.op != o:
                continue
            out.append(e)
        return out

    def blocks(self) -> list[LedgerBlock]:
        """Blocks as currently stored on disk (no integrity check)."""
        with self._lock:
            data = self.path.read_bytes()
        return _parse(data).blocks

    def verify(self, lo: int | None = None, hi: int | None = None) -> VerifyResult:
        with self._lock:
            try:
                data = self.path.read_bytes()
            except OSError as exc:
                raise StorageFailure(f"cannot read ledger: {exc}") from exc
            tail = self._read_tail()
        return verify_bytes(data, tail, lo, hi)

    def iter_blocks(self) -> Iterator[LedgerBlock]:
        yield from self.blocks()


def verify_bytes(data: bytes, tail: tuple[int, bytes] | None = None,
                 lo: int | None = None, hi: int | None = None) -> VerifyResult:
    """Recompute the chain over raw ledger bytes.

    The chain is always walked from genesis (later blocks depend on earlier
    ones); ``lo``/``hi`` only bound which blocks are examined, and a failure
    below ``lo`` is still reported since it taints the requested range.
    """
    parsed = _parse(data)
    blocks = parsed.blocks
    limit = len(blocks) if hi is None else min(hi + 1, len(blocks))
    prev = GENESIS
    for i in range(limit):
        b = blocks[i]
        if b.entry.seq != i:
            return VerifyResult(False, i, i, "seq out of order")
        if hashlib.sha256(b.entry.canonical()).digest() != b.entry_hash:
            return VerifyResult(False, i, i, "entry hash mismatch")
        if b.prev_hash != prev:
            return VerifyResult(False, i, i, "prev hash mismatch")
        if hashlib.sha256(b.prev_hash + b.entry_hash).digest() != b.block_hash:
            return VerifyResult(False, i, i, "block hash mismatch")
        if i and b.entry.time_ns < blocks[i - 1].entry.time_ns:
            return VerifyResult(False, i, i, "time went backwards")
        prev = b.block_hash
    if hi is not None and hi < len(blocks):
        return VerifyResult(True, None, limit)
    if parsed.bad_at is not None:
        return VerifyResult(False, parsed.bad_at, limit, parsed.reason)
    if tail is not None:
        count, tail_hash = tail
        if count < 0:
            return VerifyResult(False, len(blocks), limit, "tail sidecar unreadable")
        if count > len(blocks):
            return VerifyResult(False, len(blocks), limit, f"truncated: tail records {count} blocks")
        if count >= 1 and blocks[count - 1].block_hash != tail_hash:
            return VerifyResult(False, count - 1, limit, "tail hash mismatch")
    return VerifyResult(True, None, limit)


def export_records(blocks: list[LedgerBlock], start_ns: int | None = None,
                   end_ns: int | None = None) -> list[dict[str, object]]:
    out = []
    for b in blocks:
        t = b.entry.time_ns
        if start_ns is not None and t < start_ns:
            continue
        if end_ns is not None and t >= end_ns:
            continue
        rec = b.entry.to_dict()
        rec.update(entry_hash=b.entry_hash.hex(), prev_hash=b.prev_hash.hex(),
                   block_hash=b.block_hash.hex())
        out.append(rec)
    return out


def dumps_record(rec: dict[str, object]) -> str:
    return json.dumps(rec, separators=(",", ":"))
