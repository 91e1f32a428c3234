"""Secure access gateway: the only path between sessions and stored envelopes.

Every access attempt, whatever its outcome, produces exactly one stamped
ledger entry before the caller sees a result.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .envelope import EncryptedEnvelope
from .errors import AASError, Denied, NotFound, ProtocolError, StorageFailure
from .ledger import AccessLogEntry, Ledger, Op, Outcome
from .session import UNAUTHENTICATED, UNKNOWN, DeclaredStamps, Session

log = logging.getLogger(__name__)

MAX_OBJECT_ID = 256


class BadRequest(ProtocolError):
    pass


@dataclass(frozen=True)
class AccessRequest:
    session: Session
    op: Op
    object_id: str | None = None

    def __post_init__(self) -> None:
        if self.op not in (Op.PUT, Op.GET, Op.DELETE, Op.LIST):
            raise BadRequest(f"op {self.op} is not a storage operation")
        if self.op is not Op.LIST and not self.object_id:
            raise BadRequest(f"{self.op.value} requires an object_id")


def resolve(principal: str, object_id: str) -> tuple[str, str]:
    """Split ``[owner/]name`` into ``(owner, name)``; bare names are the caller's."""
    owner, sep, name = object_id.partition("/")
    if not sep:
        owner, name = principal, object_id
    if not name or "/" in name or "\0" in name or len(name.encode("utf-8")) > MAX_OBJECT_ID:
        raise BadRequest(f"invalid object id {object_id!r}")
    return owner, name


class Storage:
    """One file per object at ``<root>/hex(owner)/hex(object_id)``.

    Only :class:`Gateway` should hold a reference to this.
    """

    def __init__(self, root: str | Path, fsync: bool = True) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._locks: dict[tuple[str, str], threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    def _path(self, owner: str, name: str) -> Path:
        return self.root / owner.encode("utf-8").hex() / name.encode("utf-8").hex()

    def lock(self, owner: str, name: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks[(owner, name)]

    def put_object(self, owner: str, name: str, data: bytes) -> None:
        path = self._path(owner, name)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            with open(tmp, "wb") as fh:
                fh.write(data)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    def get_object(self, owner: str, name: str) -> bytes:
        try:
            return self._path(owner, name).read_bytes()
        except FileNotFoundError:
            raise NotFound(f"{owner}/{name}") from None
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    def delete_object(self, owner: str, name: str) -> None:
        try:
            self._path(owner, name).unlink()
        except FileNotFoundError:
            raise NotFound(f"{owner}/{name}") from None
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    def list_objects(self, owner: str) -> list[str]:
        d = self.root / owner.encode("utf-8").hex()
        if not d.is_dir():
            return []
        names = [bytes.fromhex(p.name).decode("utf-8") for p in d.iterdir()
                 if not p.name.endswith(".tmp")]
        return sorted(names)

    def files(self) -> list[Path]:
        return sorted(p for p in self.root.rglob("*") if p.is_file())


class Gateway:
    def __init__(self, storage: Storage, ledger: Ledger,
                 clock: Callable[[], int] = time.time_ns) -> None:
        self._storage = storage
        self.ledger = ledger
        self.clock = clock

    def _now(self) -> int:
        # strictly increasing; called with the ledger lock held
        return max(self.clock(), self.ledger.last_time_ns + 1)

    def collect_stamps(self, session: Session | None, op: Op, object_id: str,
                       outcome: Outcome, stamps: DeclaredStamps | None = None) -> AccessLogEntry:
        """Build the log entry for one attempt. Never raises."""
        if session is not None:
            identity = session.principal
            stamps = session.stamps
        else:
            identity = UNAUTHENTICATED
        st = stamps or DeclaredStamps(UNKNOWN, UNKNOWN, UNKNOWN)

        def val(s: str) -> str:
            return s if s and s.strip() else UNKNOWN

        return AccessLogEntry(
            seq=0, time_ns=self._now(), identity=identity or UNKNOWN,
            network=val(st.network_address), location_zone=val(st.location_zone),
            application=val(st.application), device_id=val(st.device_id),
            op=op, object_id=object_id, outcome=outcome)

    def record(self, session: Session | None, op: Op, object_id: str, outcome: Outcome,
               stamps: DeclaredStamps | None = None) -> AccessLogEntry:
        with self.ledger.lock:
            entry = self.collect_stamps(session, op, object_id, outcome, stamps)
            return self.ledger.append(entry).entry

    def record_handshake_failure(self, stamps: DeclaredStamps | None) -> AccessLogEntry:
        return self.record(None, Op.HANDSHAKE, "", Outcome.DENIED, stamps)

    def authorize_and_execute(self, req: AccessRequest, data: bytes | None = None) -> bytes | list[str] | None:
        """Run one storage request for ``req.session.principal``.

        Returns the stored envelope for GET, the sorted object names for LIST
        and ``None`` for PUT/DELETE.
        """
        principal = req.session.principal
        logged_id = ""
        try:
            if req.op is Op.LIST:
                result: bytes | list[str] | None = self._storage.list_objects(principal)
            else:
                assert req.object_id is not None
                owner, name = resolve(principal, req.object_id)
                logged_id = f"{owner}/{name}"
                if owner != principal:
                    raise Denied(f"{principal} may not access {logged_id}")
                with self._storage.lock(owner, name):
                    result = self._execute(req.op, owner, name, data)
        except Denied:
            self.record(req.session, req.op, logged_id, Outcome.DENIED)
            raise
        except NotFound:
            self.record(req.session, req.op, logged_id, Outcome.NOT_FOUND)
            raise
        except AASError:
            self.record(req.session, req.op, logged_id or (req.object_id or ""), Outcome.ERROR)
            raise
        except Exception as exc:
            log.exception("unexpected gateway failure")
            self.record(req.session, req.op, logged_id, Outcome.ERROR)
            raise StorageFailure(str(exc)) from exc
        self.record(req.session, req.op, logged_id, Outcome.OK)
        return result

    def _execute(self, op: Op, owner: str, name: str, data: bytes | None) -> bytes | None:
        if op is Op.PUT:
            if data is None:
                raise BadRequest("PUT without data")
            try:
                # framing/length check only; the server holds no data key
                EncryptedEnvelope.from_bytes(data)
            except ValueError as exc:
                raise BadRequest(f"not an envelope: {exc}") from None
            self._storage.put_object(owner, name, data)
            return None
        if op is Op.GET:
            return self._storage.get_object(owner, name)
        if op is Op.DELETE:
            self._storage.delete_object(owner, name)
            return None
        raise BadRequest(f"unsupported op {op}")
