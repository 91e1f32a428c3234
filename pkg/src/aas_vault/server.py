"""Threaded TCP server: handshake, frame dispatch and gateway calls."""

from __future__ import annotations

import hmac
import json
import logging
import os
import socket
import socketserver
import threading
from pathlib import Path

from . import chaff
from .errors import (
    AASError,
    BadCredential,
    ConnectionLost,
    ProtocolError,
    ReplayDetected,
    StampsMissing,
    StorageFailure,
    UnknownPrincipal,
)
from .gateway import AccessRequest, Gateway, Storage
from .ledger import Ledger, Op, Outcome
from .session import DeclaredStamps, Session
from .wire import (
    REQUEST_OPS,
    Frame,
    FrameType,
    Hello,
    RequestBody,
    derive_session_key,
    encode_err,
    encode_hello_ack,
    new_nonce,
    open_body,
    proof,
    read_frame,
    seal_body,
    write_frame,
)

log = logging.getLogger(__name__)


def load_principals(path: str | Path) -> dict[str, bytes]:
    """``principal hexsecret`` per line."""
    out: dict[str, bytes] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            name, hexsecret = line.split()
            out[name] = bytes.fromhex(hexsecret)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'principal hexsecret'") from None
    return out


def save_principals(path: str | Path, principals: dict[str, bytes]) -> None:
    Path(path).write_text("".join(f"{k} {v.hex()}\n" for k, v in principals.items()))
    os.chmod(path, 0o600)


class _Handler(socketserver.StreamRequestHandler):
    server: "_TCPServer"

    def setup(self) -> None:
        super().setup()
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def handle(self) -> None:
        vault = self.server.vault
        host, port = self.client_address[:2]
        peer = f"[{host}]:{port}" if ":" in host else f"{host}:{port}"
        try:
            session = vault.handshake(self.rfile, self.wfile, peer)
            if session is None:
                return
            while True:
                try:
                    frame = read_frame(self.rfile)
                except ConnectionLost:
                    return
                if frame.frame_type not in REQUEST_OPS:
                    vault.send_err(self.wfile, ProtocolError(f"unexpected {frame.frame_type.name} frame"))
                    continue
                if not vault.handle_request(session, frame, self.rfile, self.wfile):
                    return
        except AASError as exc:
            # framing is lost; tell the peer if we still can, then hang up
            try:
                vault.send_err(self.wfile, exc)
            except OSError:
                pass
        except (ConnectionLost, OSError):
            pass


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    vault: "VaultServer"


class VaultServer:
    """Owns the gateway, the ledger and the listening socket."""

    def __init__(self, data_dir: str | Path, ledger_path: str | Path,
                 principals: dict[str, bytes], listen_addr: tuple[str, int] = ("127.0.0.1", 0),
                 fsync: bool = True) -> None:
        self.principals = dict(principals)
        self.ledger = Ledger(ledger_path, fsync=fsync)
        self.storage = Storage(data_dir, fsync=fsync)
        self.gateway = Gateway(self.storage, self.ledger)
        self._listen_addr = listen_addr
        self._tcp: _TCPServer | None = None
        self._thread: threading.Thread | None = None

    # -- lifecycle -------------------------------------------------------
    def start(self) -> tuple[str, int]:
        self._tcp = _TCPServer(self._listen_addr, _Handler)
        self._tcp.vault = self
        self._thread = threading.Thread(target=self._tcp.serve_forever, name="aas-server", daemon=True)
        self._thread.start()
        return self.address

    def serve_forever(self) -> None:
        self._tcp = _TCPServer(self._listen_addr, _Handler)
        self._tcp.vault = self
        log.info("listening on %s:%d", *self.address)
        self._tcp.serve_forever()

    @property
    def address(self) -> tuple[str, int]:
        assert self._tcp is not None
        return self._tcp.server_address[:2]

    def stop(self) -> None:
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.ledger.close()

    def __enter__(self) -> "VaultServer":
        self.start()
        return self

    def __exit__(self, *exc: object) -> None:
        self.stop()

    # -- protocol --------------------------------------------------------
    def send_err(self, wfile, exc: AASError) -> None:
        write_frame(wfile, Frame(FrameType.ERR, encode_err(exc.wire_code, str(exc))))

    def _deny(self, wfile, exc: AASError, stamps: DeclaredStamps, op: Op = Op.HANDSHAKE) -> None:
        self.gateway.record(None, op, "", Outcome.DENIED, stamps)
        try:
            self.send_err(wfile, exc)
        except OSError:
            pass

    def handshake(self, rfile, wfile, peer: str) -> Session | None:
        """Run the server half of the handshake; ``None`` means the peer was refused."""
        anon = DeclaredStamps("", "", "", peer)
        try:
            first = read_frame(rfile)
        except ConnectionLost:
            return None
        except ProtocolError as exc:
            self._deny(wfile, exc, anon)
            return None
        if first.frame_type is not FrameType.HELLO:
            op = REQUEST_OPS.get(first.frame_type, Op.HANDSHAKE)
            self._deny(wfile, ProtocolError("handshake required"), anon, op)
            return None
        try:
            hello = Hello.decode(first.payload)
        except ProtocolError as exc:
            self._deny(wfile, exc, anon)
            return None
        stamps = DeclaredStamps(hello.stamps.location_zone, hello.stamps.application,
                                hello.stamps.device_id, peer)
        secret = self.principals.get(hello.principal)
        if secret is None:
            self._deny(wfile, UnknownPrincipal(f"unknown principal {hello.principal!r}"), stamps)
            return None
        missing = stamps.missing()
        if missing:
            self._deny(wfile, StampsMissing("missing stamps: " + ", ".join(missing)), stamps)
            return None
        session_id, server_nonce = new_nonce(), new_nonce()
        ack_payload = encode_hello_ack(session_id, server_nonce)
        write_frame(wfile, Frame(FrameType.HELLO_ACK, ack_payload))
        try:
            reply = read_frame(rfile)
        except ConnectionLost:
            self.gateway.record(None, Op.HANDSHAKE, "", Outcome.DENIED, stamps)
            return None
        expected = proof(secret, b"client", first.payload, ack_payload)
        if reply.frame_type is not FrameType.ACK or not hmac.compare_digest(reply.payload, expected):
            self._deny(wfile, BadCredential("credential proof rejected"), stamps)
            return None
        write_frame(wfile, Frame(FrameType.ACK, proof(secret, b"server", first.payload, ack_payload)))
        key = derive_session_key(secret, hello.client_nonce, server_nonce, session_id)
        return Session(session_id, key, hello.principal, stamps)

    def handle_request(self, session: Session, frame: Frame, rfile, wfile) -> bool:
        """Serve one request; returns ``False`` when the connection should close."""
        op = REQUEST_OPS[frame.frame_type]
        try:
            body = RequestBody.decode(open_body(session.session_key, b"c2s", frame.frame_type, frame.payload))
            if body.op is not op:
                raise ProtocolError("request body op does not match frame type")
            if body.seq <= session.last_seq:
                raise ReplayDetected(f"request seq {body.seq} already used")
        except AASError as exc:
            self.gateway.record(session, op, "", Outcome.DENIED)
            self.send_err(wfile, exc if isinstance(exc, ProtocolError) else ProtocolError(str(exc)))
            return False
        session.last_seq = body.seq

        data = None
        if op is Op.PUT:
            nxt = read_frame(rfile)
            try:
                if nxt.frame_type is not FrameType.STREAM:
                    raise ProtocolError("PUT must be followed by a STREAM frame")
                data = chaff.extract(chaff.MergedStream.from_bytes(nxt.payload), session.session_key)
            except AASError as exc:
                self.gateway.record(session, op, body.object_id, Outcome.ERROR)
                self.send_err(wfile, exc if isinstance(exc, ProtocolError) else ProtocolError(str(exc)))
                return False

        req = AccessRequest(session, op, body.object_id or None) if op is not Op.LIST else AccessRequest(session, op)
        try:
            result = self.gateway.authorize_and_execute(req, data)
        except AASError as exc:
            self.send_err(wfile, exc)
            return not isinstance(exc, StorageFailure)

        if op is Op.GET:
            assert isinstance(result, bytes)
            stream = chaff.merge_payload(result, body.policy, session.session_key)
            write_frame(wfile, Frame(FrameType.STREAM, stream.to_bytes()))
        elif op is Op.LIST:
            names = json.dumps(result).encode("utf-8")
            write_frame(wfile, Frame(FrameType.STREAM,
                                     seal_body(session.session_key, b"s2c", FrameType.LIST, names, body.policy)))
        else:
            write_frame(wfile, Frame(FrameType.ACK))
        return True

