"""Client side of the vault: encrypt, chaff, send; receive, extract, decrypt."""

from __future__ import annotations

import hmac
import json
import socket

from . import chaff, envelope
from .chaff import ChaffPolicy, MergedStream
from .envelope import DataKey, Keyring
from .errors import WIRE_ERRORS, BadCredential, ConnectionLost, ProtocolError, ServerError
from .ledger import Op
from .session import DeclaredStamps, Session
from .wire import (
    OP_FRAMES,
    Frame,
    FrameType,
    Hello,
    RequestBody,
    decode_err,
    decode_hello_ack,
    derive_session_key,
    new_nonce,
    open_body,
    proof,
    read_frame,
    seal_body,
    write_frame,
)


def raise_for_err(frame: Frame) -> None:
    """Raise the error class matching an ERR frame's code, if it is one."""
    if frame.frame_type is FrameType.ERR:
        code, message = decode_err(frame.payload)
        cls = WIRE_ERRORS.get(code)
        raise cls(message) if cls else ServerError(code, message)


class VaultClient:
    """One authenticated session with a vault server.

    Data keys stay in ``keyring``; the server only ever receives sealed
    envelopes wrapped in merged streams.
    """

    def __init__(self, address: tuple[str, int], principal: str, secret: bytes,
                 stamps: DeclaredStamps, keyring: Keyring | None = None,
                 policy: ChaffPolicy | None = None, timeout: float | None = 30.0) -> None:
        self.address = address
        self.principal = principal
        self._secret = secret
        self.stamps = stamps
        self.keyring = keyring if keyring is not None else Keyring()
        self.policy = policy or ChaffPolicy()
        self.timeout = timeout
        self.session: Session | None = None
        self._seq = 0
        self._sock: socket.socket | None = None

    def __enter__(self) -> "VaultClient":
        self.connect()
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def connect(self) -> Session:
        try:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
        except OSError as exc:
            raise ConnectionLost(f"cannot reach {self.address[0]}:{self.address[1]}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self._sock.makefile("rb")
        self._wfile = self._sock.makefile("wb")
        try:
            self.session = self.handshake()
        except BaseException:
            self.close()
            raise
        return self.session

    def close(self) -> None:
        if self._sock is not None:
            for f in (self._rfile, self._wfile):
                try:
                    f.close()
                except OSError:
                    pass
            self._sock.close()
            self._sock = None

    def _send(self, frame: Frame) -> None:
        try:
            write_frame(self._wfile, frame)
        except OSError as exc:
            raise ConnectionLost(str(exc)) from exc

    def _recv(self) -> Frame:
        try:
            return read_frame(self._rfile)
        except OSError as exc:
            raise ConnectionLost(str(exc)) from exc

    def handshake(self) -> Session:
        client_nonce = new_nonce()
        hello = Hello(self.principal, client_nonce, self.stamps).encode()
        self._send(Frame(FrameType.HELLO, hello))
        reply = self._recv()
        raise_for_err(reply)
        if reply.frame_type is not FrameType.HELLO_ACK:
            raise ProtocolError(f"expected HELLO_ACK, got {reply.frame_type.name}")
        session_id, server_nonce = decode_hello_ack(reply.payload)
        self._send(Frame(FrameType.ACK, proof(self._secret, b"client", hello, reply.payload)))
        done = self._recv()
        raise_for_err(done)
        expected = proof(self._secret, b"server", hello, reply.payload)
        if done.frame_type is not FrameType.ACK or not hmac.compare_digest(done.payload, expected):
            raise BadCredential("server failed to prove knowledge of the shared secret")
        key = derive_session_key(self._secret, client_nonce, server_nonce, session_id)
        return Session(session_id, key, self.principal, self.stamps)

    def _require_session(self) -> Session:
        if self.session is None:
            raise ProtocolError("not connected")
        return self.session

    # -- raw requests ----------------------------------------------------
    def send_request(self, op: Op, object_id: str | None = None,
                     stream: MergedStream | None = None) -> Frame:
        """Frame, send and await the response to one request.

        Returns the ACK or STREAM response frame; an ERR frame raises
        the error class for the gateway's code.
        """
        session = self._require_session()
        self._seq += 1
        body = RequestBody(self._seq, op, self.policy, object_id or "")
        ftype = OP_FRAMES[op]
        self._send(Frame(ftype, seal_body(session.session_key, b"c2s", ftype, body.encode(), self.policy)))
        if op is Op.PUT:
            if stream is None:
                raise ProtocolError("PUT needs a stream")
            self._send(Frame(FrameType.STREAM, stream.to_bytes()))
        resp = self._recv()
        raise_for_err(resp)
        return resp

    # -- convenience -----------------------------------------------------
    def put(self, object_id: str, data: bytes, key: DataKey | None = None) -> None:
        session = self._require_session()
        env = envelope.seal(data, key or self.keyring.default())
        stream = chaff.merge_payload(env.to_bytes(), self.policy, session.session_key)
        self.send_request(Op.PUT, object_id, stream)

    def get_envelope(self, object_id: str) -> bytes:
        resp = self.send_request(Op.GET, object_id)
        if resp.frame_type is not FrameType.STREAM:
            raise ProtocolError(f"expected STREAM, got {resp.frame_type.name}")
        return chaff.extract(MergedStream.from_bytes(resp.payload), self._require_session().session_key)

    def get(self, object_id: str) -> bytes:
        return envelope.open_bytes(self.get_envelope(object_id), self.keyring)

    def delete(self, object_id: str) -> None:
        self.send_request(Op.DELETE, object_id)

    def list(self) -> list[str]:
        resp = self.send_request(Op.LIST)
        names = open_body(self._require_session().session_key, b"s2c", FrameType.LIST, resp.payload)
        return json.loads(names)
