"""Exception hierarchy shared by every layer of the vault.

Each class carries the CLI exit code it maps to (10-19) and, where the error
crosses the wire, the numeric code carried in an ERR frame.
"""

from __future__ import annotations


class AASError(Exception):
    exit_code = 19
    wire_code = 0


# envelope
class AuthenticationFailure(AASError):
    exit_code = 10


class KeyNotFound(AASError):
    exit_code = 11


class NonceExhausted(AASError):
    exit_code = 10


# chaff codec
class ChaffError(AASError):
    exit_code = 12


class ZeroBenchSize(ChaffError):
    pass


class CountOverflow(ChaffError):
    pass


class PolicyInvalid(ChaffError):
    pass


class HeaderAuthFailure(ChaffError):
    pass


class TruncatedStream(ChaffError):
    pass


# wire protocol
class ProtocolError(AASError):
    exit_code = 13
    wire_code = 4


class BadMagic(ProtocolError):
    pass


class BadType(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class ConnectionLost(ProtocolError):
    pass


class HandshakeError(AASError):
    exit_code = 13


class UnknownPrincipal(HandshakeError):
    wire_code = 5


class BadCredential(HandshakeError):
    wire_code = 6


class StampsMissing(HandshakeError):
    wire_code = 7


class ReplayDetected(ProtocolError):
    wire_code = 8


# gateway / storage
class GatewayError(AASError):
    exit_code = 14


class NotFound(GatewayError):
    wire_code = 1


class Denied(GatewayError):
    wire_code = 2


class StorageFailure(AASError):
    exit_code = 18
    wire_code = 3


class ServerError(AASError):
    """Client-side view of an ERR frame; ``code`` is the server's wire code."""

    exit_code = 14

    def __init__(self, code: int, message: str = "") -> None:
        super().__init__(f"server error {code}: {message}" if message else f"server error {code}")
        self.code = code
        self.message = message

    @property
    def kind(self) -> str:
        cls = WIRE_ERRORS.get(self.code)
        return cls.__name__ if cls else "Unknown"


# ledger
class LedgerCorrupt(AASError):
    exit_code = 15


# audit
class AuditError(AASError):
    exit_code = 16


class ParseError(AuditError):
    def __init__(self, position: int, message: str, line: int | None = None) -> None:
        where = f"line {line}, col {position}" if line is not None else f"col {position}"
        super().__init__(f"{where}: {message}")
        self.position = position
        self.line = line
        self.message = message


class InvalidCIDR(ParseError):
    pass


class InvalidWindow(ParseError):
    pass


class LedgerUnavailable(AuditError):
    pass


# adversary
class InsufficientSamples(AASError):
    exit_code = 17


class ConfigError(AASError):
    exit_code = 17


# map wire codes back to exception classes for the client
WIRE_ERRORS: dict[int, type[AASError]] = {
    cls.wire_code: cls
    for cls in (NotFound, Denied, StorageFailure, ProtocolError, UnknownPrincipal,
                BadCredential, StampsMissing, ReplayDetected)
}
