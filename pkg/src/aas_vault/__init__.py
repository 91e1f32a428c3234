"""Encrypted storage vault with chaffed transport, a logging access gateway
and rule-based auditing over a hash-chained access ledger."""

from .chaff import ChaffPolicy, MergedStream, Priority
from .client import VaultClient
from .envelope import DataKey, EncryptedEnvelope, Keyring
from .ledger import AccessLogEntry, Ledger, Op, Outcome
from .server import VaultServer
from .session import DeclaredStamps

__all__ = [
    "AccessLogEntry",
    "ChaffPolicy",
    "DataKey",
    "DeclaredStamps",
    "EncryptedEnvelope",
    "Keyring",
    "Ledger",
    "MergedStream",
    "Op",
    "Outcome",
    "Priority",
    "VaultClient",
    "VaultServer",
]
__version__ = "0.1.0"
