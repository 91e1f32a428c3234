from __future__ import annotations

import re
from dataclasses import dataclass, field

UNKNOWN = "unknown"
UNAUTHENTICATED = "unauthenticated"
_MAC_RE = re.compile(r"^[0-9A-Fa-f]{2}([:-][0-9A-Fa-f]{2}){5}$")


@dataclass(frozen=True)
class DeclaredStamps:
    """Client-declared context; ``network_address`` is filled in by the server."""

    location_zone: str
    application: str
    device_id: str
    network_address: str = UNKNOWN

    def missing(self) -> list[str]:
        out = [name for name in ("location_zone", "application", "device_id")
               if not getattr(self, name).strip()]
        if "device_id" not in out and not _MAC_RE.match(self.device_id):
            out.append("device_id")
        return out


@dataclass
class Session:
    session_id: bytes
    session_key: bytes = field(repr=False)
    principal: str
    stamps: DeclaredStamps
    # last request sequence number accepted from the client
    last_seq: int = -1
