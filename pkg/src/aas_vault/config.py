"""Flat ``key = value`` configuration file.

Relative paths are resolved against the directory holding the file.
``AAS_CONFIG`` names the file when no explicit path is given.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

from .chaff import DEFAULT_BENCH_SIZE, ChaffPolicy, Priority
from .errors import ConfigError, PolicyInvalid
from .session import DeclaredStamps

DEFAULT_CONFIG = "aas.conf"
_PATH_KEYS = ("data_dir", "ledger_path", "principals_file", "keyring", "credential_file")


@dataclass
class Config:
    listen_addr: str = "127.0.0.1:7400"
    server_addr: str = ""
    data_dir: str = "data"
    ledger_path: str = "ledger.bin"
    principals_file: str = "principals.txt"
    keyring: str = "keyring.txt"
    principal: str = ""
    credential: str = ""
    credential_file: str = ""
    priority: str = "balanced"
    ratio: str = ""
    bench_size: int = DEFAULT_BENCH_SIZE
    location_zone: str = ""
    application: str = "aas-cli/0.1"
    device_id: str = ""
    fsync: bool = True

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Config":
        if path is None:
            path = os.environ.get("AAS_CONFIG", DEFAULT_CONFIG)
        p = Path(path)
        cfg = cls()
        if not p.exists():
            if str(path) != DEFAULT_CONFIG:
                raise ConfigError(f"config file {p} not found")
            cfg._resolve(Path.cwd())
            return cfg
        known = {f.name: f for f in fields(cls)}
        for lineno, raw in enumerate(p.read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in known:
                raise ConfigError(f"{p}:{lineno}: unknown or malformed setting {line!r}")
            if key == "bench_size":
                try:
                    setattr(cfg, key, int(value))
                except ValueError:
                    raise ConfigError(f"{p}:{lineno}: bench_size must be an integer") from None
            elif key == "fsync":
                setattr(cfg, key, value.lower() in ("1", "true", "yes", "on"))
            else:
                setattr(cfg, key, value)
        cfg._resolve(p.resolve().parent)
        cfg.policy()  # validate early
        return cfg

    def _resolve(self, base: Path) -> None:
        for key in _PATH_KEYS:
            v = getattr(self, key)
            if v and not Path(v).is_absolute():
                setattr(self, key, str(base / v))

    def policy(self) -> ChaffPolicy:
        try:
            prio = Priority(self.priority.lower())
        except ValueError:
            raise ConfigError(f"priority must be one of speed/balanced/security, not {self.priority!r}") from None
        try:
            ratio = Fraction(self.ratio) if self.ratio else None
            return ChaffPolicy(prio, ratio, self.bench_size)
        except (ValueError, ZeroDivisionError, PolicyInvalid) as exc:
            raise ConfigError(f"invalid chaff settings: {exc}") from None

    def stamps(self) -> DeclaredStamps:
        return DeclaredStamps(self.location_zone, self.application, self.device_id)

    def secret(self) -> bytes:
        hexsecret = self.credential
        if not hexsecret and self.credential_file:
            hexsecret = Path(self.credential_file).read_text().strip()
        try:
            secret = bytes.fromhex(hexsecret)
        except ValueError:
            raise ConfigError("credential is not hex") from None
        if not secret:
            raise ConfigError("no credential configured (credential or credential_file)")
        return secret


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address {addr!r} is not host:port")
    return host.strip("[]") or "127.0.0.1", int(port)
