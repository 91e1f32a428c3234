from __future__ import annotations

import os

import pytest

from aas_vault.chaff import ChaffPolicy
from aas_vault.client import VaultClient
from aas_vault.envelope import DataKey, Keyring
from aas_vault.server import VaultServer
from aas_vault.session import DeclaredStamps

ALICE_STAMPS = DeclaredStamps("eu-west-lab", "aas-test/1.0", "02:00:00:00:00:0a")
BOB_STAMPS = DeclaredStamps("us-east-lab", "aas-test/1.0", "02:00:00:00:00:0b")


@pytest.fixture
def principals():
    return {"alice": os.urandom(32), "bob": os.urandom(32)}


@pytest.fixture
def vault(tmp_path, principals):
    server = VaultServer(tmp_path / "data", tmp_path / "ledger.bin", principals, fsync=False)
    server.start()
    yield server
    server.stop()


@pytest.fixture
def connect(vault, principals):
    """Factory for connected clients; closed at teardown."""
    clients = []

    def _connect(name="alice", policy=None, stamps=None, address=None, keyring=None):
        st = stamps or (ALICE_STAMPS if name == "alice" else BOB_STAMPS)
        ring = keyring or Keyring([DataKey.generate("k1")])
        c = VaultClient(address or vault.address, name, principals[name], st, ring,
                        policy or ChaffPolicy())
        c.connect()
        clients.append(c)
        return c

    yield _connect
    for c in clients:
        c.close()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
