"""``aas`` command line: server, client, audit and attack-simulation entry points.

Exit codes: 0 success, 1 check failed, 2 usage error, 10-19 module errors
(see :mod:`aas_vault.errors`).
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import audit as audit_mod
from .client import VaultClient
from .config import Config, parse_addr
from .envelope import DataKey, Keyring
from .errors import AASError, ConfigError, LedgerCorrupt, LedgerUnavailable
from .ledger import Ledger
from .rules import compile_rules

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


class _Out:
    def __init__(self, as_json: bool) -> None:
        self.as_json = as_json

    def emit(self, text: str, data: dict[str, Any]) -> None:
        if self.as_json:
            print(json.dumps(data, indent=2))
        else:
            print(text)


def _parse_time(value: str) -> int:
    """Nanoseconds since the epoch, from an integer or an ISO-8601 string."""
    if value.lstrip("-").isdigit():
        return int(value)
    try:
        dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a timestamp: {value!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp()) * 10**9 + dt.microsecond * 1000


def _client(cfg: Config) -> VaultClient:
    if not cfg.principal:
        raise ConfigError("no principal configured")
    try:
        ring = Keyring.load(cfg.keyring)
    except FileNotFoundError:
        raise ConfigError(f"keyring {cfg.keyring} not found; run 'aas keygen'") from None
    addr = parse_addr(cfg.server_addr or cfg.listen_addr)
    return VaultClient(addr, cfg.principal, cfg.secret(), cfg.stamps(), ring, cfg.policy())


def _open_ledger(cfg: Config) -> Ledger:
    if not Path(cfg.ledger_path).exists():
        raise LedgerUnavailable(f"no ledger at {cfg.ledger_path}")
    return Ledger(cfg.ledger_path, read_only=True)


def cmd_serve(args: argparse.Namespace, cfg: Config, out: _Out) -> int:
    from .server import VaultServer, load_principals

    try:
        principals = load_principals(cfg.principals_file)
    except FileNotFoundError:
        raise ConfigError(f"principals file {cfg.principals_file} not found") from None
    server = VaultServer(cfg.data_dir, cfg.ledger_path, principals,
                         parse_addr(args.listen or cfg.listen_addr), fsync=cfg.fsync)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.ledger.close()
    return EXIT_OK


def cmd_put(args: argparse.Namespace, cfg: Config, out: _Out) -> int:
    data = Path(args.file).read_bytes()
    with _client(cfg) as c:
        c.put(args.id, data)
    out.emit(f"stored {args.id} ({len(data)} bytes)", {"object_id": args.id, "bytes": len(data)})
    return EXIT_OK


def cmd_get(args: argparse.Namespace, cfg: Config, out: _Out) -> int:
    with _client(cfg) as c:
        data = c.get(args.id)
    Path(args.out).write_bytes(data)
    out.emit(f"wrote {args.out} ({len(data)} bytes)", {"object_id": args.id, "bytes": len(data), "path": args.out})
    return EXIT_OK


def cmd_rm(args: argparse.Namespace, cfg: Config, out: _Out) -> int:
    with _client(cfg) as c:
        c.delete(args.id)
    out.emit(f"deleted {args.id}", {"object_id": args.id, "deleted": True})
    return EXIT_OK


def cmd_ls(args: argparse.Namespace, cfg: Config, out: _Out) -> int:
    with _client(cfg) as c:
        names = c.list()
    out.emit("\n".join(names), {"objects": names})
    return EXIT_OK


def cmd_keygen(args: argparse.Namespace, cfg: Config, out: _Out) -> int:
    if args.principal:
        from .server import load_principals, save_principals

        path = Path(cfg.principals_file)
        table = load_principals(path) if path.exists() else {}
        if args.principal in table:
            raise ConfigError(f"principal {args.principal!r} already exists")
        table[args.principal] = secrets.token_bytes(32)
        save_principals(path, table)
        hexsecret = table[args.principal].hex()
        out.emit(f"principal {args.principal} credential {hexsecret}",
                 {"principal": args.principal, "credential": hexsecret, "principals_file": str(path)})
        return EXIT_OK
    path = Path(cfg.keyring)
    ring = Keyring.load(path) if path.exists() else Keyring()
    key_id = args.key_id or f"k{len(ring) + 1}"
    if key_id in ring:
        raise ConfigError(f"key {key_id!r} already in keyring")
    ring.add(DataKey.generate(key_id))
    ring.save(path)
    out.emit(f"added key {key_id} to {path}", {"key_id": key_id, "keyring": str(path)})
    return EXIT_OK


def cmd_ledger_verify(args: argparse.Namespace, cfg: Config, out: _Out) -> int:
    with _open_ledger(cfg) as ledger:
        result = ledger.verify(args.lo, args.hi)
    text = str(result) + (f" ({result.reason})" if result.reason else "")
    out.emit(text, result.to_dict())
    return EXIT_OK if result.ok else LedgerCorrupt.exit_code


def cmd_audit_run(args: argparse.Namespace, cfg: Config, out: _Out) -> int:
    rules = compile_rules(Path(args.rules).read_text()) if args.rules else []
    start = args.start if args.start is not None else 0
    end = args.end if args.end is not None else 2**64
    with _open_ledger(cfg) as ledger:
        report = audit_mod.run_audit(ledger, args.type.upper(), (start, end), rules, args.identity)
    if args.output:
        Path(args.output).write_text(report.to_json() + "\n")
    if out.as_json:
        print(report.to_json())
    else:
        print(f"{report.audit_type.value} audit {report.report_id}: "
              f"{report.totals['entries_scanned']} entries, {len(report.findings)} findings, "
              f"ledger {report.ledger_verification}")
        for f in report.findings:
            print(f"  [{f.rule_id}] seq {f.seq}: {f.explanation}")
    return EXIT_OK


def cmd_audit_export(args: argparse.Namespace, cfg: Config, out: _Out) -> int:
    start = args.start if args.start is not None else 0
    end = args.end if args.end is not None else 2**64
    with _open_ledger(cfg) as ledger:
        data = audit_mod.export_for_tpa(ledger, (start, end))
    if args.output:
        Path(args.output).write_bytes(data)
        n = data.count(b"\n") - 1
        out.emit(f"exported {n} records to {args.output}", {"records": n, "path": args.output})
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


def cmd_attack_sim(args: argparse.Namespace, cfg: Config, out: _Out) -> int:
    from .adversary import attack_simulation
    from .chaff import ChaffPolicy

    policy = ChaffPolicy.from_ratio(args.ratio, args.bench_size) if args.ratio is not None else cfg.policy()
    with tempfile.TemporaryDirectory(prefix="aas-sim-") as tmp:
        result = attack_simulation(tmp, policy, objects=args.objects, object_size=args.size, seed=args.seed)
    d = result.to_dict()
    passed = (result.valid and result.honest.accuracy <= 0.55 and not result.canary_on_wire
              and result.replay_ok_outcomes == 0 and all(n >= 1 for n in result.replay_denied))
    d["passed"] = passed
    lines = [f"{k}: {v}" for k, v in d.items()]
    out.emit("\n".join(lines), d)
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aas", description="Chaffed, audited encrypted storage vault")
    p.add_argument("--config", help="config file (default: $AAS_CONFIG or ./aas.conf)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the vault server")
    s.add_argument("--listen", help="host:port (overrides listen_addr)")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("put", help="encrypt and upload a file")
    s.add_argument("--id", required=True)
    s.add_argument("file")
    s.set_defaults(func=cmd_put)

    s = sub.add_parser("get", help="download and decrypt an object")
    s.add_argument("--id", required=True)
    s.add_argument("out")
    s.set_defaults(func=cmd_get)

    s = sub.add_parser("rm", help="delete an object")
    s.add_argument("--id", required=True)
    s.set_defaults(func=cmd_rm)

    s = sub.add_parser("ls", help="list own objects")
    s.set_defaults(func=cmd_ls)

    s = sub.add_parser("keygen", help="add a data key, or provision a principal with --principal")
    s.add_argument("--key-id")
    s.add_argument("--principal")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("ledger-verify", help="recompute the ledger hash chain")
    s.add_argument("--lo", type=int)
    s.add_argument("--hi", type=int)
    s.set_defaults(func=cmd_ledger_verify)

    a = sub.add_parser("audit", help="audits and auditor exports")
    asub = a.add_subparsers(dest="audit_command", required=True)
    s = asub.add_parser("run", help="run one audit")
    s.add_argument("--type", required=True, choices=["interim", "final", "external"])
    s.add_argument("--identity")
    s.add_argument("--rules")
    s.add_argument("--start", type=_parse_time)
    s.add_argument("--end", type=_parse_time)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_audit_run)
    s = asub.add_parser("export", help="log-only export for a third-party auditor")
    s.add_argument("--start", type=_parse_time)
    s.add_argument("--end", type=_parse_time)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_audit_export)

    s = sub.add_parser("attack-sim", help="passive attacker simulation over loopback")
    s.add_argument("--ratio")
    s.add_argument("--bench-size", type=int, default=64)
    s.add_argument("--objects", type=int, default=24)
    s.add_argument("--size", type=int, default=16 * 1024)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_attack_sim)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = _Out(args.json)
    try:
        cfg = Config.load(args.config)
        if getattr(args, "type", None) == "external" and not args.identity:
            parser.error("--identity is required for an external audit")
        return args.func(args, cfg, out)
    except AASError as exc:
        out.emit(f"error: {exc}", {"error": type(exc).__name__, "message": str(exc)})
        return exc.exit_code
    except (FileNotFoundError, PermissionError) as exc:
        out.emit(f"error: {exc}", {"error": type(exc).__name__, "message": str(exc)})
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
