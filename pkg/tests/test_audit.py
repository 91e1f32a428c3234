import json
from datetime import timedelta

import pytest

from aas_vault import audit
from aas_vault.audit import AuditScheduler, AuditType, SimulatedClock, run_audit
from aas_vault.errors import AuditError, LedgerUnavailable
from aas_vault.ledger import AccessLogEntry, Ledger, Op, Outcome
from aas_vault.rules import PredicateKind, compile_rules

from oracle import brute_force
from scenarios import MINUTE, RULES, crafted_ledger

ALL = (0, 2**64)


def test_rule_set_covers_all_kinds():
    kinds = {r.kind for r in compile_rules("\n".join(RULES))}
    assert kinds == set(PredicateKind)


@pytest.mark.parametrize("seed", range(8))
def test_findings_match_brute_force(tmp_path, seed):
    led = crafted_ledger(tmp_path / "l", 200, seed)
    rules = compile_rules("\n".join(RULES))
    report = run_audit(led, "INTERIM", ALL, rules)
    got = {(f.rule_id, f.seq) for f in report.findings}
    assert len(got) == len(report.findings)
    assert got == brute_force(RULES, led.entries())
    assert got  # the scenario actually exercises the rules
    led.close()


def test_one_access_outside_window(tmp_path):
    with Ledger(tmp_path / "l", fsync=False) as led:
        led.append(AccessLogEntry(0, 3 * 60 * MINUTE, "alice", "10.0.0.1:1", "z", "a", "d",
                                  Op.GET, "alice/x", Outcome.OK))
        rules = compile_rules("rule r scope id=* object=* when time_window 09:00-17:00")
        report = run_audit(led, AuditType.FINAL, ALL, rules)
    assert len(report.findings) == 1 and report.findings[0].seq == 0
    assert "03:00" in report.findings[0].explanation


def test_empty_rules_totals(tmp_path):
    led = crafted_ledger(tmp_path / "l", 40, 1)
    report = run_audit(led, "INTERIM", ALL, [])
    assert report.findings == []
    assert report.totals["entries_scanned"] == 40
    assert sum(report.totals["by_outcome"].values()) == 40
    assert sum(report.totals["by_op"].values()) == 40
    assert str(report.ledger_verification) == "OK"
    led.close()


def test_external_scope(tmp_path):
    with Ledger(tmp_path / "l", fsync=False) as led:
        for i in range(5):
            led.append(AccessLogEntry(0, i + 1, "alice", "n", "z", "a", "d", Op.GET, "alice/a", Outcome.OK))
        assert run_audit(led, "EXTERNAL", ALL, [], "bob").totals["entries_scanned"] == 0
        led.append(AccessLogEntry(0, 10, "bob", "n", "z", "a", "d", Op.GET, "bob/b", Outcome.OK))
        led.append(AccessLogEntry(0, 11, "carol", "n", "z", "a", "d", Op.GET, "bob/b", Outcome.DENIED))
        rep = run_audit(led, "EXTERNAL", ALL, compile_rules(RULES[7]), "bob")
    assert rep.totals["entries_scanned"] == 2
    assert [f.seq for f in rep.findings] == [6]


def test_external_scope_oracle(tmp_path):
    led = crafted_ledger(tmp_path / "l", 200, 4)
    rules = compile_rules("\n".join(RULES))
    for who in ("alice", "bob", "carol"):
        rep = run_audit(led, "EXTERNAL", ALL, rules, who)
        scoped = [e for e in led.entries() if e.identity == who or e.object_id.startswith(who + "/")]
        assert rep.totals["entries_scanned"] == len(scoped)
        assert {(f.rule_id, f.seq) for f in rep.findings} == brute_force(RULES, scoped)
        assert all(rep.entries[f.seq].identity == who or rep.entries[f.seq].object_id.startswith(who + "/")
                   for f in rep.findings)
    led.close()


def test_external_requires_identity(tmp_path):
    with Ledger(tmp_path / "l", fsync=False) as led:
        with pytest.raises(AuditError):
            run_audit(led, "EXTERNAL", ALL, [])


def test_period_half_open(tmp_path):
    with Ledger(tmp_path / "l", fsync=False) as led:
        for t in (10, 20, 30):
            led.append(AccessLogEntry(0, t, "a", "n", "z", "a", "d", Op.LIST, "", Outcome.OK))
        assert run_audit(led, "INTERIM", (10, 30), []).totals["entries_scanned"] == 2


def test_report_determinism(tmp_path):
    led = crafted_ledger(tmp_path / "l", 150, 2)
    rules = compile_rules("\n".join(RULES))
    a = run_audit(led, "FINAL", ALL, rules)
    b = run_audit(led, "FINAL", ALL, rules)
    assert a.report_id != b.report_id
    assert a.to_json(with_id=False) == b.to_json(with_id=False)
    led.close()


def test_report_records_corruption(tmp_path):
    led = crafted_ledger(tmp_path / "l", 20, 3)
    led.close()
    raw = bytearray((tmp_path / "l").read_bytes())
    raw[40] ^= 1
    (tmp_path / "l").write_bytes(bytes(raw))
    with Ledger(tmp_path / "l", read_only=True) as ro:
        rep = run_audit(ro, "INTERIM", ALL, [])
    assert str(rep.ledger_verification) == "FirstBad(0)"


def test_unreadable_ledger(tmp_path):
    led = crafted_ledger(tmp_path / "l", 3, 3)
    (tmp_path / "l").unlink()
    with pytest.raises(LedgerUnavailable):
        run_audit(led, "INTERIM", ALL, [])
    led.close()


# -- scheduling --------------------------------------------------------------

def test_one_year_quarterly(tmp_path):
    with Ledger(tmp_path / "l", fsync=False) as led:
        clock = SimulatedClock(0)
        sched = audit.schedule_audits(led, [], clock)
        clock.advance(timedelta(days=365))
        reports = list(sched)
    kinds = [r.audit_type for r in reports]
    assert kinds.count(AuditType.INTERIM) == 4 and kinds.count(AuditType.FINAL) == 1


def test_no_advance_no_reports(tmp_path):
    with Ledger(tmp_path / "l", fsync=False) as led:
        assert list(audit.schedule_audits(led, [], SimulatedClock(5))) == []


def test_second_interims_partition(tmp_path):
    with Ledger(tmp_path / "l", fsync=False) as led:
        clock = SimulatedClock(1000)
        sched = AuditScheduler(led, [], clock, timedelta(seconds=1), timedelta(days=1))
        clock.advance(10)
        reports = list(sched)
    assert len(reports) == 10
    periods = [r.period for r in reports]
    assert periods[0][0] == 1000
    for (a0, a1), (b0, b1) in zip(periods, periods[1:]):
        assert a1 == b0 and a1 - a0 == 10**9
    assert periods[-1][1] == 1000 + 10 * 10**9


def test_scheduler_incremental(tmp_path):
    with Ledger(tmp_path / "l", fsync=False) as led:
        clock = SimulatedClock(0)
        sched = audit.schedule_audits(led, [], clock)
        seen = []
        for _ in range(365):
            clock.advance(timedelta(days=1))
            seen.extend(r.audit_type for r in sched)
    assert seen == [AuditType.INTERIM] * 4 + [AuditType.FINAL]


def test_scheduler_reports_cover_entries(tmp_path):
    day = 86_400 * 10**9
    with Ledger(tmp_path / "l", fsync=False) as led:
        for d in range(0, 365, 5):
            led.append(AccessLogEntry(0, d * day + 1, "a", "n", "z", "a", "d", Op.GET, "a/x", Outcome.OK))
        clock = SimulatedClock(0)
        sched = audit.schedule_audits(led, [], clock)
        clock.advance(timedelta(days=365))
        reports = list(sched)
    interim = sum(r.totals["entries_scanned"] for r in reports if r.audit_type is AuditType.INTERIM)
    final = [r for r in reports if r.audit_type is AuditType.FINAL][0]
    assert final.totals["entries_scanned"] == 73
    assert interim == len([d for d in range(0, 360, 5)])


# -- auditor export ----------------------------------------------------------

def _export_lines(led, period=None):
    lines = audit.export_for_tpa(led, period).decode().splitlines()
    return json.loads(lines[0]), [json.loads(x) for x in lines[1:]]


def test_export_empty_period(tmp_path):
    led = crafted_ledger(tmp_path / "l", 10, 0)
    head, recs = _export_lines(led, (0, 1))
    assert head["format"] == "aas-tpa-export" and head["records"] == 0 and recs == []
    led.close()


def test_export_counts_and_stamps(tmp_path):
    led = crafted_ledger(tmp_path / "l", 10, 0)
    head, recs = _export_lines(led)
    assert head["records"] == 10 and len(recs) == 10
    for r in recs:
        for k in ("time_ns", "identity", "network", "location_zone", "application", "device_id"):
            assert r[k] not in (None, "")
        assert len(bytes.fromhex(r["block_hash"])) == 32
    assert head["tail_hash"] == recs[-1]["block_hash"]
    led.close()
