"""Interim, final and external audits over the access ledger, plus the
log-only export handed to third-party auditors."""

from __future__ import annotations

import enum
import json
import threading
import time
import uuid
from collections import defaultdict, deque
from dataclasses import dataclass, field
from datetime import timedelta
from typing import Callable, Iterable, Iterator, Sequence

from .errors import AASError, AuditError, LedgerUnavailable
from .ledger import AccessLogEntry, Ledger, Op, Outcome, VerifyResult, dumps_record, export_records
from .rules import NS_PER_SECOND, AuditRule, PredicateKind

NS_PER_DAY = 86_400 * NS_PER_SECOND
DEFAULT_INTERIM = timedelta(days=90)
DEFAULT_FINAL = timedelta(days=365)
EXPORT_FORMAT = "aas-tpa-export"


class AuditType(str, enum.Enum):
    INTERIM = "INTERIM"
    FINAL = "FINAL"
    EXTERNAL = "EXTERNAL"


@dataclass(frozen=True)
class Finding:
    rule_id: str
    seq: int
    explanation: str


@dataclass
class AuditReport:
    report_id: str
    audit_type: AuditType
    period: tuple[int, int]
    scope_identity: str | None
    findings: list[Finding]
    totals: dict[str, object]
    ledger_verification: VerifyResult
    entries: dict[int, AccessLogEntry] = field(default_factory=dict, repr=False)

    def to_dict(self, with_id: bool = True) -> dict[str, object]:
        d: dict[str, object] = {}
        if with_id:
            d["report_id"] = self.report_id
        d["audit_type"] = self.audit_type.value
        d["period"] = {"start_ns": self.period[0], "end_ns": self.period[1]}
        d["scope_identity"] = self.scope_identity
        d["totals"] = self.totals
        d["ledger_verification"] = self.ledger_verification.to_dict()
        d["findings"] = [
            {"rule_id": f.rule_id, "seq": f.seq, "explanation": f.explanation,
             "entry": self.entries[f.seq].to_dict() if f.seq in self.entries else None}
            for f in self.findings
        ]
        return d

    def to_json(self, with_id: bool = True) -> str:
        return json.dumps(self.to_dict(with_id), indent=2)


def owner_of(object_id: str) -> str | None:
    owner, sep, _ = object_id.partition("/")
    return owner if sep else None


def select_entries(entries: Iterable[AccessLogEntry], period: tuple[int, int],
                   scope_identity: str | None = None) -> list[AccessLogEntry]:
    start, end = period
    out = []
    for e in entries:
        if not start <= e.time_ns < end:
            continue
        if scope_identity is not None and e.identity != scope_identity and owner_of(e.object_id) != scope_identity:
            continue
        out.append(e)
    return out


def evaluate(rules: Sequence[AuditRule], entries: Sequence[AccessLogEntry]) -> list[Finding]:
    """All (rule, entry) violations, ordered by rule then seq.

    RATE_LIMIT flags an entry when its identity has more than ``n`` in-scope
    entries in the window ``(t - W, t]`` ending at that entry.
    """
    findings = []
    for rule in rules:
        scoped = [e for e in entries if rule.in_scope(e)]
        if rule.kind is PredicateKind.RATE_LIMIT:
            limit, window_ns = rule.predicate.max_count, rule.predicate.window_s * NS_PER_SECOND
            recent: dict[str, deque[int]] = defaultdict(deque)
            for e in scoped:
                q = recent[e.identity]
                q.append(e.time_ns)
                while q[0] <= e.time_ns - window_ns:
                    q.popleft()
                if len(q) > limit:
                    findings.append(Finding(rule.rule_id, e.seq,
                                            f"{len(q)} accesses by {e.identity} within {rule.predicate.window_s}s "
                                            f"(limit {limit})"))
        else:
            for e in scoped:
                why = rule.check(e)
                if why is not None:
                    findings.append(Finding(rule.rule_id, e.seq, why))
    return findings


def run_audit(ledger: Ledger, audit_type: AuditType | str, period: tuple[int, int],
              rules: Sequence[AuditRule], scope_identity: str | None = None) -> AuditReport:
    audit_type = AuditType(audit_type)
    start, end = period
    if end < start:
        raise AuditError("audit period ends before it starts")
    if audit_type is AuditType.EXTERNAL and not scope_identity:
        raise AuditError("an external audit needs a scope identity")
    if audit_type is not AuditType.EXTERNAL:
        scope_identity = None
    try:
        verification = ledger.verify()
        all_entries = ledger.entries()
    except (OSError, AASError) as exc:
        raise LedgerUnavailable(f"cannot read ledger: {exc}") from exc

    scanned = select_entries(all_entries, period, scope_identity)
    findings = evaluate(rules, scanned)
    by_outcome = {o.value: 0 for o in Outcome}
    by_op = {o.value: 0 for o in Op}
    for e in scanned:
        by_outcome[e.outcome.value] += 1
        by_op[e.op.value] += 1
    totals = {"entries_scanned": len(scanned), "findings": len(findings),
              "by_outcome": by_outcome, "by_op": by_op}
    entry_map = {e.seq: e for e in scanned}
    return AuditReport(uuid.uuid4().hex, audit_type, (start, end), scope_identity, findings,
                       totals, verification, {f.seq: entry_map[f.seq] for f in findings})


def export_for_tpa(ledger: Ledger, period: tuple[int, int] | None = None) -> bytes:
    """Newline-delimited JSON: one header record, then one record per entry.

    Records carry the log stamps and chain hashes only, never object bytes.
    """
    start, end = period if period is not None else (0, 2**64)
    blocks = ledger.blocks()
    records = export_records(blocks, start, end)
    header = {"format": EXPORT_FORMAT, "version": 1,
              "period": {"start_ns": start, "end_ns": end},
              "records": len(records),
              "ledger_verification": ledger.verify().to_dict(),
              "tail_hash": blocks[-1].block_hash.hex() if blocks else None}
    lines = [json.dumps(header, separators=(",", ":"))] + [dumps_record(r) for r in records]
    return ("\n".join(lines) + "\n").encode("utf-8")


# -- scheduling ------------------------------------------------------------

class SimulatedClock:
    def __init__(self, start_ns: int = 0) -> None:
        self._now = start_ns

    def now_ns(self) -> int:
        return self._now

    def advance(self, delta: timedelta | float) -> None:
        secs = delta.total_seconds() if isinstance(delta, timedelta) else delta
        self._now += round(secs * NS_PER_SECOND)


class WallClock:
    def now_ns(self) -> int:
        return time.time_ns()


def _ns(d: timedelta) -> int:
    return (d.days * 86_400 + d.seconds) * NS_PER_SECOND + d.microseconds * 1000


class AuditScheduler:
    """Fires INTERIM audits every ``interim_every`` and FINAL audits every
    ``final_every``, each covering the span since its previous run.

    Iterating yields every report that has come due by the clock's current
    time; reports due at the same instant come out interim first.
    """

    def __init__(self, ledger: Ledger, rules: Sequence[AuditRule], clock,
                 interim_every: timedelta = DEFAULT_INTERIM,
                 final_every: timedelta = DEFAULT_FINAL, start_ns: int | None = None) -> None:
        if interim_every <= timedelta(0) or final_every <= timedelta(0):
            raise AuditError("audit intervals must be positive")
        self.ledger = ledger
        self.rules = list(rules)
        self.clock = clock
        self.interim_ns = _ns(interim_every)
        self.final_ns = _ns(final_every)
        self.start_ns = clock.now_ns() if start_ns is None else start_ns
        self._interims = 0
        self._finals = 0

    def due(self, now_ns: int) -> Iterator[AuditReport]:
        while True:
            next_i = self.start_ns + (self._interims + 1) * self.interim_ns
            next_f = self.start_ns + (self._finals + 1) * self.final_ns
            if min(next_i, next_f) > now_ns:
                return
            if next_i <= next_f:
                self._interims += 1
                yield run_audit(self.ledger, AuditType.INTERIM, (next_i - self.interim_ns, next_i), self.rules)
            else:
                self._finals += 1
                yield run_audit(self.ledger, AuditType.FINAL, (next_f - self.final_ns, next_f), self.rules)

    def __iter__(self) -> Iterator[AuditReport]:
        return self.due(self.clock.now_ns())

    def run(self, sink: Callable[[AuditReport], None], stop: threading.Event,
            poll_s: float = 60.0) -> None:
        while not stop.is_set():
            for report in self:
                sink(report)
            stop.wait(poll_s)


def schedule_audits(ledger: Ledger, rules: Sequence[AuditRule], clock,
                    interim_every: timedelta = DEFAULT_INTERIM,
                    final_every: timedelta = DEFAULT_FINAL) -> AuditScheduler:
    return AuditScheduler(ledger, rules, clock, interim_every, final_every)
