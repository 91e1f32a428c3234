"""User-definable audit rules.

One rule per line::

    rule <id> scope id=<glob> object=<glob> when <predicate>

    predicate := time_window HH:MM-HH:MM
               | network_allow <cidr>[,<cidr>...]
               | location_allow <zone>[,<zone>...]
               | device_allow <device>[,<device>...]
               | rate_limit <n> per <seconds>s
               | outcome_watch denied

Globs support ``*`` only. Blank lines and ``#`` comments are ignored by
:func:`compile_rules`.
"""

from __future__ import annotations

import enum
import ipaddress
import re
from dataclasses import dataclass, field
from typing import Union

from .errors import InvalidCIDR, InvalidWindow, ParseError
from .ledger import AccessLogEntry, Outcome

NS_PER_MINUTE = 60 * 10**9
NS_PER_SECOND = 10**9
MINUTES_PER_DAY = 1440


class PredicateKind(enum.Enum):
    TIME_WINDOW = "time_window"
    NETWORK_ALLOW = "network_allow"
    LOCATION_ALLOW = "location_allow"
    DEVICE_ALLOW = "device_allow"
    RATE_LIMIT = "rate_limit"
    OUTCOME_WATCH = "outcome_watch"


def glob_to_regex(pattern: str) -> re.Pattern[str]:
    return re.compile("^" + ".*".join(re.escape(p) for p in pattern.split("*")) + "$", re.DOTALL)


def minute_of_day(time_ns: int) -> int:
    return (time_ns // NS_PER_MINUTE) % MINUTES_PER_DAY


def host_of(network: str) -> str:
    """``1.2.3.4:80`` -> ``1.2.3.4``; ``[::1]:80`` -> ``::1``."""
    if network.startswith("["):
        return network[1:network.find("]")] if "]" in network else network
    host, sep, _ = network.rpartition(":")
    return host if sep else network


@dataclass(frozen=True)
class TimeWindow:
    start_minute: int
    end_minute: int

    def allows(self, minute: int) -> bool:
        if self.start_minute < self.end_minute:
            return self.start_minute <= minute < self.end_minute
        return minute >= self.start_minute or minute < self.end_minute

    def __str__(self) -> str:
        f = lambda m: f"{m // 60:02d}:{m % 60:02d}"  # noqa: E731
        return f"{f(self.start_minute)}-{f(self.end_minute)}"


@dataclass(frozen=True)
class NetworkAllow:
    blocks: tuple[ipaddress.IPv4Network | ipaddress.IPv6Network, ...]

    def allows(self, network: str) -> bool:
        try:
            addr = ipaddress.ip_address(host_of(network))
        except ValueError:
            return False
        return any(addr.version == b.version and addr in b for b in self.blocks)


@dataclass(frozen=True)
class MemberAllow:
    values: frozenset[str]


@dataclass(frozen=True)
class RateLimit:
    max_count: int
    window_s: int


@dataclass(frozen=True)
class OutcomeWatch:
    outcome: Outcome = Outcome.DENIED


Predicate = Union[TimeWindow, NetworkAllow, MemberAllow, RateLimit, OutcomeWatch]


@dataclass(frozen=True)
class AuditRule:
    rule_id: str
    identity_glob: str
    object_glob: str
    kind: PredicateKind
    predicate: Predicate
    source: str = ""
    _id_re: re.Pattern[str] = field(init=False, repr=False, compare=False)
    _obj_re: re.Pattern[str] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_id_re", glob_to_regex(self.identity_glob))
        object.__setattr__(self, "_obj_re", glob_to_regex(self.object_glob))

    def in_scope(self, e: AccessLogEntry) -> bool:
        return bool(self._id_re.match(e.identity) and self._obj_re.match(e.object_id))

    def check(self, e: AccessLogEntry) -> str | None:
        """Explanation if ``e`` violates a per-entry predicate, else ``None``.

        RATE_LIMIT depends on neighbouring entries and is evaluated by the
        audit runner instead.
        """
        p = self.predicate
        if self.kind is PredicateKind.TIME_WINDOW:
            m = minute_of_day(e.time_ns)
            if not p.allows(m):
                return f"access at {m // 60:02d}:{m % 60:02d} UTC outside window {p}"
        elif self.kind is PredicateKind.NETWORK_ALLOW:
            if not p.allows(e.network):
                return f"network {e.network} not in allowed blocks"
        elif self.kind is PredicateKind.LOCATION_ALLOW:
            if e.location_zone not in p.values:
                return f"location {e.location_zone!r} not allowed"
        elif self.kind is PredicateKind.DEVICE_ALLOW:
            if e.device_id not in p.values:
                return f"device {e.device_id!r} not allowed"
        elif self.kind is PredicateKind.OUTCOME_WATCH:
            if e.outcome is p.outcome:
                return f"{e.op.value} on {e.object_id or '-'} was {e.outcome.value}"
        return None


class _Tokens:
    def __init__(self, text: str, line: int | None) -> None:
        self.text = text
        self.line = line
        self.items = [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", text)]
        self.i = 0

    def error(self, msg: str, col: int | None = None, cls: type[ParseError] = ParseError) -> ParseError:
        if col is None:
            col = self.items[self.i][1] if self.i < len(self.items) else len(self.text) + 1
        return cls(col, msg, self.line)

    def next(self, what: str) -> tuple[str, int]:
        if self.i >= len(self.items):
            raise self.error(f"expected {what}, found end of rule")
        tok = self.items[self.i]
        self.i += 1
        return tok

    def expect(self, word: str) -> None:
        tok, col = self.next(repr(word))
        if tok != word:
            raise self.error(f"expected {word!r}, found {tok!r}", col)

    def keyvalue(self, key: str) -> str:
        tok, col = self.next(f"{key}=<glob>")
        k, sep, v = tok.partition("=")
        if k != key or not sep or not v:
            raise self.error(f"expected {key}=<glob>, found {tok!r}", col)
        return v

    def done(self) -> None:
        if self.i < len(self.items):
            raise self.error(f"unexpected trailing token {self.items[self.i][0]!r}")


_HHMM = re.compile(r"^([01]\d|2[0-3]):([0-5]\d)$")
_RULE_ID = re.compile(r"^[A-Za-z0-9_.\-]+$")


def _parse_window(tok: str, col: int, t: _Tokens) -> TimeWindow:
    a, sep, b = tok.partition("-")
    ma, mb = _HHMM.match(a), _HHMM.match(b)
    if not sep or not ma or not mb:
        raise t.error(f"bad time window {tok!r}, want HH:MM-HH:MM", col, InvalidWindow)
    start = int(ma.group(1)) * 60 + int(ma.group(2))
    end = int(mb.group(1)) * 60 + int(mb.group(2))
    if start == end:
        raise t.error("time window is empty", col, InvalidWindow)
    return TimeWindow(start, end)


def _split_list(tok: str, col: int, t: _Tokens) -> list[str]:
    parts = tok.split(",")
    if any(not p for p in parts):
        raise t.error(f"empty element in list {tok!r}", col)
    return parts


def compile_rule(text: str, line: int | None = None) -> AuditRule:
    t = _Tokens(text, line)
    t.expect("rule")
    rule_id, col = t.next("rule id")
    if not _RULE_ID.match(rule_id):
        raise t.error(f"invalid rule id {rule_id!r}", col)
    t.expect("scope")
    id_glob = t.keyvalue("id")
    obj_glob = t.keyvalue("object")
    t.expect("when")
    word, col = t.next("predicate")
    try:
        kind = PredicateKind(word)
    except ValueError:
        raise t.error(f"unknown predicate {word!r}", col) from None

    pred: Predicate
    if kind is PredicateKind.TIME_WINDOW:
        tok, col = t.next("HH:MM-HH:MM")
        pred = _parse_window(tok, col, t)
    elif kind is PredicateKind.NETWORK_ALLOW:
        tok, col = t.next("CIDR list")
        blocks = []
        for part in _split_list(tok, col, t):
            try:
                blocks.append(ipaddress.ip_network(part, strict=True))
            except ValueError as exc:
                raise t.error(f"invalid CIDR {part!r}: {exc}", col, InvalidCIDR) from None
        pred = NetworkAllow(tuple(blocks))
    elif kind in (PredicateKind.LOCATION_ALLOW, PredicateKind.DEVICE_ALLOW):
        tok, col = t.next("value list")
        pred = MemberAllow(frozenset(_split_list(tok, col, t)))
    elif kind is PredicateKind.RATE_LIMIT:
        tok, col = t.next("count")
        if not tok.isdigit() or int(tok) < 1:
            raise t.error(f"rate limit count must be a positive integer, found {tok!r}", col)
        t.expect("per")
        wtok, wcol = t.next("<seconds>s")
        if not re.match(r"^\d+s$", wtok) or int(wtok[:-1]) < 1:
            raise t.error(f"rate window must look like 60s with W > 0, found {wtok!r}", wcol, InvalidWindow)
        pred = RateLimit(int(tok), int(wtok[:-1]))
    else:
        tok, col = t.next("'denied'")
        if tok != "denied":
            raise t.error(f"outcome_watch supports only 'denied', found {tok!r}", col)
        pred = OutcomeWatch()
    t.done()
    return AuditRule(rule_id, id_glob, obj_glob, kind, pred, text.strip())


def compile_rules(text: str) -> list[AuditRule]:
    rules = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        rule = compile_rule(line, lineno)
        if rule.rule_id in seen:
            raise ParseError(1, f"duplicate rule id {rule.rule_id!r}", lineno)
        seen.add(rule.rule_id)
        rules.append(rule)
    return rules
