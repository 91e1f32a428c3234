import random

import pytest

from aas_vault.errors import InvalidCIDR, InvalidWindow, ParseError
from aas_vault.ledger import AccessLogEntry, Op, Outcome
from aas_vault.rules import PredicateKind, compile_rule, compile_rules, host_of

from oracle import in_cidr, window_minutes


def e(t_min=0, network="10.1.2.3:4000", **kw):
    base = dict(seq=0, time_ns=t_min * 60 * 10**9, identity="alice", network=network,
                location_zone="z", application="a", device_id="d", op=Op.GET,
                object_id="alice/x", outcome=Outcome.OK)
    base.update(kw)
    return AccessLogEntry(**base)


def test_time_window_rule():
    r = compile_rule("rule r1 scope id=alice object=* when time_window 09:00-17:00")
    assert r.rule_id == "r1" and r.kind is PredicateKind.TIME_WINDOW
    assert r.identity_glob == "alice" and r.object_glob == "*"
    assert r.check(e(3 * 60)) is not None
    assert r.check(e(12 * 60)) is None


def test_network_finding():
    r = compile_rule("rule n scope id=* object=* when network_allow 10.0.0.0/8")
    assert r.check(e(network="192.168.1.5:55")) is not None
    assert r.check(e(network="10.200.0.1:55")) is None


def test_cidr_oracle():
    rng = random.Random(11)
    blocks = ["10.0.0.0/8", "192.168.0.0/16", "172.16.0.0/12", "203.0.113.0/24", "198.51.100.7/32", "0.0.0.0/0"]
    for cidr in blocks:
        r = compile_rule(f"rule c scope id=* object=* when network_allow {cidr}")
        for _ in range(400):
            ip = ".".join(str(rng.randrange(256)) for _ in range(4))
            if rng.random() < 0.3:  # bias towards the block
                base = cidr.split("/")[0].split(".")
                ip = ".".join(base[:2] + ip.split(".")[2:])
            expect_ok = in_cidr(ip, cidr)
            assert (r.check(e(network=f"{ip}:1")) is None) == expect_ok, (cidr, ip)


def test_ipv6_host_parsing():
    assert host_of("[::1]:80") == "::1"
    r = compile_rule("rule v6 scope id=* object=* when network_allow ::1/128")
    assert r.check(e(network="[::1]:80")) is None
    assert r.check(e(network="10.0.0.1:1")) is not None


@pytest.mark.parametrize("window", ["17:00-09:00", "09:00-17:00", "23:59-00:01", "00:00-23:59", "12:30-12:31"])
def test_window_all_minutes(window):
    r = compile_rule(f"rule w scope id=* object=* when time_window {window}")
    a, b = window.split("-")
    allowed = window_minutes(int(a[:2]) * 60 + int(a[3:]), int(b[:2]) * 60 + int(b[3:]))
    for m in range(1440):
        assert (r.check(e(m)) is None) == (m in allowed), m
        # same minute on another day
        assert (r.check(e(m + 1440 * 37)) is None) == (m in allowed)


def test_location_device_outcome():
    loc = compile_rule("rule l scope id=* object=* when location_allow z,y")
    dev = compile_rule("rule d scope id=* object=* when device_allow d")
    out = compile_rule("rule o scope id=* object=* when outcome_watch denied")
    assert loc.check(e()) is None and loc.check(e(location_zone="q")) is not None
    assert dev.check(e()) is None and dev.check(e(device_id="zz")) is not None
    assert out.check(e()) is None and out.check(e(outcome=Outcome.DENIED)) is not None


def test_scope_globs():
    r = compile_rule("rule s scope id=al* object=alice/*.txt when outcome_watch denied")
    assert r.in_scope(e(object_id="alice/report.txt"))
    assert not r.in_scope(e(object_id="alice/report.bin"))
    assert not r.in_scope(e(identity="bob", object_id="alice/a.txt"))


@pytest.mark.parametrize("text,col", [
    ("rul r scope id=* object=* when outcome_watch denied", 1),
    ("rule r scpe id=* object=* when outcome_watch denied", 8),
    ("rule r scope id=* object=* when bogus x", 33),
    ("rule r scope id=* object=* when outcome_watch", 46),
    ("rule r scope id=* object=* when rate_limit 0 per 60s", 44),
    ("rule r scope id=* object=* when outcome_watch denied extra", 54),
    ("rule r scope ident=* object=* when outcome_watch denied", 14),
])
def test_parse_error_positions(text, col):
    with pytest.raises(ParseError) as info:
        compile_rule(text)
    assert info.value.position == col


def test_invalid_cidr():
    with pytest.raises(InvalidCIDR):
        compile_rule("rule r scope id=* object=* when network_allow 10.0.0.1/8")
    with pytest.raises(InvalidCIDR):
        compile_rule("rule r scope id=* object=* when network_allow 300.0.0.0/8")


@pytest.mark.parametrize("w", ["09:00-09:00", "24:00-01:00", "9:00-10:00", "09:60-10:00"])
def test_invalid_window(w):
    with pytest.raises(InvalidWindow):
        compile_rule(f"rule r scope id=* object=* when time_window {w}")


def test_invalid_rate_window():
    with pytest.raises(InvalidWindow):
        compile_rule("rule r scope id=* object=* when rate_limit 3 per 0s")


def test_compile_rules_file():
    text = """
    # comment
    rule a scope id=* object=* when outcome_watch denied

    rule b scope id=bob object=* when rate_limit 5 per 60s  # trailing
    """
    rules = compile_rules(text)
    assert [r.rule_id for r in rules] == ["a", "b"]
    assert rules[1].predicate.max_count == 5 and rules[1].predicate.window_s == 60


def test_duplicate_rule_ids():
    with pytest.raises(ParseError) as info:
        compile_rules("rule a scope id=* object=* when outcome_watch denied\n"
                      "rule a scope id=* object=* when outcome_watch denied")
    assert info.value.line == 2
