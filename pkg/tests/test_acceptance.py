"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math
import os
import random
import statistics
import time
from fractions import Fraction

import pytest

from aas_vault import adversary, audit, chaff
from aas_vault.adversary import TapProxy
from aas_vault.chaff import ChaffPolicy, MergedStream, Priority
from aas_vault.client import VaultClient
from aas_vault.envelope import DataKey, EncryptedEnvelope, Keyring
from aas_vault.errors import AASError, Denied, NotFound
from aas_vault.ledger import STAMP_FIELDS, Ledger, Op, Outcome
from aas_vault.rules import PredicateKind, compile_rules
from aas_vault.server import VaultServer
from aas_vault.wire import FrameType, decode_frame

from conftest import ACCEPTANCE_LINES, ALICE_STAMPS, BOB_STAMPS
from oracle import brute_force
from scenarios import RULES, crafted_ledger, crafted_entries

MIB = 1 << 20

pytestmark = pytest.mark.slow


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _server(tmp_path, fsync=False, **principals):
    secrets = principals or {"alice": os.urandom(32), "bob": os.urandom(32)}
    srv = VaultServer(tmp_path / "data", tmp_path / "ledger.bin", secrets, fsync=fsync)
    srv.start()
    return srv, secrets


def _client(addr, name, secret, policy=None, ring=None):
    stamps = ALICE_STAMPS if name == "alice" else BOB_STAMPS
    c = VaultClient(addr, name, secret, stamps, ring or Keyring([DataKey.generate("k1")]),
                    policy or ChaffPolicy())
    c.connect()
    return c


def _windows(data, n=16):
    return {data[i:i + n] for i in range(len(data) - n + 1)}


def _shares_window(haystack, needles, n=16):
    return any(haystack[i:i + n] in needles for i in range(len(haystack) - n + 1))


# -- 1 ------------------------------------------------------------------------

def test_1_end_to_end_round_trip(tmp_path):
    rng = random.Random(20241018)
    srv, sec = _server(tmp_path)
    ring = Keyring([DataKey.generate("k1")])
    combos = [(bs, p) for bs in (1, 16, 64, 4096) for p in Priority]
    clients = {c: _client(srv.address, "alice", sec["alice"], ChaffPolicy(c[1], bench_size=c[0]), ring)
               for c in combos}
    # log-uniform sizes over [0, 1 MiB], both endpoints forced in
    sizes = [0, MIB] + [int(math.exp(rng.uniform(0, math.log(MIB + 1)))) - 1 for _ in range(998)]
    ok = 0
    t0 = time.perf_counter()
    try:
        for i, size in enumerate(sizes):
            c = clients[combos[i % len(combos)]]
            data = rng.randbytes(size)
            c.put(f"obj{i}", data)
            ok += c.get(f"obj{i}") == data
    finally:
        for c in clients.values():
            c.close()
        srv.stop()
    elapsed = time.perf_counter() - t0
    report(1, ok == 1000 and elapsed < 120,
           f"{ok}/1000 byte-identical over 12 (bench size, priority) combos, "
           f"max {max(sizes)} B, {elapsed:.1f}s (target < 120s)")


# -- 2 ------------------------------------------------------------------------

def test_2_size_law(tmp_path):
    ratios = [Fraction(0), Fraction(1, 4), Fraction(1, 3), Fraction(1, 2), Fraction(1), Fraction(3, 2), Fraction(2)]
    key = os.urandom(32)
    mismatches = 0
    cases = 0
    for real in list(range(0, 65)) + [100, 999, 1000, 4097]:
        for r in ratios:
            s = chaff.merge(bytes(real * 8), ChaffPolicy(ratio=r, bench_size=8), key)
            expect = real + -(-real * r.numerator // r.denominator)
            cases += 1
            mismatches += MergedStream.from_bytes(s.to_bytes()).total_count != expect

    # bytes actually seen on the wire for a 1 MiB PUT
    srv, sec = _server(tmp_path)
    wire_bytes = {}
    try:
        payload = os.urandom(MIB)
        for r in ("0", "2"):
            with TapProxy(srv.address) as tap:
                c = _client(tap.address, "alice", sec["alice"], ChaffPolicy.from_ratio(r))
                c.put(f"big{r}", payload)
                c.close()
                tr = tap.transcript()
            streams = [MergedStream.from_bytes(decode_frame(f.raw).payload)
                       for f in tr.frames if f.frame_type == FrameType.STREAM]
            # envelope = key_id_len | "k1" | nonce 16 | length 8 | ciphertext | tag 16
            env_len = 1 + 2 + 16 + 8 + len(payload) + 16
            real = -(-env_len // 64)
            cases += 1
            mismatches += streams[0].total_count != real + chaff.fake_count(real, Fraction(r))
            wire_bytes[r] = len(streams[0].to_bytes())
    finally:
        srv.stop()
    factor = wire_bytes["2"] / wire_bytes["0"]
    report(2, mismatches == 0 and factor >= 2.8,
           f"{cases - mismatches}/{cases} (real_count, ratio) cases exact; 1 MiB wire bytes "
           f"ratio 2.0 / ratio 0 = {factor:.4f} (need >= 2.8)")


# -- 3 ------------------------------------------------------------------------

def test_3_latency_monotonic(tmp_path):
    srv, sec = _server(tmp_path, fsync=True)
    ratios = ["0", "1/4", "1", "2"]
    ring = Keyring([DataKey.generate("k1")])
    clients = {r: _client(srv.address, "alice", sec["alice"], ChaffPolicy.from_ratio(r), ring) for r in ratios}
    payload = os.urandom(256 * 1024)
    samples = {r: [] for r in ratios}
    try:
        for c in clients.values():  # warm-up
            c.put("warm", payload)
        for t in range(30):
            for r in ratios:  # interleaved so drift hits every ratio alike
                t0 = time.perf_counter()
                clients[r].put(f"t{t}", payload)
                samples[r].append(time.perf_counter() - t0)
    finally:
        for c in clients.values():
            c.close()
        srv.stop()
    med = [statistics.median(samples[r]) for r in ratios]
    ordered = all(a <= b for a, b in zip(med, med[1:]))
    shown = ", ".join(f"{r}: {m * 1e3:.2f} ms" for r, m in zip(ratios, med))
    report(3, ordered, f"median 256 KiB PUT latency over 30 trials by ratio: {shown}")


# -- 4 ------------------------------------------------------------------------

def test_4_passive_attack_confusion(tmp_path):
    configs = [(Fraction(1, 4), 64, 24, 40 * 1024), (Fraction(1), 64, 24, 16 * 1024),
               (Fraction(2), 64, 24, 16 * 1024), (Fraction(1), 16, 16, 8 * 1024)]
    lines, ok = [], True
    for i, (ratio, bs, objects, size) in enumerate(configs):
        r = adversary.attack_simulation(tmp_path / f"sim{i}", ChaffPolicy(ratio=ratio, bench_size=bs),
                                        objects=objects, object_size=size, seed=i)
        good = (r.valid and r.honest.samples >= 10_000 and r.honest.accuracy <= 0.55)
        ok &= good
        lines.append(f"ratio {ratio} bench {bs}: acc {r.honest.accuracy:.3f} ({r.honest.best_feature}) "
                     f"on {r.honest.samples} benches, zero-fake control {r.zero_fake_control.accuracy:.3f}, "
                     f"shuffled {r.shuffled_control.accuracy:.3f}")
    report(4, ok, "; ".join(lines))


# -- 5 ------------------------------------------------------------------------

def test_5_access_log_generation(tmp_path):
    rng = random.Random(5)
    srv, sec = _server(tmp_path)
    alice = _client(srv.address, "alice", sec["alice"])
    bob = _client(srv.address, "bob", sec["bob"])
    before = len(srv.ledger)
    names = ["a", "b", "c", "alice/a", "bob/x", "missing"]
    handshakes = 0
    try:
        for _ in range(1000):
            roll = rng.random()
            if roll < 0.03:
                # a rejected handshake is also a request the gateway must log
                c = VaultClient(srv.address, rng.choice(["mallory", "alice"]), os.urandom(32), ALICE_STAMPS)
                with pytest.raises(AASError):
                    c.connect()
                c.close()
                handshakes += 1
                continue
            c = rng.choice([alice, bob])
            op = rng.choice([Op.PUT, Op.GET, Op.GET, Op.DELETE, Op.LIST])
            name = rng.choice(names)
            try:
                if op is Op.PUT:
                    c.put(name, rng.randbytes(rng.randrange(0, 2000)))
                elif op is Op.GET:
                    c.get(name)
                elif op is Op.DELETE:
                    c.delete(name)
                else:
                    c.list()
            except (Denied, NotFound):
                pass
    finally:
        alice.close()
        bob.close()
        srv.stop()
    with Ledger(tmp_path / "ledger.bin", read_only=True) as led:
        new = led.entries()[before:]
    outcomes = {o: sum(e.outcome is o for e in new) for o in Outcome}
    complete = all(str(getattr(e, f)).strip() and getattr(e, f) != "unknown"
                   for e in new for f in STAMP_FIELDS)
    report(5, len(new) == 1000 and complete and outcomes[Outcome.DENIED] > 0 and outcomes[Outcome.NOT_FOUND] > 0,
           f"{len(new)} entries for 1000 requests ({handshakes} failed handshakes), "
           f"all six stamps populated: {complete}; outcomes "
           + ", ".join(f"{o.value} {n}" for o, n in outcomes.items()))


# -- 6 ------------------------------------------------------------------------

def _offsets(data):
    out, pos = [], 0
    while pos < len(data):
        out.append(pos)
        pos += 4 + int.from_bytes(data[pos:pos + 4], "big")
    return out + [len(data)]


def test_6_tamper_evidence(tmp_path):
    path = tmp_path / "ledger.bin"
    crafted_ledger(path, 50, seed=6).close()
    pristine = path.read_bytes()
    starts = _offsets(pristine)
    total = detected = 0
    for k in range(50):
        for pos in range(starts[k], starts[k + 1]):
            bad = bytearray(pristine)
            bad[pos] ^= 0xFF
            path.write_bytes(bytes(bad))
            with Ledger(path, read_only=True) as ro:
                r = ro.verify()
            total += 1
            detected += (not r.ok) and r.first_bad <= k
    path.write_bytes(pristine[:starts[49]])
    with Ledger(path, read_only=True) as ro:
        trunc = ro.verify()
    path.write_bytes(pristine)
    report(6, detected == total and not trunc.ok and trunc.first_bad == 49,
           f"{detected}/{total} single-byte corruptions flagged at or before their block; "
           f"tail truncation -> {trunc}")


# -- 7 ------------------------------------------------------------------------

def test_7_tpa_export_non_leakage(tmp_path):
    srv, sec = _server(tmp_path)
    canary = os.urandom(4096)
    try:
        with TapProxy(srv.address) as tap:
            c = _client(tap.address, "alice", sec["alice"])
            for i in range(5):
                c.put(f"filler{i}", os.urandom(3000))
            c.put("canary", canary)
            assert c.get("canary") == canary
            c.list()
            c.close()
            transcript = tap.transcript()
        stored = [f.read_bytes() for f in srv.storage.files()]
        env = next(b for b in stored if EncryptedEnvelope.from_bytes(b).plaintext_len == 4096)
        export = audit.export_for_tpa(srv.ledger)
    finally:
        srv.stop()
    export_leak = _shares_window(export, _windows(env))
    wire = transcript.all_bytes()
    wire_leak = _shares_window(wire, _windows(canary))
    records = export.count(b"\n") - 1
    report(7, not export_leak and not wire_leak,
           f"export of {records} records ({len(export)} B) shares a 16-byte window "
           f"with the stored envelope: {export_leak}; wire transcript ({len(wire)} B) "
           f"shares one with the plaintext canary: {wire_leak}")


# -- 8 ------------------------------------------------------------------------

def test_8_audit_correctness(tmp_path):
    rules = compile_rules("\n".join(RULES))
    assert {r.kind for r in rules} == set(PredicateKind)
    fp = fn = 0
    total = 0
    for seed in range(20):
        n = 20 + seed * 9  # 20..191 entries
        led = crafted_ledger(tmp_path / f"l{seed}", n, seed)
        rep = audit.run_audit(led, "FINAL", (0, 2**64), rules)
        got = {(f.rule_id, f.seq) for f in rep.findings}
        expect = brute_force(RULES, led.entries())
        fp += len(got - expect)
        fn += len(expect - got)
        total += len(expect)
        led.close()
    with Ledger(tmp_path / "sched", fsync=False) as led:
        for e in crafted_entries(50, 99):
            led.append(e)
        clock = audit.SimulatedClock(0)
        sched = audit.schedule_audits(led, rules, clock)
        clock.advance(365 * 86_400)
        kinds = [r.audit_type for r in sched]
    n_int, n_fin = kinds.count(audit.AuditType.INTERIM), kinds.count(audit.AuditType.FINAL)
    report(8, fp == 0 and fn == 0 and total > 0 and (n_int, n_fin) == (4, 1),
           f"20 crafted ledgers, {total} oracle findings: {fp} false positives, {fn} false negatives; "
           f"one simulated year -> {n_int} interim + {n_fin} final")


# -- 9 ------------------------------------------------------------------------

def test_9_data_at_rest(tmp_path):
    srv, sec = _server(tmp_path)
    canaries = [b"PLAINTEXT-CANARY-" + os.urandom(8).hex().encode() + bytes(64) for _ in range(3)]
    try:
        a = _client(srv.address, "alice", sec["alice"], ChaffPolicy(bench_size=16))
        b = _client(srv.address, "bob", sec["bob"], ChaffPolicy(Priority.SPEED, bench_size=4096))
        for i, can in enumerate(canaries):
            a.put(f"c{i}", can * 20)
            b.put(f"c{i}", os.urandom(100) + can)
        a.put("empty", b"")
        a.put("gone", canaries[0])
        a.delete("gone")
        a.close()
        b.close()
    finally:
        srv.stop()
    files = [p for p in (tmp_path / "data").rglob("*") if p.is_file()]
    parsed = leaks = 0
    for p in files:
        raw = p.read_bytes()
        try:
            EncryptedEnvelope.from_bytes(raw)
            parsed += 1
        except ValueError:
            pass
        leaks += any(_shares_window(raw, _windows(c)) for c in canaries)
    report(9, files and parsed == len(files) and leaks == 0,
           f"{parsed}/{len(files)} files parse as envelopes; {leaks} contain canary bytes")


# -- 10 -----------------------------------------------------------------------

def test_10_replay_resistance(tmp_path):
    srv, sec = _server(tmp_path)
    try:
        with TapProxy(srv.address) as tap:
            c = _client(tap.address, "alice", sec["alice"])
            c.put("a", os.urandom(500))
            c.get("a")
            c.list()
            c.delete("a")
            c.close()
            frames = [f.raw for f in tap.transcript().client_frames(0)]
        n = len(frames)
        attempts = [frames[:k] for k in range(1, n + 1)]          # every prefix
        attempts += [frames[k:] for k in range(1, n)]             # every suffix
        attempts += [[f] for f in frames]                         # every frame alone
        attempts += [frames[1:2] * 3, frames[:1] + frames[2:]]   # duplicated / skipped
        ok_total, short = 0, 0
        for seq in attempts:
            before = len(srv.ledger)
            adversary.replay(srv.address, seq)
            time.sleep(0.01)
            new = srv.ledger.entries()[before:]
            ok_total += sum(e.outcome is Outcome.OK for e in new)
            short += sum(e.outcome is Outcome.DENIED for e in new) < 1
    finally:
        srv.stop()
    report(10, ok_total == 0 and short == 0,
           f"{len(attempts)} replays of {n} captured client frames: {ok_total} OK outcomes, "
           f"{short} attempts without a DENIED entry")
