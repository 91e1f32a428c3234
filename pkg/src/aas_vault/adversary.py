"""Passive-attacker harness.

A :class:`TapProxy` sits between client and server on loopback and records
every byte in both directions without either side knowing. The recorded
transcript can be saved, replayed against the server, or fed to a fixed
battery of bench distinguishers.
"""

from __future__ import annotations

import enum
import io
import os
import socket
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import chaff
from .chaff import MergedStream
from .client import VaultClient
from .envelope import DataKey, Keyring
from .errors import AASError, InsufficientSamples
from .ledger import Outcome
from .server import VaultServer
from .session import DeclaredStamps
from .wire import HEADER, FrameType, decode_frame, split_frames

MIN_SAMPLES = 1000
_STREAM_FRAMES = {FrameType.PUT, FrameType.GET, FrameType.DELETE, FrameType.LIST, FrameType.STREAM}
_RECORD = struct.Struct(">QI")


class Direction(enum.Enum):
    C2S = "c2s"
    S2C = "s2c"


@dataclass(frozen=True)
class CapturedFrame:
    timestamp_ns: int
    raw: bytes
    conn_id: int = 0
    direction: Direction = Direction.C2S

    @property
    def frame_type(self) -> int:
        return self.raw[4]


@dataclass
class CaptureTranscript:
    frames: list[CapturedFrame] = field(default_factory=list)
    # byte-exact copy of each connection's streams, keyed by (conn_id, direction)
    raw_streams: dict[tuple[int, Direction], bytes] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def all_bytes(self) -> bytes:
        return b"".join(self.raw_streams.values()) or b"".join(f.raw for f in self.frames)

    def contains(self, needle: bytes) -> bool:
        return any(needle in s for s in self.raw_streams.values()) or any(needle in f.raw for f in self.frames)

    def client_frames(self, conn_id: int) -> list[CapturedFrame]:
        return [f for f in self.frames if f.conn_id == conn_id and f.direction is Direction.C2S]

    def conn_ids(self) -> list[int]:
        return sorted({f.conn_id for f in self.frames})

    # transcript file: (timestamp_ns u64 | len u32 | bytes)*
    def to_bytes(self) -> bytes:
        return b"".join(_RECORD.pack(f.timestamp_ns, len(f.raw)) + f.raw for f in self.frames)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "CaptureTranscript":
        frames = []
        pos = 0
        while pos < len(data):
            if pos + _RECORD.size > len(data):
                raise ValueError("truncated transcript record header")
            ts, n = _RECORD.unpack_from(data, pos)
            pos += _RECORD.size
            if pos + n > len(data):
                raise ValueError("truncated transcript record")
            frames.append(CapturedFrame(ts, data[pos:pos + n]))
            pos += n
        return cls(frames)

    @classmethod
    def load(cls, path: str | Path) -> "CaptureTranscript":
        return cls.from_bytes(Path(path).read_bytes())


class TapProxy:
    """In-process loopback tee in front of ``upstream``."""

    def __init__(self, upstream: tuple[str, int], listen: tuple[str, int] = ("127.0.0.1", 0)) -> None:
        self.upstream = upstream
        self._listener = socket.create_server(listen)
        self._lock = threading.Lock()
        self._frames: list[CapturedFrame] = []
        self._raw: dict[tuple[int, Direction], bytearray] = defaultdict(bytearray)
        self._pending: dict[tuple[int, Direction], bytearray] = defaultdict(bytearray)
        self._next_conn = 0
        self._threads: list[threading.Thread] = []
        self._closed = False
        self._accept = threading.Thread(target=self._accept_loop, name="tap-accept", daemon=True)
        self._accept.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                down, _ = self._listener.accept()
            except OSError:
                return
            up = socket.create_connection(self.upstream)
            for s in (down, up):
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                cid = self._next_conn
                self._next_conn += 1
            for src, dst, d in ((down, up, Direction.C2S), (up, down, Direction.S2C)):
                t = threading.Thread(target=self._pump, args=(src, dst, cid, d), daemon=True)
                t.start()
                self._threads.append(t)

    def _pump(self, src: socket.socket, dst: socket.socket, cid: int, d: Direction) -> None:
        key = (cid, d)
        try:
            while True:
                chunk = src.recv(1 << 16)
                if not chunk:
                    break
                self._record(key, chunk)
                dst.sendall(chunk)
        except OSError:
            pass
        finally:
            for s, how in ((dst, socket.SHUT_WR), (src, socket.SHUT_RD)):
                try:
                    s.shutdown(how)
                except OSError:
                    pass

    def _record(self, key: tuple[int, Direction], chunk: bytes) -> None:
        now = time.time_ns()
        with self._lock:
            self._raw[key] += chunk
            buf = self._pending[key]
            buf += chunk
            try:
                frames, rest = split_frames(bytes(buf))
            except AASError:
                # not our protocol; keep the bytes, stop framing this stream
                frames, rest = [], bytes(buf)
            for raw in frames:
                self._frames.append(CapturedFrame(now, raw, key[0], key[1]))
            self._pending[key] = bytearray(rest)

    def transcript(self, settle: float = 0.05) -> CaptureTranscript:
        time.sleep(settle)
        with self._lock:
            return CaptureTranscript(list(self._frames), {k: bytes(v) for k, v in self._raw.items()})

    def close(self) -> None:
        self._closed = True
        try:
            self._listener.close()
        except OSError:
            pass

    def __enter__(self) -> "TapProxy":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def capture(upstream: tuple[str, int]) -> TapProxy:
    """Install a tap in front of ``upstream``; clients connect to ``tap.address``."""
    return TapProxy(upstream)


# -- labelled bench data -----------------------------------------------------

def stream_frames(transcript: CaptureTranscript) -> list[tuple[int, MergedStream]]:
    """``(frame index, stream)`` for every frame whose payload is a merged stream."""
    out = []
    for i, f in enumerate(transcript.frames):
        if f.frame_type not in _STREAM_FRAMES:
            continue
        try:
            out.append((i, MergedStream.from_bytes(decode_frame(f.raw).payload)))
        except AASError:
            continue
    return out


def truth_from_keys(transcript: CaptureTranscript, session_keys: Mapping[int, bytes]) -> dict[int, np.ndarray]:
    """Ground-truth real/fake masks, computed out-of-band from session keys
    the test harness already holds (``conn_id -> key``)."""
    truth = {}
    for i, stream in stream_frames(transcript):
        key = session_keys.get(transcript.frames[i].conn_id)
        if key is None:
            continue
        real_count, _ = chaff.open_header(stream, key)
        mask = np.zeros(stream.total_count, dtype=bool)
        mask[chaff._real_slots(key, stream.stream_nonce, real_count, stream.total_count)] = True
        truth[i] = mask
    return truth


def shuffle_truth(truth: Mapping[int, np.ndarray], rng: np.random.Generator) -> dict[int, np.ndarray]:
    return {i: rng.permutation(m) for i, m in truth.items()}


def sabotage_fakes(transcript: CaptureTranscript, truth: Mapping[int, np.ndarray],
                   fill: int = 0) -> CaptureTranscript:
    """Copy of ``transcript`` with every fake bench overwritten by ``fill``."""
    frames = list(transcript.frames)
    for i, stream in stream_frames(transcript):
        if i not in truth:
            continue
        benches = np.frombuffer(stream.bench_data, dtype=np.uint8).reshape(-1, stream.bench_size).copy()
        benches[~truth[i]] = fill
        bad = MergedStream(stream.stream_nonce, stream.bench_size, stream.total_count,
                           stream.sealed_header, benches.tobytes())
        raw = transcript.frames[i].raw
        frames[i] = CapturedFrame(frames[i].timestamp_ns, raw[:HEADER.size] + bad.to_bytes(),
                                  frames[i].conn_id, frames[i].direction)
    return CaptureTranscript(frames)


# -- distinguisher battery ---------------------------------------------------

def _entropy(rows: np.ndarray) -> np.ndarray:
    n, w = rows.shape
    counts = np.zeros((n, 256), dtype=np.int32)
    np.add.at(counts, (np.repeat(np.arange(n), w), rows.ravel()), 1)
    p = counts / w
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0).sum(axis=1)
    chi = ((counts - w / 256.0) ** 2 / (w / 256.0)).sum(axis=1)
    return np.stack([h, chi, counts.max(axis=1), counts[:, 0]], axis=1)


def _lag_corr(rows: np.ndarray) -> np.ndarray:
    if rows.shape[1] < 2:
        return np.zeros(rows.shape[0])
    a = rows[:, :-1].astype(np.float64)
    b = rows[:, 1:].astype(np.float64)
    a -= a.mean(axis=1, keepdims=True)
    b -= b.mean(axis=1, keepdims=True)
    den = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, (a * b).sum(axis=1) / den, 0.0)


def _neighbour_distance(rows: np.ndarray) -> np.ndarray:
    # mean absolute byte difference to the previous bench in the stream
    out = np.zeros(rows.shape[0])
    if rows.shape[0] > 1:
        out[1:] = np.abs(rows[1:].astype(np.int16) - rows[:-1].astype(np.int16)).mean(axis=1)
    return out


FEATURES = ("byte_mean", "entropy", "chi_square", "max_byte_freq", "zero_count",
            "lag1_correlation", "neighbour_distance", "position_parity", "relative_position")


def bench_features(stream: MergedStream) -> np.ndarray:
    rows = np.frombuffer(stream.bench_data, dtype=np.uint8).reshape(-1, stream.bench_size)
    n = rows.shape[0]
    idx = np.arange(n)
    ent = _entropy(rows)
    return np.column_stack([
        rows.mean(axis=1), ent[:, 0], ent[:, 1], ent[:, 2], ent[:, 3],
        _lag_corr(rows), _neighbour_distance(rows), idx % 2, idx / max(n, 1),
    ])


def _balanced_accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    pos, neg = y.sum(), (~y).sum()
    if pos == 0 or neg == 0:
        return 0.5
    return float(0.5 * ((pred & y).sum() / pos + (~pred & ~y).sum() / neg))


def _fit_threshold(x: np.ndarray, y: np.ndarray) -> tuple[float, bool, float]:
    """Best single threshold on ``x`` by balanced accuracy: ``(t, above, acc)``,
    predicting real when ``(x > t) == above``."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    pos, neg = ys.sum(), (~ys).sum()
    if pos == 0 or neg == 0:
        return float("inf"), True, 0.5
    # candidate cut after position k: left = xs[:k+1]; only where the value changes
    cum_pos = np.cumsum(ys)
    cum_neg = np.cumsum(~ys)
    cut = np.flatnonzero(np.append(xs[1:] != xs[:-1], True))
    left_pos, left_neg = cum_pos[cut], cum_neg[cut]
    # predict real above the cut
    acc_above = 0.5 * ((pos - left_pos) / pos + left_neg / neg)
    acc_below = 1.0 - acc_above
    k_a, k_b = int(np.argmax(acc_above)), int(np.argmax(acc_below))
    # also allow the trivial "everything real" classifier (balanced acc 0.5)
    if acc_above[k_a] >= acc_below[k_b]:
        return float(xs[cut[k_a]]), True, float(acc_above[k_a])
    return float(xs[cut[k_b]]), False, float(acc_below[k_b])


@dataclass(frozen=True)
class ClassifierResult:
    accuracy: float
    best_feature: str
    samples: int
    per_feature: dict[str, float]


def classify_features(X: np.ndarray, y: np.ndarray, seed: int = 0) -> ClassifierResult:
    """Fit every single-feature threshold on a random half, pick the feature
    with the best training score and report its held-out balanced accuracy."""
    n = len(y)
    if n < MIN_SAMPLES:
        raise InsufficientSamples(f"{n} benches, need at least {MIN_SAMPLES}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    tr, te = perm[: n // 2], perm[n // 2:]
    per_feature = {}
    best = (-1.0, "")
    for j, name in enumerate(FEATURES):
        t, above, train_acc = _fit_threshold(X[tr, j], y[tr])
        pred = (X[te, j] > t) == above
        per_feature[name] = float(_balanced_accuracy(pred, y[te]))
        if train_acc > best[0]:
            best = (train_acc, name)
    return ClassifierResult(float(per_feature[best[1]]), best[1], n, per_feature)


def labelled_benches(transcript: CaptureTranscript, truth: Mapping[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for i, stream in stream_frames(transcript):
        if i not in truth:
            continue
        xs.append(bench_features(stream))
        ys.append(np.asarray(truth[i], dtype=bool))
    if not xs:
        return np.zeros((0, len(FEATURES))), np.zeros(0, dtype=bool)
    return np.vstack(xs), np.concatenate(ys)


def classify_benches(transcript: CaptureTranscript, labeled_truth: Mapping[int, np.ndarray],
                     seed: int = 0) -> ClassifierResult:
    """Best held-out balanced accuracy of the distinguisher battery.

    ``labeled_truth`` maps transcript frame index to a real-bench mask and
    must come from outside the wire (see :func:`truth_from_keys`).
    """
    X, y = labelled_benches(transcript, labeled_truth)
    return classify_features(X, y, seed)


# -- replay -------------------------------------------------------------------

def replay(address: tuple[str, int], frames: Sequence[bytes], timeout: float = 5.0) -> list[bytes]:
    """Send raw captured frames on a fresh connection, then collect whatever
    the server answers until it hangs up."""
    with socket.create_connection(address, timeout=timeout) as s:
        try:
            for raw in frames:
                s.sendall(raw)
        except OSError:
            pass
        try:
            s.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        buf = io.BytesIO()
        try:
            while True:
                chunk = s.recv(1 << 16)
                if not chunk:
                    break
                buf.write(chunk)
        except OSError:
            pass
    out, _ = split_frames(buf.getvalue())
    return out


# -- end-to-end simulation -----------------------------------------------------

@dataclass
class SimulationResult:
    honest: ClassifierResult
    zero_fake_control: ClassifierResult
    shuffled_control: ClassifierResult
    canary_on_wire: bool
    replay_ok_outcomes: int
    # DENIED ledger entries caused by each replay attempt
    replay_denied: list[int]

    @property
    def replay_attempts(self) -> int:
        return len(self.replay_denied)

    @property
    def valid(self) -> bool:
        return (self.zero_fake_control.accuracy >= 0.99
                and abs(self.shuffled_control.accuracy - 0.5) <= 0.02)

    def to_dict(self) -> dict[str, object]:
        return {
            "honest_accuracy": self.honest.accuracy,
            "honest_best_feature": self.honest.best_feature,
            "benches": self.honest.samples,
            "zero_fake_control_accuracy": self.zero_fake_control.accuracy,
            "shuffled_control_accuracy": self.shuffled_control.accuracy,
            "experiment_valid": bool(self.valid),
            "canary_on_wire": self.canary_on_wire,
            "replay_attempts": self.replay_attempts,
            "replay_ok_outcomes": self.replay_ok_outcomes,
            "replay_denied_per_attempt": self.replay_denied,
        }


def attack_simulation(workdir: str | Path, policy: chaff.ChaffPolicy | None = None,
                      objects: int = 24, object_size: int = 16 * 1024, seed: int = 0) -> SimulationResult:
    """Run a loopback server behind a tap, drive an honest workload, then
    attack the capture: classify benches, scan for the canary, replay."""
    workdir = Path(workdir)
    policy = policy or chaff.ChaffPolicy()
    rng = np.random.default_rng(seed)
    secret = os.urandom(32)
    canary = b"CANARY-PLAINTEXT-" + rng.bytes(16).hex().encode()
    server = VaultServer(workdir / "data", workdir / "ledger.bin", {"alice": secret}, fsync=False)
    addr = server.start()
    try:
        with TapProxy(addr) as tap:
            stamps = DeclaredStamps("sim-zone", "aas-sim/1", "02:00:00:00:00:01")
            keys: dict[int, bytes] = {}
            with VaultClient(tap.address, "alice", secret, stamps, Keyring([DataKey.generate("k1")]),
                             policy) as client:
                keys[0] = client.session.session_key
                for i in range(objects):
                    body = rng.bytes(object_size)
                    if i == 0:
                        body = canary + body[len(canary):]
                    client.put(f"obj{i}", body)
                    assert client.get(f"obj{i}") == body
            transcript = tap.transcript()
        truth = truth_from_keys(transcript, keys)
        honest = classify_benches(transcript, truth, seed)
        zeroed = classify_benches(sabotage_fakes(transcript, truth), truth, seed)
        shuffled = classify_benches(transcript, shuffle_truth(truth, rng), seed)

        # the whole client side, then each captured frame on its own
        client_frames = [f.raw for f in transcript.client_frames(0)]
        attempts = [client_frames] + [[raw] for raw in client_frames[:8]]
        ok = 0
        denied = []
        for seq_frames in attempts:
            before = len(server.ledger)
            replay(addr, seq_frames)
            # the server logs before it answers, so entries are in place once
            # it has hung up; the short wait covers its handler thread exiting
            time.sleep(0.01)
            new = server.ledger.entries()[before:]
            ok += sum(e.outcome is Outcome.OK for e in new)
            denied.append(sum(e.outcome is Outcome.DENIED for e in new))
        return SimulationResult(honest, zeroed, shuffled, transcript.contains(canary), ok, denied)
    finally:
        server.stop()
