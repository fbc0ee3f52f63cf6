"""Traffic generation: empirical flow sizes, Poisson arrivals, incast bursts,
and the distributed bucket-sort application.

Generators are pure (same RNG, same schedule) so paired-seed comparisons
across schemes see identical arrival processes.  The sort job is written
against a small backend interface (``now_us``, ``call_at``, ``serve``,
``open``) satisfied by both the simulator and the real-socket loopback
adapter.
"""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional

from .core import RepConfig, Scheme

MICE_THRESHOLD = 100_000          # bytes; flows below this are replicable
ELEPHANT_THRESHOLD = 1_000_000


class SizeDistribution:
    """Piecewise-linear CDF of flow sizes, sampled by inverse transform."""

    def __init__(self, points: list[tuple[int, float]]):
        if len(points) < 2:
            raise ValueError("need at least two CDF points")
        last_s, last_p = None, None
        for s, p in points:
            if (last_s is not None and (s <= last_s or p <= last_p)) or not 0 <= p <= 1:
                raise ValueError("CDF must be strictly increasing and within [0,1]")
            last_s, last_p = s, p
        if points[0][1] != 0.0 or points[-1][1] != 1.0:
            raise ValueError("CDF must start at probability 0 and end at 1")
        self.points = points
        self._probs = [p for _, p in points]

    @classmethod
    def from_text(cls, text: str) -> "SizeDistribution":
        points = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            size_s, prob_s = line.split()
            points.append((int(size_s), float(prob_s)))
        return cls(points)

    @classmethod
    def from_file(cls, path) -> "SizeDistribution":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    @classmethod
    def web_search(cls) -> "SizeDistribution":
        text = resources.files("flowrep.data").joinpath("websearch_sizes.txt").read_text()
        return cls.from_text(text)

    def sample(self, rng) -> int:
        u = rng.random()
        i = bisect.bisect_left(self._probs, u)
        if i == 0:
            return self.points[0][0]
        (s0, p0), (s1, p1) = self.points[i - 1], self.points[i]
        return int(s0 + (s1 - s0) * (u - p0) / (p1 - p0))

    def mean(self) -> float:
        total = 0.0
        for (s0, p0), (s1, p1) in zip(self.points, self.points[1:]):
            total += (p1 - p0) * (s0 + s1) / 2
        return total

    def fraction_below(self, size: int) -> float:
        """CDF value at ``size``."""
        pts = self.points
        if size <= pts[0][0]:
            return 0.0
        if size >= pts[-1][0]:
            return 1.0
        for (s0, p0), (s1, p1) in zip(pts, pts[1:]):
            if s0 <= size <= s1:
                return p0 + (p1 - p0) * (size - s0) / (s1 - s0)
        return 1.0

    def byte_share_above(self, size: int) -> float:
        """Fraction of all bytes carried by flows larger than ``size``."""
        total = self.mean()
        above = 0.0
        for (s0, p0), (s1, p1) in zip(self.points, self.points[1:]):
            if s1 <= size:
                continue
            lo = max(s0, size)
            # mass of the segment beyond `size`, uniform within the segment
            frac = (s1 - lo) / (s1 - s0)
            above += (p1 - p0) * frac * (lo + s1) / 2
        return above / total


@dataclass
class Flow:
    start_us: float
    src: str
    dst: str
    size: int
    scheme: Scheme


@dataclass
class WorkloadSpec:
    distribution: SizeDistribution
    load: float                      # fraction of bottleneck capacity
    bottleneck_bps: float            # C, bits per second
    scheme: Scheme = Scheme.PLAIN    # mice policy: replicate iff size < threshold
    mice_threshold: int = MICE_THRESHOLD

    def __post_init__(self) -> None:
        if not 0 < self.load < 1:
            raise ValueError("load must be in (0, 1)")

    @property
    def arrival_rate(self) -> float:
        """Poisson rate: load * C / E[size in bits], flows per second."""
        return self.load * self.bottleneck_bps / (8 * self.distribution.mean())


def _pick_pair(hosts_by_rack: dict[int, list[str]], rng) -> tuple[str, str]:
    racks = sorted(hosts_by_rack)
    r1, r2 = rng.sample(racks, 2)
    return rng.choice(hosts_by_rack[r1]), rng.choice(hosts_by_rack[r2])


def generate(spec: WorkloadSpec, duration_s: float, hosts_by_rack, rng,
             max_flows: Optional[int] = None) -> list[Flow]:
    """Poisson arrivals between random inter-rack pairs for ``duration_s``."""
    lam = spec.arrival_rate
    flows: list[Flow] = []
    t = 0.0
    while True:
        t += rng.expovariate(lam)
        if t >= duration_s or (max_flows is not None and len(flows) >= max_flows):
            break
        src, dst = _pick_pair(hosts_by_rack, rng)
        size = spec.distribution.sample(rng)
        scheme = spec.scheme if size < spec.mice_threshold else Scheme.PLAIN
        flows.append(Flow(t * 1e6, src, dst, size, scheme))
    return flows


def incast_burst(spec: WorkloadSpec, duration_s: float, hosts_by_rack, rng,
                 fan_in: int = 11, max_flows: Optional[int] = None) -> list[Flow]:
    """Base workload where every mice flow becomes a fan_in-to-1 burst.

    The extra senders are distinct hosts targeting the original destination
    with same-size flows launched in parallel; elephants pass through, so
    the size mixture still follows the base distribution.
    """
    base = generate(spec, duration_s, hosts_by_rack, rng, max_flows=max_flows)
    if fan_in <= 1:
        return base
    all_hosts = sorted(h for hosts in hosts_by_rack.values() for h in hosts)
    out: list[Flow] = []
    for fl in base:
        out.append(fl)
        if fl.size >= spec.mice_threshold:
            continue
        others = [h for h in all_hosts if h != fl.dst and h != fl.src]
        for src in rng.sample(others, min(fan_in - 1, len(others))):
            out.append(Flow(fl.start_us, src, fl.dst, fl.size, fl.scheme))
    return out


def measured_load(flows: list[Flow], duration_s: float, bottleneck_bps: float) -> float:
    return sum(f.size for f in flows) * 8 / (duration_s * bottleneck_bps)


# -- bucket sort application ---------------------------------------------------------

FRAME_VALUES = 1
FRAME_DONE = 2
FRAME_RESULT = 3

VALUE_W = 4   # 4-byte big-endian unsigned integers


def encode_frame(kind: int, body: bytes) -> bytes:
    payload = bytes([kind]) + body
    return struct.pack(">I", len(payload)) + payload


def encode_values(values) -> bytes:
    return b"".join(struct.pack(">I", v) for v in values)


def decode_values(body: bytes) -> list[int]:
    return [v[0] for v in struct.iter_unpack(">I", body)]


class FrameReader:
    """Incremental parser for 4-byte length-prefixed frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[tuple[int, bytes]]:
        self._buf.extend(chunk)
        frames = []
        buf = self._buf
        while len(buf) >= 4:
            need = struct.unpack_from(">I", buf)[0]
            if len(buf) < 4 + need:
                break
            payload = bytes(buf[4:4 + need])
            del buf[:4 + need]
            frames.append((payload[0], payload[1:]))
        return frames


@dataclass
class SortJobSpec:
    n_values: int = 1_000_000
    value_range: int = 65536          # values drawn from [0, value_range)
    n_slaves: int = 11
    chunk_values: int = 20            # buffered per destination before send
    scan_ns_per_value: int = 500
    sort_ns_per_value: int = 10
    start_jitter_ms: float = 5.0

    def bucket_of(self, v: int) -> int:
        width = -(-self.value_range // self.n_slaves)
        return min(v // width, self.n_slaves - 1)


@dataclass
class JobRecord:
    jct_us: float
    correct: bool
    n_values: int
    scheme: str
    error: Optional[str] = None


class _SlaveState:
    __slots__ = ("counts", "received", "expected")

    def __init__(self, value_range: int):
        self.counts = [0] * value_range
        self.received = 0
        self.expected = None


class SortJob:
    """One partition-aggregation bucket sort over a backend.

    The master scans the input sequentially, buffering ``chunk_values``
    values per destination slave and shipping each full buffer as its own
    small flow (replicated under the job's scheme).  Each slave counting-
    sorts on arrival and returns its bucket in a single unreplicated flow
    once the master's end-of-scan marker and all counted values are in.
    """

    def __init__(self, spec: SortJobSpec, backend, scheme: Scheme,
                 config: RepConfig, master: str, slaves: list[str],
                 values: list[int], on_done: Callable[[JobRecord], None]):
        if len(slaves) != spec.n_slaves:
            raise ValueError(f"need exactly {spec.n_slaves} slaves")
        self.spec = spec
        self.backend = backend
        self.scheme = scheme
        self.config = config
        self.master = master
        self.slaves = slaves
        self.values = values
        self.on_done = on_done
        self.t_start_us: Optional[float] = None
        self.slave_state = {i: _SlaveState(spec.value_range)
                            for i in range(spec.n_slaves)}
        self.results: dict[int, list[int]] = {}
        self.failed: Optional[str] = None
        self.finished = False
        self.chunk_flows = 0
        self.milestones: dict[str, float] = {}

    # -- master ----------------------------------------------------------------

    def start(self, at_us: float) -> None:
        self.t_start_us = at_us
        spec = self.spec
        buffers: dict[int, list[int]] = {i: [] for i in range(spec.n_slaves)}
        sent: dict[int, int] = dict.fromkeys(range(spec.n_slaves), 0)
        scan_us = spec.scan_ns_per_value / 1000.0
        for i, v in enumerate(self.values):
            owner = spec.bucket_of(v)
            buf = buffers[owner]
            buf.append(v)
            if len(buf) == spec.chunk_values:
                t = at_us + (i + 1) * scan_us
                self._emit_chunk(t, owner, list(buf))
                sent[owner] += len(buf)
                buf.clear()
        t_end = at_us + len(self.values) * scan_us
        # final flushes pace out like ordinary chunks instead of bursting
        step = spec.chunk_values * scan_us
        for owner, buf in buffers.items():
            if buf:
                self._emit_chunk(t_end + owner * step, owner, list(buf))
                sent[owner] += len(buf)
        for owner in range(spec.n_slaves):
            self._emit_done(t_end + (owner + spec.n_slaves) * step, owner,
                            sent[owner])
        self.milestones["scatter_emitted"] = t_end

    def _emit_chunk(self, t_us: float, owner: int, vals: list[int]) -> None:
        self.chunk_flows += 1
        frame = encode_frame(FRAME_VALUES, bytes([owner]) + encode_values(vals))
        self.backend.call_at(t_us, lambda: self._send(self.slaves[owner], frame,
                                                      self.scheme))

    def _emit_done(self, t_us: float, owner: int, total: int) -> None:
        frame = encode_frame(FRAME_DONE, bytes([owner]) + struct.pack(">I", total))
        self.backend.call_at(t_us, lambda: self._send(self.slaves[owner], frame,
                                                      self.scheme))

    def _send(self, dst: str, frame: bytes, scheme: Scheme) -> None:
        if self.finished:
            return
        src = self.master if dst != self.master else dst
        sock = self.backend.open(src, dst, scheme)
        sock.on_error = lambda exc: self.fail(f"flow to {dst} failed: {exc}")

        def go():
            sock.write(frame)
            sock.end()

        sock.on_connected = go

    # -- slave / master inbound -------------------------------------------------

    def on_frame(self, kind: int, body: bytes) -> None:
        if self.finished:
            return
        if kind == FRAME_VALUES:
            owner = body[0]
            st = self.slave_state[owner]
            for v in decode_values(body[1:]):
                st.counts[v] += 1
            st.received += len(body[1:]) // VALUE_W
            self._maybe_return(owner)
        elif kind == FRAME_DONE:
            owner = body[0]
            st = self.slave_state[owner]
            st.expected = struct.unpack(">I", body[1:5])[0]
            self._maybe_return(owner)
        elif kind == FRAME_RESULT:
            owner = body[0]
            self.milestones[f"result{owner}"] = self.backend.now_us()
            self.results[owner] = decode_values(body[1:])
            if len(self.results) == self.spec.n_slaves and not self.finished:
                self._finish()

    def _maybe_return(self, owner: int) -> None:
        st = self.slave_state[owner]
        if st.expected is None:
            return
        if st.received > st.expected:
            # duplicate delivery would silently corrupt the sort
            self.fail(f"slave {owner} got {st.received} values, expected {st.expected}")
            return
        if st.received != st.expected:
            return
        st.expected = None  # fire once
        self.milestones[f"slave{owner}_complete"] = self.backend.now_us()
        sorted_bucket = []
        for v, c in enumerate(st.counts):
            if c:
                sorted_bucket.extend([v] * c)
        frame = encode_frame(FRAME_RESULT, bytes([owner]) + encode_values(sorted_bucket))
        delay_us = len(sorted_bucket) * self.spec.sort_ns_per_value / 1000.0
        t = self.backend.now_us() + delay_us
        # the sorted bucket goes back as one large flow, never replicated
        self.backend.call_at(t, lambda: self._send_from(self.slaves[owner],
                                                        self.master, frame))

    def _send_from(self, src: str, dst: str, frame: bytes) -> None:
        if self.finished:
            return
        sock = self.backend.open(src, dst, Scheme.PLAIN)
        sock.on_error = lambda exc: self.fail(f"return from {src} failed: {exc}")

        def go():
            sock.write(frame)
            sock.end()

        sock.on_connected = go

    def _finish(self) -> None:
        self.finished = True
        output = []
        for owner in range(self.spec.n_slaves):
            output.extend(self.results[owner])
        correct = output == sorted(self.values)
        jct = self.backend.now_us() - self.t_start_us
        self.on_done(JobRecord(jct, correct, len(self.values), str(self.scheme)))

    def fail(self, reason: str) -> None:
        if self.finished:
            return
        self.finished = True
        self.failed = reason
        jct = self.backend.now_us() - (self.t_start_us or self.backend.now_us())
        self.on_done(JobRecord(jct, False, len(self.values), str(self.scheme),
                               error=reason))


class SortCluster:
    """Servers on every participating host, routing frames to the live job.

    Jobs run one at a time; each job's flows use fresh connections, so a
    single current-job pointer is enough.
    """

    def __init__(self, backend, hosts: list[str]):
        self.backend = backend
        self.current: Optional[SortJob] = None
        for h in hosts:
            backend.serve(h, self._on_connection)

    def _on_connection(self, sock) -> None:
        reader = FrameReader()

        def on_data(chunk: bytes) -> None:
            for kind, body in reader.feed(chunk):
                if self.current is not None:
                    self.current.on_frame(kind, body)

        sock.on_data = on_data
        sock.on_end = sock.end

    def run_job(self, spec: SortJobSpec, scheme: Scheme, config: RepConfig,
                master: str, slaves: list[str], rng,
                on_done: Callable[[JobRecord], None],
                at_us: Optional[float] = None,
                values: Optional[list[int]] = None) -> SortJob:
        """Draw a random input (unless given) and start one job."""
        if values is None:
            values = [rng.randrange(spec.value_range) for _ in range(spec.n_values)]
        job = SortJob(spec, self.backend, scheme, config, master, slaves,
                      values, on_done)
        self.current = job
        jitter_us = rng.uniform(0, spec.start_jitter_ms * 1000.0)
        start = (self.backend.now_us() if at_us is None else at_us) + jitter_us
        self.backend.call_at(start, lambda: job.start(self.backend.now_us()))
        return job
