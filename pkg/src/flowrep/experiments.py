"""Runnable experiment scenarios over the simulator backend.

Each runner builds a fresh deterministic simulation, drives one (scheme,
load, seed) cell, and returns plain records.  Cells are independent, so the
sweep can fan them out across worker processes.
"""

from __future__ import annotations

import multiprocessing as mp
import random
from dataclasses import dataclass
from typing import Optional

from .core import RepConfig, Scheme
from .metrics import FlowRecord
from .sim.session import (
    SimNet,
    SimServer,
    find_sport_via,
    listen_plain,
    open_flow,
    rtt_probe,
    serve_counting,
)
from .sim.topology import build_leaf_spine
from .workload import (
    JobRecord,
    SizeDistribution,
    SortCluster,
    SortJobSpec,
    WorkloadSpec,
    generate,
    incast_burst,
)

BASE_PORT = 9000
PROBE_PORT = 9100
SIM_CONFIG = dict(wl_timeout=0.2)   # simulator profile: 200 ms waiting list

# Per-port queue for testbed-style leaf-spine scenarios: a hot output port of
# a shared-buffer switch (4 MB total) can hold on the order of a couple of
# thousand full packets, which is what keeps handshakes alive under elephant
# slow-start bursts.
TESTBED_QUEUE_PKTS = 300


def sim_config(**over) -> RepConfig:
    kw = dict(SIM_CONFIG)
    kw.update(over)
    return RepConfig(**kw)


# -- RTT probe experiment -----------------------------------------------------------


@dataclass
class ProbeResult:
    scheme: str
    samples: list[tuple[int, int]]   # (launch_ns, rtt_ns)
    idle_rtt_ns: int
    threshold_ns: int

    @property
    def elevated_fraction(self) -> float:
        n = sum(1 for _, rtt in self.samples if rtt > self.threshold_ns)
        return n / len(self.samples)


def measure_idle_rtt(queue_pkts: int = TESTBED_QUEUE_PKTS, seed: int = 1) -> int:
    topo = build_leaf_spine(2, 6, 3, queue_pkts=queue_pkts)
    net = SimNet(topo, seed=seed)
    listen_plain(net, "h6", PROBE_PORT, PROBE_PORT + 1)
    samples = rtt_probe(net, "h0", "h6", PROBE_PORT, Scheme.PLAIN,
                        interval_ns=1_000_000, count=32)
    net.run()
    rtts = sorted(rtt for _, rtt in samples)
    return rtts[len(rtts) // 2]


def run_probe_experiment(scheme: Scheme, probes: int = 10_000, seed: int = 2,
                         queue_pkts: int = TESTBED_QUEUE_PKTS,
                         interval_ns: int = 400_000) -> ProbeResult:
    """Leaf-spine with one of three paths congested by two pinned elephants.

    The probe train measures application-layer handshake RTTs; a sample is
    "elevated" above three times the idle RTT.
    """
    idle = measure_idle_rtt(queue_pkts=queue_pkts)
    topo = build_leaf_spine(2, 6, 3, queue_pkts=queue_pkts)
    net = SimNet(topo, seed=seed)
    cfg = sim_config()
    serve_counting(net, "h7", BASE_PORT, cfg)
    serve_counting(net, "h8", BASE_PORT, cfg)
    sp1 = find_sport_via(net, "h1", "h7", BASE_PORT, "spine0")
    sp2 = find_sport_via(net, "h2", "h8", BASE_PORT, "spine0")
    start = 100_000_000
    horizon = start + probes * interval_ns + 500_000_000
    open_flow(net, "h1", "h7", BASE_PORT, Scheme.PLAIN, 10 ** 12, cfg,
              at=0, sport=sp1, stop_at=horizon)
    open_flow(net, "h2", "h8", BASE_PORT, Scheme.PLAIN, 10 ** 12, cfg,
              at=25_000_000, sport=sp2, stop_at=horizon)
    listen_plain(net, "h6", PROBE_PORT, PROBE_PORT + 1)
    samples = rtt_probe(net, "h0", "h6", PROBE_PORT, scheme,
                        interval_ns=interval_ns, count=probes, start_at=start)
    net.run()
    return ProbeResult(str(scheme), samples, idle, 3 * idle)


# -- workload cells ------------------------------------------------------------------


def _drive_schedule(net: SimNet, flows, cfg: RepConfig,
                    records: list[FlowRecord]) -> None:
    """Lazily create each flow at its start time; collect records on finish."""

    def make(fl):
        def create(_arg=None):
            def done(simflow):
                records.append(FlowRecord(
                    flow_id=f"{simflow.flow_id.address}:{simflow.flow_id.port}",
                    scheme=str(simflow.scheme), size=simflow.size,
                    start_us=simflow.t_open / 1000.0,
                    fct_us=simflow.fct_ns / 1000.0,
                    src=simflow.src, dst=simflow.dst,
                    legs_used=max(1, simflow.legs_established())))
            open_flow(net, fl.src, fl.dst, BASE_PORT, fl.scheme, fl.size, cfg,
                      at=net.cal.now, on_done=done)
        net.cal.schedule(int(fl.start_us * 1000), create)

    for fl in flows:
        make(fl)


def run_sweep_cell(load: float, scheme: Scheme, seed: int,
                   mice_target: int = 50_000,
                   oversub: tuple[int, int] = (2, 1),
                   queue_pkts: int = TESTBED_QUEUE_PKTS,
                   dist: Optional[SizeDistribution] = None,
                   fan_in: int = 1) -> list[FlowRecord]:
    """One (load, scheme, seed) cell of the tail-latency experiment.

    Random inter-rack pairs, Poisson arrivals at the target load, bundled
    web-search sizes, mice replicated under the cell's scheme.  Runs until
    every flow completes; returns one record per flow (incast bursts count
    every spawned flow).
    """
    dist = dist or SizeDistribution.web_search()
    topo = build_leaf_spine(2, 6, 3, oversub=oversub, queue_pkts=queue_pkts)
    net = SimNet(topo, seed=seed)
    cfg = sim_config()
    for host in topo.hosts:
        serve_counting(net, host, BASE_PORT, cfg)
    spec = WorkloadSpec(dist, load, topo.bottleneck_bps, scheme=scheme)
    mice_frac = dist.fraction_below(spec.mice_threshold)
    n_flows = int(mice_target / mice_frac * 1.02) + 8
    rng = random.Random(seed ^ 0x5EED)
    horizon_s = n_flows / spec.arrival_rate * 1.5 + 1.0
    if fan_in > 1:
        flows = incast_burst(spec, horizon_s, topo.racks, rng, fan_in=fan_in,
                             max_flows=n_flows)
    else:
        flows = generate(spec, horizon_s, topo.racks, rng, max_flows=n_flows)
    records: list[FlowRecord] = []
    _drive_schedule(net, flows, cfg, records)
    net.run()
    assert len(records) == len(flows)
    return records


def run_incast_cell(load: float, scheme: Scheme, seed: int,
                    base_mice_target: int = 2_500,
                    fan_in: int = 11,
                    queue_pkts: int = TESTBED_QUEUE_PKTS) -> list[FlowRecord]:
    """Incast experiment: every mice flow becomes a fan_in-to-1 burst."""
    return run_sweep_cell(load, scheme, seed, mice_target=base_mice_target,
                          oversub=(2, 1), queue_pkts=queue_pkts, fan_in=fan_in)


def count_payload_connections(scheme: Scheme, fan_in: int = 11,
                              size: int = 20_000, seed: int = 3) -> int:
    """Connections at the destination carrying payload in one isolated burst."""
    topo = build_leaf_spine(2, 6, 3, oversub=(2, 1),
                            queue_pkts=TESTBED_QUEUE_PKTS)
    net = SimNet(topo, seed=seed, track_endpoints=True)
    cfg = sim_config()
    dst = "h0"
    serve_counting(net, dst, BASE_PORT, cfg)
    senders = [h for h in topo.hosts if h != dst][:fan_in]
    for src in senders:
        open_flow(net, src, dst, BASE_PORT, scheme, size, cfg, at=0)
    net.run()
    return sum(1 for ep in net.endpoint_log
               if not ep.is_client and ep.host == dst and ep.payload_recv > 0)


# -- sort application ----------------------------------------------------------------


class SimSortBackend:
    """Adapter giving the sort driver clock, timers, servers and sockets."""

    def __init__(self, net: SimNet, config: RepConfig, base_port: int = BASE_PORT):
        self.net = net
        self.config = config
        self.base_port = base_port

    def now_us(self) -> float:
        return self.net.cal.now / 1000.0

    def call_at(self, t_us: float, fn) -> None:
        at = max(int(t_us * 1000), self.net.cal.now)
        self.net.cal.schedule(at, lambda _arg: fn())

    def serve(self, host: str, on_connection) -> None:
        SimServer(self.net, host, self.base_port, self.config, on_connection,
                  count_only=False)

    def open(self, src: str, dst: str, scheme: Scheme):
        from .sim.session import open_socket
        sock, _legs = open_socket(self.net, src, dst, self.base_port, scheme,
                                  self.config, at=self.net.cal.now,
                                  count_only=False)
        return sock


def run_sort_series(scheme: Scheme, n_jobs: int = 200, seed: int = 11,
                    spec: Optional[SortJobSpec] = None,
                    burst_rate_per_s: float = 2.5,
                    burst_bytes: int = 2_000_000,
                    gap_us: float = 10_000.0) -> list[JobRecord]:
    """Sequential sort jobs with random flash-congestion in the background.

    Background congestion: Poisson bursts of one elephant-style transfer
    between random hosts in different racks, each deep enough to queue a
    switch port for a few milliseconds at a time.

    The waiting list here outlives the initial SYN retransmission timer:
    a replica SYN lost to a burst still matches its flow after the 3 s
    retry instead of surfacing as a spurious fresh connection.
    """
    spec = spec or SortJobSpec(n_values=20_000, scan_ns_per_value=800)
    topo = build_leaf_spine(2, 6, 3, oversub=(2, 1),
                            queue_pkts=TESTBED_QUEUE_PKTS)
    net = SimNet(topo, seed=seed)
    cfg = sim_config(wl_timeout=3.5)
    backend = SimSortBackend(net, cfg)
    hosts = sorted(topo.hosts, key=lambda h: int(h[1:]))
    master, slaves = hosts[0], hosts[1:1 + spec.n_slaves]
    cluster = SortCluster(backend, hosts)
    for host in hosts:
        serve_counting(net, host, PROBE_PORT, cfg)   # background sink

    rng = random.Random(seed * 7919 + 1)
    bg_rng = random.Random(seed * 104729 + 2)

    # Flash congestion: clusters of three same-direction transfers whose
    # five-tuples may hash onto one spine link, overloading it for a few
    # milliseconds.  The master's own edge links are left out: no routing
    # scheme can dodge them and every chunk's control traffic funnels there.
    horizon_s = n_jobs * 0.2 + 5.0
    t = 0.0
    while t < horizon_s:
        t += bg_rng.expovariate(burst_rate_per_s)
        racks = sorted(topo.racks)
        r_src, r_dst = bg_rng.sample(racks, 2)
        srcs = [h for h in topo.racks[r_src] if h != master]
        dsts = [h for h in topo.racks[r_dst] if h != master]
        for src, dst in zip(bg_rng.sample(srcs, 3), bg_rng.sample(dsts, 3)):
            open_flow(net, src, dst, PROBE_PORT, Scheme.PLAIN, burst_bytes,
                      cfg, at=int(t * 1e6) * 1000)

    records: list[JobRecord] = []

    def launch(i: int) -> None:
        if i >= n_jobs:
            return

        def done(rec: JobRecord) -> None:
            records.append(rec)
            backend.call_at(backend.now_us() + gap_us, lambda: launch(i + 1))

        cluster.run_job(spec, scheme, cfg, master, slaves, rng, done)

    backend.call_at(1_000.0, lambda: launch(0))
    net.run()
    return records


# -- parallel cell execution ----------------------------------------------------------


def _sweep_worker(args):
    load, scheme_value, seed, mice_target, oversub, fan_in = args
    recs = run_sweep_cell(load, Scheme(scheme_value), seed,
                          mice_target=mice_target, oversub=oversub,
                          fan_in=fan_in)
    return [(r.flow_id, r.scheme, r.size, r.start_us, r.fct_us, r.src, r.dst,
             r.legs_used) for r in recs]


def run_cells(cells, workers: int = 2):
    """Run (load, scheme, seed, mice_target, oversub, fan_in) cells, maybe in
    parallel; returns {cell: [FlowRecord]}."""
    args = [(load, str(scheme), seed, mice_target, oversub, fan_in)
            for (load, scheme, seed, mice_target, oversub, fan_in) in cells]
    if workers > 1 and len(args) > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(min(workers, len(args))) as pool:
            raws = pool.map(_sweep_worker, args)
    else:
        raws = [_sweep_worker(a) for a in args]
    out = {}
    for cell, raw in zip(cells, raws):
        out[cell] = [FlowRecord(flow_id=f, scheme=s, size=z, start_us=st,
                                fct_us=fc, src=a, dst=b, legs_used=lg)
                     for (f, s, z, st, fc, a, b, lg) in raw]
    return out
