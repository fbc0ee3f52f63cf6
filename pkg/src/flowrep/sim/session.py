"""Hosting the replication engine on the simulated fabric.

``SimNet`` owns one topology instance, one calendar and all links/hosts.
``SimServer`` runs the core server engine behind a pair of listening ports;
``open_flow`` drives a client RepSocket over one or two simulated legs;
``rtt_probe`` measures handshake RTTs the way an application-layer prober
would (timer from SYN to established, faster leg wins for replicated modes).
"""

from __future__ import annotations

import random
from typing import Callable, Optional

from ..core import FlowId, RepConfig, RepSocket, Scheme, ServerEngine
from .calendar import EventCalendar
from .fabric import (
    INITIAL_RTO_NS,
    INITIAL_SSTHRESH_PKTS,
    RTO_MIN_NS,
    Endpoint,
    Host,
    Link,
)
from .topology import FiveTuple, Topology, ecmp_route


class SimNet:
    """One simulation run: topology + calendar + links + hosts + ports."""

    def __init__(self, topo: Topology, seed: int = 0,
                 rto_min_ns: int = RTO_MIN_NS,
                 initial_rto_ns: int = INITIAL_RTO_NS,
                 ssthresh_pkts: int = INITIAL_SSTHRESH_PKTS,
                 track_endpoints: bool = False):
        self.topo = topo
        self.cal = EventCalendar()
        self.seed = seed
        self.hash_seed = seed
        self.rng = random.Random(seed)
        self.rto_min_ns = rto_min_ns
        self.initial_rto_ns = initial_rto_ns
        self.ssthresh_pkts = ssthresh_pkts
        self.links: dict[tuple[str, str], Link] = {}
        for (u, v), spec in topo.links.items():
            self.links[(u, v)] = Link(self.cal, f"{u}->{v}", spec.rate_bps,
                                      spec.prop_ns, spec.queue_pkts)
        self.hosts = {h: Host(h, self) for h in topo.hosts}
        self._port_ctr = dict.fromkeys(topo.hosts, 0)
        self.track_endpoints = track_endpoints
        self.endpoint_log: list[Endpoint] = []

    @property
    def now(self) -> int:
        return self.cal.now

    def alloc_port(self, host: str) -> int:
        c = self._port_ctr[host] = (self._port_ctr[host] + 1) % 28000
        return 20000 + c

    def route_links(self, src: str, dst: str, sport: int, dport: int):
        path = ecmp_route(FiveTuple(src, dst, sport, dport), self.topo, self.hash_seed)
        links = self.links
        return tuple(links[(path[i], path[i + 1])] for i in range(len(path) - 1))

    def path_of(self, src: str, dst: str, sport: int, dport: int):
        return ecmp_route(FiveTuple(src, dst, sport, dport), self.topo, self.hash_seed)

    def listen_raw(self, host: str, port: int,
                   on_server_ep: Callable[[Endpoint], None]) -> None:
        self.hosts[host].listeners[port] = on_server_ep

    def client_endpoint(self, src: str, dst: str, sport: int, dport: int,
                        sink, start_at: int) -> Endpoint:
        ep = Endpoint(self.cal, src, dst, sport, dport,
                      self.route_links(src, dst, sport, dport), sink, True,
                      self.rto_min_ns, self.initial_rto_ns, self.ssthresh_pkts)
        ep.dispatch = self.hosts[dst]
        if self.track_endpoints:
            self.endpoint_log.append(ep)
        self.cal.schedule(start_at, ep.start)
        return ep

    def _make_server_endpoint(self, host: Host, client_ep: Endpoint) -> Endpoint:
        ep = Endpoint(self.cal, host.name, client_ep.host,
                      client_ep.dport, client_ep.sport,
                      self.route_links(host.name, client_ep.host,
                                       client_ep.dport, client_ep.sport),
                      None, False, self.rto_min_ns, self.initial_rto_ns,
                      self.ssthresh_pkts)
        ep.peer = client_ep
        client_ep.peer = ep
        if self.track_endpoints:
            self.endpoint_log.append(ep)
        return ep

    def run(self, until_ns: Optional[int] = None) -> None:
        if until_ns is None:
            self.cal.run()
        else:
            self.cal.run_until(until_ns)


class SimLeg:
    """Bridges one simulated endpoint to one RepSocket leg slot."""

    __slots__ = ("ep", "sock", "leg_id", "count_only")

    def __init__(self, ep: Endpoint, count_only: bool = False):
        self.ep = ep
        self.sock: Optional[RepSocket] = None
        self.leg_id = 0
        self.count_only = count_only
        ep.sink = self

    def bind(self, sock: RepSocket, leg_id: int) -> None:
        self.sock = sock
        self.leg_id = leg_id

    # handle interface used by RepSocket
    def write(self, data) -> None:
        if self.count_only:
            self.ep.write_count(len(data))
        else:
            self.ep.write(data)

    def end(self) -> None:
        self.ep.end()

    def reset(self) -> None:
        self.ep.reset()

    # sink interface driven by the endpoint
    def established(self, ep) -> None:
        if self.sock is not None:
            self.sock.on_leg_connected(self.leg_id)

    def data(self, ep, start, n) -> None:
        if self.sock is not None:
            self.sock.on_leg_data(self.leg_id, ep.data_slice(start, n))

    def eof(self, ep) -> None:
        if self.sock is not None:
            self.sock.on_leg_end(self.leg_id)

    def closed(self, ep) -> None:
        if self.sock is not None:
            self.sock.on_leg_closed(self.leg_id)

    def error(self, ep) -> None:
        if self.sock is not None:
            self.sock.on_leg_error(self.leg_id, ConnectionError("leg failed"))


class SimServer:
    """Replication-capable server on (base_port, base_port+1) of one host."""

    def __init__(self, net: SimNet, host: str, base_port: int, config: RepConfig,
                 on_connection: Callable[[RepSocket], None],
                 count_only: bool = True):
        self.net = net
        self.host = host
        self.base_port = base_port
        self.count_only = count_only
        self.wl_ns = int(config.wl_timeout * 1e9)
        self.engine = ServerEngine(config, on_connection, wl_timeout=self.wl_ns)
        net.listen_raw(host, base_port, self._on_syn)
        net.listen_raw(host, base_port + 1, self._on_syn)

    def _on_syn(self, server_ep: Endpoint) -> None:
        leg = SimLeg(server_ep, count_only=self.count_only)
        fid = FlowId(server_ep.peer_host, server_ep.dport)
        now = self.net.cal.now
        sock = self.engine.accept_leg(fid, leg, now)
        if sock is not None:
            for i, l in enumerate(sock.legs):
                if l is not None and l.handle is leg:
                    leg.bind(sock, i)
                    break
            if fid in self.engine.waiting:
                self.net.cal.schedule(now + self.wl_ns, self._tick)

    def _tick(self, _arg=None) -> None:
        self.engine.tick(self.net.cal.now)


def serve_counting(net: SimNet, host: str, base_port: int, config: RepConfig,
                   count_only: bool = True) -> SimServer:
    """Standard sink server: consumes the stream, closes back on peer end."""

    def on_connection(sock: RepSocket) -> None:
        sock.on_end = sock.end

    return SimServer(net, host, base_port, config, on_connection,
                     count_only=count_only)


class SimFlow:
    """One logical transfer driven through a client RepSocket."""

    __slots__ = ("net", "flow_id", "scheme", "size", "src", "dst",
                 "t_open", "t_done", "sock", "legs", "on_done")

    def __init__(self, net, flow_id, scheme, size, src, dst, t_open, sock, legs,
                 on_done):
        self.net = net
        self.flow_id = flow_id
        self.scheme = scheme
        self.size = size
        self.src = src
        self.dst = dst
        self.t_open = t_open
        self.t_done: Optional[int] = None
        self.sock = sock
        self.legs = legs
        self.on_done = on_done

    @property
    def fct_ns(self) -> Optional[int]:
        return None if self.t_done is None else self.t_done - self.t_open

    def legs_established(self) -> int:
        return self.sock.legs_established()

    def _leg_done(self, ep: Endpoint) -> None:
        if self.t_done is None:
            self.t_done = self.net.cal.now
            if self.on_done is not None:
                self.on_done(self)


class _Opaque:
    """Length-only stand-in for a payload that is never inspected."""

    __slots__ = ("n",)

    def __init__(self, n: int):
        self.n = n

    def __len__(self) -> int:
        return self.n


def open_socket(net: SimNet, src: str, dst: str, base_port: int, scheme: Scheme,
                config: RepConfig, at: int = 0, sport: Optional[int] = None,
                count_only: bool = True) -> tuple[RepSocket, list[SimLeg]]:
    """Create a client RepSocket with its simulated legs launching at ``at``."""
    if sport is None:
        sport = net.alloc_port(src)
    mode = scheme if isinstance(scheme, Scheme) else Scheme(scheme)
    sock = RepSocket.client(FlowId(src, sport), mode, config)
    dports = [base_port] if mode is Scheme.PLAIN else [base_port, base_port + 1]
    legs = []
    for i, dport in enumerate(dports):
        ep = net.client_endpoint(src, dst, sport, dport, None, at)
        leg = SimLeg(ep, count_only=count_only)
        leg.bind(sock, i)
        sock.attach_leg(i, leg)
        legs.append(leg)
    return sock, legs


def open_flow(net: SimNet, src: str, dst: str, base_port: int, scheme: Scheme,
              size: int, config: RepConfig, at: int = 0,
              payload: Optional[bytes] = None, sport: Optional[int] = None,
              on_done=None, stop_at: Optional[int] = None) -> SimFlow:
    """Launch one flow of ``size`` bytes from src to dst at time ``at``.

    The flow completes when the first leg has its entire payload
    acknowledged (replication takes the faster of the two).  ``payload``
    carries real bytes; otherwise the stream is opaque and only counted.
    """
    sock, legs = open_socket(net, src, dst, base_port, scheme, config, at,
                             sport, count_only=payload is None)
    mode = sock.mode
    flow = SimFlow(net, sock.flow_id, mode, size, src, dst, at, sock, legs, on_done)
    for leg in legs:
        leg.ep.on_payload_acked = flow._leg_done

    def on_connected() -> None:
        if payload is not None:
            data = payload
        elif mode is Scheme.PLAIN:
            data = _Opaque(size)   # no archive in CHOSEN; length is enough
        else:
            data = bytes(size)     # replicated writes may be archived
        sock.write(data)
        sock.end()

    sock.on_connected = on_connected
    if stop_at is not None:
        def halt(_arg=None) -> None:
            if flow.t_done is None:
                flow.t_done = net.cal.now
            sock.reset()
        net.cal.schedule(stop_at, halt)
    return flow


def find_sport_via(net: SimNet, src: str, dst: str, dport: int, via: str,
                   start: int = 40_000) -> int:
    """Search source ports until the flow's path crosses ``via``."""
    for sport in range(start, 65_000):
        if via in net.path_of(src, dst, sport, dport):
            return sport
    raise ValueError(f"no source port routes {src}->{dst} via {via}")


class _AutoAccept:
    """Raw server sink: accept, read and discard, close when the peer ends."""

    __slots__ = ()

    def established(self, ep) -> None:
        pass

    def data(self, ep, start, n) -> None:
        pass

    def eof(self, ep) -> None:
        ep.end()

    def closed(self, ep) -> None:
        pass

    def error(self, ep) -> None:
        pass


_AUTO = _AutoAccept()


def listen_plain(net: SimNet, host: str, *ports: int) -> None:
    """Install bare auto-accepting listeners (used by the RTT prober)."""
    for port in ports:
        net.listen_raw(host, port, lambda ep: setattr(ep, "sink", _AUTO))


class _Probe:
    __slots__ = ("net", "t0", "eps", "samples", "done")

    def __init__(self, net, t0, samples):
        self.net = net
        self.t0 = t0
        self.eps: list[Endpoint] = []
        self.samples = samples
        self.done = False

    def established(self, ep) -> None:
        if self.done:
            return
        self.done = True
        self.samples.append((self.t0, self.net.cal.now - self.t0))
        for e in self.eps:
            e.reset()

    def data(self, ep, start, n) -> None:
        pass

    def eof(self, ep) -> None:
        pass

    def closed(self, ep) -> None:
        pass

    def error(self, ep) -> None:
        pass


def rtt_probe(net: SimNet, src: str, dst: str, base_port: int, scheme: Scheme,
              interval_ns: int, count: int, start_at: int = 0) -> list[tuple[int, int]]:
    """Application-layer handshake RTT series: one connection per sample.

    Each probe opens a fresh connection (two for replicated modes, sharing
    the source port), stops the clock at the first completed handshake, then
    aborts.  Returns (launch_time_ns, rtt_ns) pairs, one per probe.
    """
    samples: list[tuple[int, int]] = []
    mode = scheme if isinstance(scheme, Scheme) else Scheme(scheme)
    ports = [base_port] if mode is Scheme.PLAIN else [base_port, base_port + 1]
    for i in range(count):
        at = start_at + i * interval_ns
        sport = net.alloc_port(src)
        probe = _Probe(net, at, samples)
        for dport in ports:
            probe.eps.append(net.client_endpoint(src, dst, sport, dport, probe, at))
    return samples
