"""Clos topology builders and hash-based equal-cost multi-path routing.

Nodes are strings ("h3", "tor1", "spine2", ...).  Links are directed; each
direction gets its own queue in the fabric.  Routing uses per-destination
next-hop sets computed over the shortest-path DAG, with the next hop at each
fan-out switch picked by a deterministic hash of the flow's five-tuple, so a
flow always follows one path and two flows differing only in destination
port may diverge.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

DEFAULT_LINK_RATE = 1_000_000_000      # 1 Gb/s
DEFAULT_QUEUE_PKTS = 100
# Propagation calibrated so the idle inter-rack handshake RTT on the default
# leaf-spine lands at ~178 us (together with 5 us/end host processing).
DEFAULT_PROP_NS = 19_430


class FiveTuple(NamedTuple):
    src: str
    dst: str
    sport: int
    dport: int
    proto: int = 6


@dataclass
class LinkSpec:
    rate_bps: int
    prop_ns: int
    queue_pkts: int


@dataclass
class Topology:
    name: str
    hosts: list[str] = field(default_factory=list)
    switches: list[str] = field(default_factory=list)
    adj: dict[str, list[str]] = field(default_factory=dict)
    links: dict[tuple[str, str], LinkSpec] = field(default_factory=dict)
    host_rack: dict[str, int] = field(default_factory=dict)
    racks: dict[int, list[str]] = field(default_factory=dict)
    bottleneck_bps: int = 0   # capacity the workload layer loads against
    meta: dict = field(default_factory=dict)
    _next_hops: dict = field(default_factory=dict, repr=False)
    _salts: dict = field(default_factory=dict, repr=False)

    def add_node(self, name: str, is_host: bool, rack: int | None = None) -> None:
        (self.hosts if is_host else self.switches).append(name)
        self.adj[name] = []
        self._salts[name] = _mix64(len(self._salts) * 0x9E3779B97F4A7C15 + 1)
        if is_host and rack is not None:
            self.host_rack[name] = rack
            self.racks.setdefault(rack, []).append(name)

    def add_link(self, a: str, b: str, rate_bps: int, prop_ns: int,
                 queue_pkts: int) -> None:
        """Bidirectional link: one spec per direction."""
        for u, v in ((a, b), (b, a)):
            self.adj[u].append(v)
            self.links[(u, v)] = LinkSpec(rate_bps, prop_ns, queue_pkts)

    # -- routing ----------------------------------------------------------------

    def next_hops(self, node: str, dst: str) -> tuple[str, ...]:
        """Neighbors of ``node`` on a shortest path toward host ``dst``."""
        table = self._next_hops.get(dst)
        if table is None:
            table = self._build_next_hops(dst)
            self._next_hops[dst] = table
        return table[node]

    def _build_next_hops(self, dst: str) -> dict[str, tuple[str, ...]]:
        if dst not in self.adj:
            raise ValueError(f"unknown node {dst!r}")
        dist = {dst: 0}
        q = deque([dst])
        while q:
            u = q.popleft()
            for v in self.adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        table = {}
        for u in self.adj:
            if u == dst:
                continue
            du = dist.get(u)
            if du is None:
                table[u] = ()
                continue
            table[u] = tuple(sorted(v for v in self.adj[u] if dist.get(v) == du - 1))
        return table

    def equal_cost_paths(self, src: str, dst: str) -> list[tuple[str, ...]]:
        """All shortest paths src -> dst (for tests and flow pinning)."""
        paths = []

        def walk(node, acc):
            if node == dst:
                paths.append(tuple(acc))
                return
            for nxt in self.next_hops(node, dst):
                walk(nxt, acc + [nxt])

        walk(src, [src])
        return paths

    def salt(self, node: str) -> int:
        return self._salts[node]


_M64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    """splitmix64 finalizer: fixed, published integer mixing."""
    x &= _M64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _M64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _M64
    x ^= x >> 31
    return x


def _fold(part) -> int:
    # FNV-1a over the text form: stable across processes, unlike hash().
    if isinstance(part, int):
        return part & _M64
    h = 0xCBF29CE484222325
    for b in part.encode():
        h = ((h ^ b) * 0x100000001B3) & _M64
    return h


def tuple_hash(t: FiveTuple, seed: int = 0) -> int:
    """Deterministic flow hash; equal tuples always collide, by design."""
    h = seed & _M64
    for part in t:
        h = _mix64(h ^ _fold(part))
    return h


def ecmp_route(t: FiveTuple, topo: Topology, hash_seed: int = 0) -> tuple[str, ...]:
    """Pin the flow's path: at every fan-out switch pick hash(t) mod fanout.

    Same tuple, same path; tuples differing only in dport may diverge.
    Raises ValueError for unreachable pairs.
    """
    h = tuple_hash(t, hash_seed)
    node = t.src
    path = [node]
    while node != t.dst:
        hops = topo.next_hops(node, t.dst)
        if not hops:
            raise ValueError(f"no route from {t.src} to {t.dst}")
        if len(hops) == 1:
            node = hops[0]
        else:
            node = hops[_mix64(h ^ topo.salt(node)) % len(hops)]
        path.append(node)
    return tuple(path)


def build_leaf_spine(racks: int = 2, hosts_per_rack: int = 6, spines: int = 3,
                     link_rate: int = DEFAULT_LINK_RATE,
                     oversub: tuple[int, int] | str | None = None,
                     queue_pkts: int = DEFAULT_QUEUE_PKTS,
                     prop_ns: int = DEFAULT_PROP_NS) -> Topology:
    """Two-tier leaf-spine: every ToR wired to every spine.

    ``oversub`` like ``(2, 1)`` or ``"2:1"`` states the desired host-to-uplink
    ratio; a lower ratio than the physical one is realized by shutting down
    hosts in each rack (the spare hosts simply are not built).
    """
    if min(racks, hosts_per_rack, spines) < 1:
        raise ValueError("racks, hosts_per_rack and spines must all be >= 1")
    active = hosts_per_rack
    if oversub is not None:
        if isinstance(oversub, str):
            num, den = (int(x) for x in oversub.split(":"))
        else:
            num, den = oversub
        if num < 1 or den < 1:
            raise ValueError(f"bad oversubscription {oversub!r}")
        want = spines * num // den
        if spines * num % den:
            raise ValueError(f"oversubscription {num}:{den} not realizable with {spines} spines")
        if want > hosts_per_rack:
            raise ValueError(f"{num}:{den} needs {want} hosts per rack, have {hosts_per_rack}")
        active = want
    topo = Topology(name="leaf_spine")
    spine_names = [f"spine{i}" for i in range(spines)]
    for s in spine_names:
        topo.add_node(s, is_host=False)
    for r in range(racks):
        tor = f"tor{r}"
        topo.add_node(tor, is_host=False)
        for s in spine_names:
            topo.add_link(tor, s, link_rate, prop_ns, queue_pkts)
        for hh in range(active):
            host = f"h{r * active + hh}"
            topo.add_node(host, is_host=True, rack=r)
            topo.add_link(host, tor, link_rate, prop_ns, queue_pkts)
    # The bottleneck the load is calibrated against: the inter-rack (spine)
    # aggregate, both directions, since random pairs load both.
    topo.bottleneck_bps = 2 * min(spines, active) * link_rate
    topo.meta = {"racks": racks, "hosts_per_rack": active,
                 "requested_hosts_per_rack": hosts_per_rack,
                 "spines": spines, "link_rate": link_rate,
                 "queue_pkts": queue_pkts, "prop_ns": prop_ns}
    return topo


def build_fat_tree(k: int = 6, link_rate: int = 50_000_000,
                   queue_pkts: int = DEFAULT_QUEUE_PKTS,
                   prop_ns: int = 10_000) -> Topology:
    """Three-tier fat-tree with k pods: k cores, k/2 aggregation and k/2 ToR
    switches per pod, k/2 hosts per ToR (k^3/4 hosts total).

    Each aggregation switch uplinks to two cores, giving up to k equal-cost
    paths between hosts in different pods.
    """
    if k < 4 or k % 2:
        raise ValueError("k must be even and >= 4")
    topo = Topology(name="fat_tree")
    half = k // 2
    cores = [f"core{i}" for i in range(k)]
    for c in cores:
        topo.add_node(c, is_host=False)
    rack = 0
    for p in range(k):
        aggs = [f"agg{p}_{a}" for a in range(half)]
        for a, agg in enumerate(aggs):
            topo.add_node(agg, is_host=False)
            for c in (2 * a, 2 * a + 1):
                topo.add_link(agg, cores[c], link_rate, prop_ns, queue_pkts)
        for tt in range(half):
            tor = f"tor{p}_{tt}"
            topo.add_node(tor, is_host=False)
            for agg in aggs:
                topo.add_link(tor, agg, link_rate, prop_ns, queue_pkts)
            for hh in range(half):
                host = f"h{(p * half + tt) * half + hh}"
                topo.add_node(host, is_host=True, rack=rack)
                topo.add_link(host, tor, link_rate, prop_ns, queue_pkts)
            rack += 1
    topo.bottleneck_bps = 2 * k * link_rate
    topo.meta = {"k": k, "link_rate": link_rate,
                 "queue_pkts": queue_pkts, "prop_ns": prop_ns}
    return topo
