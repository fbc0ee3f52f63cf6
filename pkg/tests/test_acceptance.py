"""Acceptance criteria, one test per criterion, tolerances as stated.

Each criterion prints a PASS/FAIL line with its measured numbers (run with
``pytest -s tests/test_acceptance.py`` to watch).  Runtime notes: criterion 2
is the heavy one (six simulation cells, ~10-20 minutes on two cores); the
whole module targets well under an hour on a small machine.
"""

import asyncio
import random

import pytest

from flowrep.core import FlowId, RepConfig, Scheme
from flowrep.experiments import (
    count_payload_connections,
    run_cells,
    run_probe_experiment,
    run_sort_series,
    run_sweep_cell,
)
from flowrep.metrics import percentile
from flowrep.sim.session import SimNet, open_flow, serve_counting
from flowrep.sim.topology import build_leaf_spine

SEEDS = [1, 2]  # paired across schemes everywhere


def report(num, name, ok, detail):
    verdict = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {num} [{name}]: {verdict} -- {detail}")
    return ok


# -- 1: p -> p^2 path diversity ----------------------------------------------------


def test_acceptance_1_probe_p_squared():
    fractions = {}
    for scheme in (Scheme.PLAIN, Scheme.REPFLOW, Scheme.REPSYN):
        res = run_probe_experiment(scheme, probes=10_000, seed=2)
        assert len(res.samples) == 10_000
        fractions[str(scheme)] = res.elevated_fraction
    ok = (abs(fractions["plain"] - 1 / 3) <= 0.03
          and abs(fractions["repflow"] - 1 / 9) <= 0.03
          and abs(fractions["repsyn"] - 1 / 9) <= 0.03)
    assert report(1, "p->p^2 path diversity", ok,
                  f"elevated fractions {fractions} vs 0.333/0.111 +-0.03")


# -- 2: tail latency under load ------------------------------------------------------


MICE_PER_SEED_HIGH = 25_000   # pooled across paired seeds: >= 50,000 mice
MICE_PER_SEED_LOW = 5_000


@pytest.fixture(scope="module")
def sweep_pools():
    cells = []
    for seed in SEEDS:
        for scheme in (Scheme.PLAIN, Scheme.REPFLOW, Scheme.REPSYN):
            cells.append((0.5, scheme, seed, MICE_PER_SEED_HIGH, (2, 1), 1))
            cells.append((0.1, scheme, seed, MICE_PER_SEED_LOW, (2, 1), 1))
    results = run_cells(cells, workers=2)
    pools: dict[tuple, list] = {}
    eleph: dict[tuple, list] = {}
    for (load, scheme, seed, *_), records in results.items():
        pools.setdefault((load, str(scheme)), []).extend(
            r.nfct_us for r in records if r.is_mice)
        eleph.setdefault((load, str(scheme)), []).extend(
            r.goodput_bps for r in records if r.is_elephant)
    return pools, eleph


def test_acceptance_2_tail_latency_ordering(sweep_pools):
    pools, _ = sweep_pools
    high = {s: pools[(0.5, s)] for s in ("plain", "repflow", "repsyn")}
    for s, vals in high.items():
        assert len(vals) >= 50_000, f"{s}: only {len(vals)} mice"
    p999 = {s: percentile(v, 0.999) for s, v in high.items()}
    mean = {s: sum(v) / len(v) for s, v in high.items()}
    low = {s: pools[(0.1, s)] for s in ("plain", "repflow", "repsyn")}
    mean_low = {s: sum(v) / len(v) for s, v in low.items()}
    rf_ratio = p999["repflow"] / p999["plain"]
    rs_ratio = p999["repsyn"] / p999["plain"]
    low_gap = max(abs(mean_low[s] - mean_low["plain"]) / mean_low["plain"]
                  for s in ("repflow", "repsyn"))
    ok = (rf_ratio <= 0.6 and rs_ratio <= 0.8
          and mean["repflow"] < mean["plain"]
          and low_gap <= 0.10)
    assert report(
        2, "tail latency ordering", ok,
        f"p999 us { {k: round(v) for k, v in p999.items()} } "
        f"ratios rf={rf_ratio:.3f} (<=0.6) rs={rs_ratio:.3f} (<=0.8); "
        f"mean@0.5 rf {mean['repflow']:.0f} < plain {mean['plain']:.0f}; "
        f"mean@0.1 max gap {low_gap:.1%} (<=10%)")


# -- 3: incast -------------------------------------------------------------------------


def test_acceptance_3_incast():
    conns = {str(s): count_payload_connections(s, fan_in=11)
             for s in (Scheme.PLAIN, Scheme.REPFLOW, Scheme.REPSYN)}
    pools: dict[str, list] = {"plain": [], "repflow": [], "repsyn": []}
    cells = [(0.2, scheme, seed, 1_200, (2, 1), 11)
             for scheme in (Scheme.PLAIN, Scheme.REPFLOW, Scheme.REPSYN)
             for seed in SEEDS]
    results = run_cells(cells, workers=2)
    for (load, scheme, seed, *_), records in results.items():
        pools[str(scheme)].extend(r.nfct_us for r in records if r.is_mice)
    p99 = {s: percentile(v, 0.99) for s, v in pools.items()}
    ok = (conns == {"plain": 11, "repflow": 22, "repsyn": 11}
          and p99["repsyn"] <= p99["plain"]
          and p99["repflow"] >= p99["repsyn"])
    assert report(
        3, "incast", ok,
        f"payload conns {conns} (want 11/22/11); p99 us "
        f"{ {k: round(v) for k, v in p99.items()} }: "
        f"repsyn<=plain {p99['repsyn'] <= p99['plain']}, "
        f"repflow>=repsyn {p99['repflow'] >= p99['repsyn']} "
        f"(n per scheme {len(pools['plain'])})")


# -- 4: elephants unharmed --------------------------------------------------------------


def test_acceptance_4_elephant_protection():
    goodputs: dict[str, list] = {"plain": [], "repflow": []}
    cells = [(0.4, scheme, seed, 3_500, (2, 1), 1)
             for scheme in (Scheme.PLAIN, Scheme.REPFLOW) for seed in SEEDS]
    results = run_cells(cells, workers=2)
    for (load, scheme, seed, *_), records in results.items():
        goodputs[str(scheme)].extend(r.goodput_bps for r in records
                                     if r.is_elephant)
    mean = {s: sum(v) / len(v) for s, v in goodputs.items()}
    gap = abs(mean["repflow"] - mean["plain"]) / mean["plain"]
    ok = gap <= 0.05
    assert report(
        4, "elephant protection", ok,
        f"mean goodput plain {mean['plain'] / 1e6:.1f} Mb/s vs repflow "
        f"{mean['repflow'] / 1e6:.1f} Mb/s, gap {gap:.2%} (<=5%), "
        f"n {len(goodputs['plain'])}/{len(goodputs['repflow'])}")


# -- 5: sort application ----------------------------------------------------------------


def test_acceptance_5_sort_application():
    jcts = {}
    correct = {}
    for scheme in (Scheme.PLAIN, Scheme.REPFLOW, Scheme.REPSYN):
        records = run_sort_series(scheme, n_jobs=200, seed=11)
        assert len(records) == 200
        correct[str(scheme)] = all(r.correct for r in records)
        jcts[str(scheme)] = sorted(r.jct_us for r in records)
    p999 = {s: percentile(v, 0.999) for s, v in jcts.items()}
    rf_ratio = p999["repflow"] / p999["plain"]
    rs_ratio = p999["repsyn"] / p999["plain"]
    ok = (all(correct.values()) and rf_ratio <= 0.7 and rs_ratio <= 0.7)
    assert report(
        5, "sort application", ok,
        f"all sorted correctly {correct}; p999 JCT ms "
        f"{ {k: round(v / 1000, 1) for k, v in p999.items()} }, "
        f"ratios rf={rf_ratio:.3f} rs={rs_ratio:.3f} (<=0.7)")


# -- 6: protocol property suite ------------------------------------------------------------


def test_acceptance_6_protocol_properties():
    from .fakes import Events, FakeLeg
    from .test_core_socket import client_socket, random_interleaving_case
    from .test_fsm import ORACLE

    # (a) exactly-once, in-order delivery over 1000 random interleavings
    rng = random.Random(0xACCE)
    for _ in range(1000):
        payload, chunks, order = random_interleaving_case(rng)
        sock, a, b = client_socket()
        sock.on_leg_connected(0)
        sock.on_leg_connected(1)
        ev = Events(sock)
        nxt = {0: 0, 1: 0}
        for leg in order:
            s, e = chunks[leg][nxt[leg]]
            nxt[leg] += 1
            sock.on_leg_data(leg, payload[s:e])
        assert ev.data == payload
    a_ok = True

    # (b) FSM matches the hand-enumerated oracle on all 20 pairs
    from flowrep.core import ProtocolViolation, transition
    b_ok = True
    for (state, event), want in ORACLE.items():
        if want is None:
            try:
                transition(state, event)
                b_ok = False
            except ProtocolViolation:
                pass
        else:
            b_ok = b_ok and transition(state, event) is want

    # (c) waiting list entries never outlive deadline + one tick
    from flowrep.core import RepSocket, WaitingList
    rng = random.Random(77)
    wl = WaitingList(0.25)
    live = {}
    now = 0.0
    c_ok = True
    for i in range(2000):
        now += rng.random() * 0.05
        wl.tick(now)
        for fid, deadline in live.items():
            if deadline <= now and fid in wl:
                c_ok = False
        fid = FlowId("c", i)
        wl.push(fid, RepSocket.server(fid, RepConfig(), FakeLeg()), now)
        live[fid] = now + 0.25

    # (d) REPSYN network payload is S plus handshake overhead, never 2S
    topo = build_leaf_spine(2, 6, 3)
    net = SimNet(topo, seed=5, track_endpoints=True)
    cfg = RepConfig(wl_timeout=0.2)
    serve_counting(net, "h6", 9000, cfg)
    size = 50_000
    flow = open_flow(net, "h0", "h6", 9000, Scheme.REPSYN, size, cfg)
    net.run()
    wire = sum(leg.ep.payload_wire for leg in flow.legs)
    loser_zero = any(ep.payload_recv == 0 for ep in net.endpoint_log
                     if not ep.is_client)
    d_ok = wire == size and loser_zero

    # (e) determinism: identical seed twice -> identical FCT multiset
    def one_run():
        recs = run_sweep_cell(0.3, Scheme.REPFLOW, seed=9, mice_target=400)
        return sorted(r.fct_us for r in recs)

    e_ok = one_run() == one_run()

    ok = a_ok and b_ok and c_ok and d_ok and e_ok
    assert report(
        6, "protocol properties", ok,
        f"exactly-once {a_ok}, fsm-oracle {b_ok}, wl-expiry {c_ok}, "
        f"repsyn-parity {d_ok}, determinism {e_ok}")


# -- 7: loopback correctness and overhead ----------------------------------------------------


def test_acceptance_7_loopback():
    from flowrep.netbind import (echo_handler, echo_roundtrip,
                                 loopback_overhead_bench, serve)

    async def echo_all():
        cfg = RepConfig(wl_timeout=3.0)
        pair = await serve(9500, cfg, echo_handler)
        rng = random.Random(0xEC0)
        try:
            for i in range(500):
                mode = (Scheme.PLAIN, Scheme.REPFLOW, Scheme.REPSYN)[i % 3]
                # log-uniform sizes up to 1 MB
                size = int(10 ** rng.uniform(0, 6))
                payload = rng.randbytes(size)
                got = await echo_roundtrip("127.0.0.1", 9500, cfg, mode, payload)
                if got != payload:
                    return False, f"mismatch on trial {i} mode {mode} size {size}"
        finally:
            await pair.close()
        return True, "500 echo round-trips byte-exact"

    echo_ok, echo_detail = asyncio.run(echo_all())

    async def bench_all():
        # interleave the modes in rounds so machine drift hits all equally
        fcts = {m: [] for m in (Scheme.PLAIN, Scheme.REPSYN, Scheme.REPFLOW)}
        for _ in range(4):
            for mode in fcts:
                stats = await loopback_overhead_bench(400, 1000, mode,
                                                      base_port=9510)
                fcts[mode].extend(stats.fcts_us)
        return {str(m): sum(v) / len(v) for m, v in fcts.items()}

    means = asyncio.run(bench_all())
    order_ok = means["plain"] <= means["repsyn"] <= means["repflow"]
    ok = echo_ok and order_ok
    assert report(
        7, "loopback correctness and overhead", ok,
        f"{echo_detail}; mean FCT us plain={means['plain']:.0f} <= "
        f"repsyn={means['repsyn']:.0f} <= repflow={means['repflow']:.0f}: "
        f"{order_ok}")
