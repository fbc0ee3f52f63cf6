"""Size distribution, Poisson generator, incast generator, and sort app."""

import random

import pytest

from flowrep.core import Scheme
from flowrep.experiments import SimSortBackend, sim_config
from flowrep.sim.session import SimNet
from flowrep.sim.topology import build_leaf_spine
from flowrep.workload import (
    FrameReader,
    SizeDistribution,
    SortCluster,
    SortJobSpec,
    WorkloadSpec,
    encode_frame,
    encode_values,
    generate,
    incast_burst,
    measured_load,
)


def racks_of(n_per_rack=3):
    return {0: [f"h{i}" for i in range(n_per_rack)],
            1: [f"h{i + n_per_rack}" for i in range(n_per_rack)]}


# -- size distribution ------------------------------------------------------------


def test_single_atom_distribution_always_returns_it():
    dist = SizeDistribution([(1000, 0.0), (1001, 1.0)])
    rng = random.Random(0)
    sizes = {dist.sample(rng) for _ in range(200)}
    assert sizes <= {1000, 1001}


def test_bundled_table_mice_fraction_monte_carlo():
    dist = SizeDistribution.web_search()
    expected = dist.fraction_below(100_000)
    assert expected >= 0.55
    rng = random.Random(1)
    n = 1_000_000
    mice = sum(1 for _ in range(n) if dist.sample(rng) < 100_000)
    assert abs(mice / n - expected) < 0.01


def test_bundled_table_byte_share_of_elephants():
    dist = SizeDistribution.web_search()
    assert dist.byte_share_above(1_000_000) >= 0.90


def test_bundled_table_monte_carlo_byte_share():
    dist = SizeDistribution.web_search()
    rng = random.Random(2)
    sizes = [dist.sample(rng) for _ in range(200_000)]
    big = sum(s for s in sizes if s > 1_000_000)
    assert big / sum(sizes) >= 0.90


def test_invalid_tables_rejected():
    with pytest.raises(ValueError):
        SizeDistribution([(1000, 0.0), (900, 1.0)])   # not increasing
    with pytest.raises(ValueError):
        SizeDistribution([(1000, 0.1), (2000, 1.0)])  # must start at 0


# -- generator ---------------------------------------------------------------------


def test_arrival_rate_identity():
    dist = SizeDistribution.web_search()
    spec = WorkloadSpec(dist, 0.3, 1e9)
    assert spec.arrival_rate == pytest.approx(0.3 * 1e9 / (8 * dist.mean()))


def test_generated_load_matches_target():
    dist = SizeDistribution.web_search()
    spec = WorkloadSpec(dist, 0.5, 6e9, scheme=Scheme.REPFLOW)
    rng = random.Random(3)
    duration = 12_000 / spec.arrival_rate
    flows = generate(spec, duration, racks_of(), rng)
    assert len(flows) >= 10_000
    assert measured_load(flows, duration, 6e9) == pytest.approx(0.5, abs=0.05)


def test_mice_policy_marks_only_small_flows():
    dist = SizeDistribution.web_search()
    spec = WorkloadSpec(dist, 0.4, 6e9, scheme=Scheme.REPSYN)
    flows = generate(spec, 2000 / spec.arrival_rate, racks_of(), random.Random(4))
    for f in flows:
        if f.size < 100_000:
            assert f.scheme is Scheme.REPSYN
        else:
            assert f.scheme is Scheme.PLAIN


def test_all_small_distribution_replicates_everything():
    dist = SizeDistribution([(1000, 0.0), (50_000, 1.0)])
    spec = WorkloadSpec(dist, 0.3, 1e9, scheme=Scheme.REPFLOW)
    flows = generate(spec, 500 / spec.arrival_rate, racks_of(), random.Random(5))
    assert flows and all(f.scheme is Scheme.REPFLOW for f in flows)


def test_pairs_are_inter_rack():
    dist = SizeDistribution.web_search()
    spec = WorkloadSpec(dist, 0.3, 6e9)
    racks = racks_of()
    flows = generate(spec, 1000 / spec.arrival_rate, racks, random.Random(6))
    rack = {h: r for r, hosts in racks.items() for h in hosts}
    assert all(rack[f.src] != rack[f.dst] for f in flows)


def test_incast_fan_out_counts():
    dist = SizeDistribution.web_search()
    spec = WorkloadSpec(dist, 0.2, 6e9, scheme=Scheme.REPFLOW)
    racks = {0: [f"h{i}" for i in range(6)], 1: [f"h{i+6}" for i in range(6)]}
    rng = random.Random(7)
    flows = incast_burst(spec, 600 / spec.arrival_rate, racks, rng, fan_in=11)
    mice_groups = {}
    for f in flows:
        if f.size < 100_000:
            mice_groups.setdefault((f.start_us, f.dst, f.size), []).append(f)
    assert mice_groups
    for key, group in mice_groups.items():
        assert len(group) == 11           # original plus ten parallel twins
        assert len({g.src for g in group}) == 11
    # elephants pass through unchanged
    eleph = [f for f in flows if f.size >= 1_000_000]
    assert eleph


def test_incast_fan_in_one_is_base_workload():
    dist = SizeDistribution.web_search()
    spec = WorkloadSpec(dist, 0.2, 6e9)
    rng = random.Random(8)
    base = incast_burst(spec, 300 / spec.arrival_rate, racks_of(), rng, fan_in=1)
    rng2 = random.Random(8)
    plain = generate(spec, 300 / spec.arrival_rate, racks_of(), rng2)
    assert [(f.start_us, f.size) for f in base] == [(f.start_us, f.size) for f in plain]


# -- framing ------------------------------------------------------------------------


def test_frame_reader_reassembles_split_frames():
    frames = [encode_frame(1, b"abc"), encode_frame(2, b""), encode_frame(3, b"x" * 500)]
    blob = b"".join(frames)
    reader = FrameReader()
    out = []
    for i in range(0, len(blob), 7):
        out.extend(reader.feed(blob[i:i + 7]))
    assert out == [(1, b"abc"), (2, b""), (3, b"x" * 500)]


def test_chunk_frame_payload_is_twenty_values():
    body = encode_values(range(20))
    assert len(body) == 20 * 4  # 4-byte big-endian values


# -- sort job over the simulator -------------------------------------------------------


def run_sort(n_values, scheme, seed=1, n_slaves=11, values=None):
    spec = SortJobSpec(n_values=n_values, n_slaves=n_slaves)
    topo = build_leaf_spine(2, 6, 3, oversub=(2, 1))
    net = SimNet(topo, seed=seed)
    cfg = sim_config()
    backend = SimSortBackend(net, cfg)
    hosts = sorted(topo.hosts, key=lambda h: int(h[1:]))
    cluster = SortCluster(backend, hosts)
    done = []
    rng = random.Random(seed)
    job = cluster.run_job(spec, scheme, cfg, hosts[0], hosts[1:1 + n_slaves],
                          rng, done.append, values=values)
    net.run()
    assert done, "job never finished"
    return job, done[0]


def test_sorted_input_stays_sorted():
    job, rec = run_sort(11, Scheme.PLAIN, values=list(range(11)))
    assert rec.correct
    flat = [v for k in range(job.spec.n_slaves) for v in job.results[k]]
    assert flat == list(range(11))


@pytest.mark.parametrize("scheme", [Scheme.PLAIN, Scheme.REPFLOW, Scheme.REPSYN])
def test_random_input_sorted_correctly_every_scheme(scheme):
    job, rec = run_sort(3_000, scheme, seed=9)
    assert rec.correct
    assert rec.jct_us > 0


def test_scheme_does_not_change_output():
    results = {}
    for scheme in (Scheme.PLAIN, Scheme.REPFLOW, Scheme.REPSYN):
        job, rec = run_sort(2_000, scheme, seed=10)
        assert rec.correct
        results[scheme] = [v for k in range(11) for v in job.results[k]]
    assert results[Scheme.PLAIN] == results[Scheme.REPFLOW] == results[Scheme.REPSYN]


def test_chunk_flow_count_matches_buffering():
    job, rec = run_sort(2_000, Scheme.PLAIN, seed=11)
    # every chunk carries at most 20 values, partial flushes only at scan end
    assert job.chunk_flows >= 2_000 // 20
    assert job.chunk_flows <= 2_000 // 20 + job.spec.n_slaves


def test_jct_decomposes_over_milestones():
    job, rec = run_sort(2_000, Scheme.REPFLOW, seed=12)
    ms = job.milestones
    t0 = job.t_start_us
    last_result = max(ms[f"result{k}"] for k in range(job.spec.n_slaves))
    assert rec.jct_us == pytest.approx(last_result - t0, abs=1.0)
    # scatter finishes before any slave completes; results follow completions
    assert ms["scatter_emitted"] <= min(ms[f"slave{k}_complete"]
                                        for k in range(job.spec.n_slaves))
    for k in range(job.spec.n_slaves):
        assert ms[f"slave{k}_complete"] <= ms[f"result{k}"]
