"""Waiting list and server engine behavior."""

import random

from hypothesis import given, settings
from hypothesis import strategies as st

from flowrep.core import (
    FlowId,
    MatchKind,
    RepConfig,
    RepSocket,
    RepState,
    ServerEngine,
    WaitingList,
    server_on_syn,
)

from .fakes import FakeLeg

CFG = RepConfig(wl_timeout=1.0)


def fid(i):
    return FlowId("10.0.0.2", 50000 + i)


def make_engine():
    emitted = []
    eng = ServerEngine(CFG, emitted.append)
    return eng, emitted


# -- tick / expiry ---------------------------------------------------------------


def test_empty_list_tick_is_empty():
    wl = WaitingList(1.0)
    assert wl.tick(123.0) == []


def test_deadline_boundary_is_closed():
    wl = WaitingList(1.0)
    sock = RepSocket.server(fid(0), CFG, FakeLeg())
    wl.push(fid(0), sock, now=10.0)
    assert wl.tick(10.5) == []          # half a timeout: still fresh
    assert wl.tick(11.0) == [fid(0)]    # exactly at deadline: expired
    assert sock.state is RepState.CHOSEN  # continues as standard TCP


def test_no_entry_survives_past_deadline_plus_one_tick():
    rng = random.Random(3)
    wl = WaitingList(0.5)
    pushed = {}
    now = 0.0
    for i in range(200):
        now += rng.random() * 0.2
        f = fid(i)
        wl.push(f, RepSocket.server(f, CFG, FakeLeg()), now)
        pushed[f] = now + 0.5
        wl.tick(now)
        for g, deadline in pushed.items():
            if deadline <= now:
                assert g not in wl


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=0, max_value=1e6, allow_nan=False),
       st.floats(min_value=1e-3, max_value=100, allow_nan=False))
def test_expiry_arithmetic_property(t0, timeout):
    wl = WaitingList(timeout)
    f = fid(1)
    wl.push(f, RepSocket.server(f, CFG, FakeLeg()), t0)
    assert wl.tick(t0 + timeout / 2) == []
    assert wl.tick(t0 + timeout) == [f]


# -- matching --------------------------------------------------------------------


def test_first_syn_pushes_and_emits_usable_socket():
    eng, emitted = make_engine()
    leg = FakeLeg()
    sock = eng.accept_leg(fid(0), leg, now=0.0)
    assert emitted == [sock]
    assert sock.state is RepState.ONE_CONN
    sock.write(b"immediately usable")
    assert leg.written == b"immediately usable"


def test_second_syn_before_deadline_matches():
    eng, emitted = make_engine()
    sock = eng.accept_leg(fid(0), FakeLeg(), now=0.0)
    second = FakeLeg()
    same = eng.accept_leg(fid(0), second, now=0.4)
    assert same is sock
    assert sock.state is RepState.DUP_CONN
    assert len(eng.waiting) == 0
    assert emitted == [sock]  # on_connection fired once per logical flow


def test_stale_second_syn_becomes_new_plain_connection():
    eng, emitted = make_engine()
    first = eng.accept_leg(fid(0), FakeLeg(), now=0.0)
    late = eng.accept_leg(fid(0), FakeLeg(), now=1.0 + 1e-9)
    assert late is not first
    assert first.state is RepState.CHOSEN  # expired on the spot
    assert late.state is RepState.ONE_CONN
    assert emitted == [first, late]


def test_trigger4_entry_stays_listed_then_match_and_reset():
    eng, emitted = make_engine()
    eng.config.archive_threshold  # default 64 KB
    sock = eng.accept_leg(fid(0), FakeLeg(), now=0.0)
    sock.write(b"z" * (eng.config.archive_threshold + 1))
    assert sock.state is RepState.CHOSEN
    assert fid(0) in eng.waiting  # intentionally left listed
    late = FakeLeg()
    got = eng.accept_leg(fid(0), late, now=0.2)
    assert got is None
    assert late.was_reset  # accepted then abortively closed
    assert fid(0) not in eng.waiting


def test_duplicate_syn_for_dup_conn_flow_resets_extra_leg():
    eng, _ = make_engine()
    eng.accept_leg(fid(0), FakeLeg(), now=0.0)
    eng.accept_leg(fid(0), FakeLeg(), now=0.1)
    extra = FakeLeg()
    assert eng.accept_leg(fid(0), extra, now=0.2) is None
    assert extra.was_reset


def test_chosen_by_timeout_then_syn_served_fresh():
    eng, emitted = make_engine()
    first = eng.accept_leg(fid(0), FakeLeg(), now=0.0)
    eng.tick(now=2.0)
    assert first.state is RepState.CHOSEN
    fresh = eng.accept_leg(fid(0), FakeLeg(), now=2.5)
    assert fresh is not first and fresh.state is RepState.ONE_CONN


def test_match_result_kinds():
    wl = WaitingList(1.0)
    f = fid(9)

    def make():
        return RepSocket.server(f, CFG, FakeLeg())

    r1 = server_on_syn(wl, f, 0.0, make)
    assert r1.kind is MatchKind.NEW
    r2 = server_on_syn(wl, f, 0.5, make)
    assert r2.kind is MatchKind.MATCHED and r2.socket is r1.socket


def test_waiting_list_size_bounded_by_arrivals_per_window():
    # With expiry running, the list can never hold more than the number of
    # first-SYN arrivals inside one timeout window.
    rng = random.Random(11)
    eng, _ = make_engine()
    arrivals = []
    now = 0.0
    for i in range(500):
        now += rng.expovariate(50.0)
        eng.tick(now)
        eng.accept_leg(fid(i), FakeLeg(), now)
        arrivals.append(now)
        window = [t for t in arrivals if t > now - eng.waiting.timeout]
        assert len(eng.waiting) <= len(window)
