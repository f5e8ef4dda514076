from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, strategies as st

from optikv import hvc
from optikv.hvc import (
    INFINITY, CausalOrder, ClockConfigError, ClockDecodeError, ClockRegressionError, CompactHvc, Hvc,
)

from _support import random_trace, vc_order


# -- event rules ---------------------------------------------------------------------


@pytest.mark.parametrize("entries,eps,now,want", [
    ((5, 3), INFINITY, 9, (9, 3)),
    ((100, 80), 20, 110, (110, 90)),
    ((100, 80), 20, 100, (100, 80)),
])
def test_tick(entries, eps, now, want):
    assert hvc.tick(Hvc(0, entries, eps), now).entries == want


def test_tick_rejects_regression():
    with pytest.raises(ClockRegressionError):
        Hvc(0, (10, 0), INFINITY).tick(9)


@pytest.mark.parametrize("eps,want", [(INFINITY, (4, 8, 2)), (3, (7, 10, 7))])
def test_on_send(eps, want):
    assert hvc.on_send(Hvc(1, (4, 7, 2), eps), 8 if eps == INFINITY else 10).entries == want


def test_two_sends_at_same_instant_agree():
    h = Hvc(1, (4, 7, 2), 3)
    first = h.on_send(10)
    assert first.on_send(10) == first


@pytest.mark.parametrize("own,msg,eps,now,want", [
    ((9, 3), (2, 8), INFINITY, 12, (12, 8)),
    ((100, 80), (90, 95), 20, 105, (105, 95)),
])
def test_on_receive(own, msg, eps, now, want):
    assert hvc.on_receive(Hvc(0, own, eps), Hvc(1, msg, eps), now).entries == want


def test_receive_of_own_clock_is_identity():
    h = Hvc(0, (7, 4), INFINITY)
    assert h.on_receive(h, 7) == h


def test_receive_keeps_prior_knowledge():
    # a stale message must not drag entries backwards
    h = Hvc(0, (10, 50), INFINITY)
    assert h.on_receive(Hvc(1, (1, 20), INFINITY), 11).entries == (11, 50)


def test_mismatched_sizes_rejected():
    with pytest.raises(ClockConfigError):
        Hvc(0, (1, 2), INFINITY).on_receive(Hvc(1, (1, 2, 3), INFINITY), 5)
    with pytest.raises(ClockConfigError):
        hvc.compare(Hvc(0, (1, 2), INFINITY), Hvc(0, (1, 2, 3), INFINITY))


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.sampled_from([0, 3, 20, INFINITY]))
def test_finite_epsilon_floor(steps, eps):
    h = Hvc.zero(0, 3, eps)
    now = 0
    for s in steps:
        now += s
        h = h.tick(now)
        assert h.own == now
        if eps != INFINITY:
            assert all(e >= now - eps for e in h.entries)


# -- comparison ----------------------------------------------------------------------


@pytest.mark.parametrize("a,b,want", [
    ((1, 2), (1, 2), CausalOrder.EQUAL),
    ((1, 2), (2, 2), CausalOrder.BEFORE),
    ((2, 2), (1, 2), CausalOrder.AFTER),
    ((3, 1), (1, 3), CausalOrder.CONCURRENT),
])
def test_compare_examples(a, b, want):
    assert hvc.compare(Hvc(0, a), Hvc(1, b)) is want


def test_compare_is_a_strict_partial_order_on_small_vectors():
    vectors = [v for n in (1, 2, 3) for v in itertools.product(range(3), repeat=n)]
    by_len = {}
    for v in vectors:
        by_len.setdefault(len(v), []).append(Hvc(0, v))
    for clocks in by_len.values():
        for a in clocks:
            assert hvc.compare(a, a) is CausalOrder.EQUAL
            assert not hvc.happened_before(a, a)
            for b in clocks:
                ab, ba = hvc.compare(a, b), hvc.compare(b, a)
                assert (ab is CausalOrder.BEFORE) == (ba is CausalOrder.AFTER)
                assert (ab is CausalOrder.CONCURRENT) == (ba is CausalOrder.CONCURRENT)
                assert (ab is CausalOrder.EQUAL) == (a.entries == b.entries)
                if ab is CausalOrder.BEFORE:
                    assert not hvc.happened_before(b, a)
        for a, b, c in itertools.product(clocks, repeat=3):
            if hvc.happened_before(a, b) and hvc.happened_before(b, c):
                assert hvc.happened_before(a, c)


def test_matches_vector_clocks_on_random_traces():
    rng = random.Random(7)
    for _ in range(100):
        trace = random_trace(rng, rng.randint(1, 5), rng.randint(1, 40))
        for x, y in itertools.combinations(trace, 2):
            assert hvc.compare(x.hvc, y.hvc).value == vc_order(x.vc, y.vc)


def test_successive_stamps_at_one_owner_are_ordered():
    rng = random.Random(3)
    trace = random_trace(rng, 4, 200, epsilon=5)
    for p in range(4):
        mine = [e.hvc for e in trace if e.process == p]
        for a, b in zip(mine, mine[1:]):
            assert hvc.compare(a, b) is CausalOrder.BEFORE


# -- compact form ---------------------------------------------------------------------


def test_worked_compression_example():
    h = Hvc(0, (100, 80, 80, 95, 80, 80, 100, 80, 80, 80), 20)
    c = hvc.compress(h)
    assert c.positions() == [0, 3, 6]
    assert list(c.values) == [100, 95, 100]
    assert c.base == 100
    assert c.mask_string(10) == "1001001000"
    assert hvc.decompress(c, 10, owner=0) == h


def test_fully_compressible_keeps_only_owner():
    h = Hvc(2, (80, 80, 100, 80), 20)
    c = hvc.compress(h)
    assert c.positions() == [2] and c.values == (100,)
    assert hvc.decompress(c, 4) == h


def test_nothing_to_compress():
    h = Hvc(0, (100, 95, 99, 97), 50)
    c = hvc.compress(h)
    assert len(c.values) == 4
    assert hvc.decompress(c, 4, owner=0) == h


def test_compress_needs_finite_epsilon():
    with pytest.raises(ClockConfigError):
        hvc.compress(Hvc(0, (1, 2), INFINITY))


def test_mask_value_mismatch_rejected():
    with pytest.raises(ClockDecodeError):
        CompactHvc(0b101, (1,), 1, 0)
    with pytest.raises(ClockDecodeError):
        hvc.decompress(CompactHvc(0b1000, (5,), 5, 1), 3)


@st.composite
def compressible(draw):
    n = draw(st.integers(1, 12))
    owner = draw(st.integers(0, n - 1))
    eps = draw(st.integers(0, 50))
    base = draw(st.integers(eps, 10_000))
    entries = [draw(st.one_of(st.just(base - eps), st.integers(base - eps, base + 100))) for _ in range(n)]
    entries[owner] = base
    return Hvc(owner, tuple(entries), eps)


@given(compressible())
def test_compress_round_trip(h):
    c = hvc.compress(h)
    assert hvc.decompress(c, h.n, h.owner) == h
    # entries above the default are always kept
    kept = set(c.positions())
    assert all(j in kept for j, e in enumerate(h.entries) if e != h.own - h.epsilon)


# -- binary form ---------------------------------------------------------------------------


@given(compressible())
def test_wire_round_trip_finite(h):
    assert hvc.decode(hvc.encode(h), h.owner) == h
    assert hvc.from_b64(hvc.to_b64(h), h.owner) == h


@given(st.lists(st.integers(0, 2**40), min_size=1, max_size=8))
def test_wire_round_trip_infinite(entries):
    h = Hvc(0, tuple(entries), INFINITY)
    raw = hvc.encode(h)
    assert len(raw) == 12 + 8 * len(entries)
    assert hvc.decode(raw, 0) == h


def test_wire_layout_is_little_endian():
    raw = hvc.encode(Hvc(0, (1, 2), INFINITY))
    assert raw[:4] == (2).to_bytes(4, "little")
    assert raw[4:12] == (-1).to_bytes(8, "little", signed=True)
    assert raw[12:20] == (1).to_bytes(8, "little")


@pytest.mark.parametrize("raw", [b"", b"\x01\x00", hvc.encode(Hvc(0, (1, 2), INFINITY)) + b"\x00"])
def test_decode_rejects_garbage(raw):
    with pytest.raises(ClockDecodeError):
        hvc.decode(raw, 0)
