from __future__ import annotations

import csv
import itertools
import random

import pytest

from optikv.hvc import INFINITY
from optikv.monitor import (
    ClauseMonitor, IntervalRelation, Monitor, MonitorContractError, Violation, ViolationNotice, concurrent,
    estimate_t_violate, interval_relation, precedes, run_linear, run_semilinear, write_violations_csv,
)
from optikv.oracle import cut_refs, enumerate_violations
from optikv.predicates import conjunction, parse

from _support import SAMPLE_XML, cand, compare_with_oracle, random_case

HB = IntervalRelation.HAPPENED_BEFORE
CC = IntervalRelation.CONCURRENT


# -- interval causality ---------------------------------------------------------------------


def test_overlap_is_concurrent():
    a = cand(0, (1, 0), (3, 0))
    b = cand(1, (2, 0), (5, 0))
    assert interval_relation(a, b, 0) is CC


def test_clear_precedence():
    a = cand(0, (0, 0), (3, 3))
    b = cand(1, (4, 4), (6, 6))
    assert interval_relation(a, b, 0) is HB


def test_uncertain_case_is_concurrent():
    a = cand(0, (0, 0), (3, 3))
    b = cand(1, (4, 4), (6, 6))
    assert interval_relation(a, b, 5) is CC


def test_same_server_pair_is_a_contract_violation():
    with pytest.raises(MonitorContractError):
        interval_relation(cand(0, (0, 0), (1, 0)), cand(0, (2, 0), (3, 0)), 0)


def _lt(a, b):
    return all(x <= y for x, y in zip(a, b)) and a != b


def _reference(s1, e1, o1, s2, e2, o2, eps):
    """Written out directly from the interval rules on plain tuples."""
    if _lt(s2, s1):  # orient so the first interval does not start after the second
        s1, e1, o1, s2, e2, o2 = s2, e2, o2, s1, e1, o1
    if _lt(s2, e1) or s2 == e1:
        return "concurrent"
    if _lt(e1, s2) and e1[o1] <= s2[o2] - eps:
        return "happened-before"
    return "concurrent"


def _intervals(n, values):
    vecs = list(itertools.product(values, repeat=n))
    # a server's clock is monotone, so every interval it stamps has start <= end
    return [(s, e) for s in vecs for e in vecs if s == e or _lt(s, e)]


@pytest.mark.parametrize("n,values", [(2, range(3)), (3, range(2))])
def test_exhaustive_against_hand_written_rules(n, values):
    ivs = _intervals(n, values)
    for eps in (0, 1, INFINITY):
        for (s1, e1), (s2, e2) in itertools.product(ivs, repeat=2):
            a = cand(0, s1, e1)
            b = cand(1, s2, e2)
            want = _reference(s1, e1, 0, s2, e2, 1, eps)
            assert interval_relation(a, b, eps).value == want, (s1, e1, s2, e2, eps)
            # orientation independence
            assert interval_relation(b, a, eps) is interval_relation(a, b, eps)
            # the directional form the monitor uses agrees with it
            assert concurrent(a, b, eps) == (not precedes(a, b, eps) and not precedes(b, a, eps))


def test_infinite_epsilon_makes_everything_concurrent():
    a = cand(0, (0, 0), (1, 1))
    b = cand(1, (50, 50), (60, 60))
    assert interval_relation(a, b, 0) is HB
    assert interval_relation(a, b, INFINITY) is CC


def test_larger_epsilon_never_loses_violations():
    rng = random.Random(11)
    for _ in range(60):
        spec, owners, log = random_case(rng, 0, semilinear=rng.random() < 0.5)
        sets = []
        for eps in (0, 2, 5, 20, INFINITY):
            log.epsilon = eps
            found = set(cut_refs(enumerate_violations(log, spec, "p", owners)))
            sets.append(found)
        for smaller, larger in zip(sets, sets[1:]):
            assert smaller <= larger


# -- T_violate ---------------------------------------------------------------------------------


def test_t_violate_examples():
    cut = [cand(0, (100, 90), (130, 120)), cand(1, (100, 120), (110, 125))]
    assert estimate_t_violate(cut, 20) == 80
    assert estimate_t_violate([cand(0, (50,), (60,))], 0) == 50
    assert estimate_t_violate(cut, INFINITY) == 0
    assert estimate_t_violate([cand(0, (3,), (4,))], 10) == 0
    with pytest.raises(ValueError):
        estimate_t_violate([], 0)


# -- offline linear detection ----------------------------------------------------------------


XY = conjunction({"x": "1", "y": "1"})
OWN = {"x": 0, "y": 1}


def test_two_overlapping_candidates():
    streams = {0: [cand(0, (1, 0), (3, 0), {"x": "1"})], 1: [cand(1, (0, 2), (0, 5), {"y": "1"})]}
    (v,) = run_linear(XY, streams, 0, owners=OWN)
    assert v.refs == ((0, 1), (1, 1)) and v.clause_id == 0


def test_alternating_chain_has_no_violation():
    s0 = [cand(0, (0, 0), (1, 1), {"x": "1"}, 1), cand(0, (4, 4), (5, 5), {"x": "1"}, 2)]
    s1 = [cand(1, (2, 2), (3, 3), {"y": "1"}, 1), cand(1, (6, 6), (7, 7), {"y": "1"}, 2)]
    assert list(run_linear(XY, {0: s0, 1: s1}, 0, owners=OWN)) == []
    assert enumerate_violations_count(XY, s0 + s1, 0) == 0
    # with a wide enough uncertainty window every pair may overlap
    assert len(list(run_linear(XY, {0: s0, 1: s1}, INFINITY, owners=OWN))) == 4


def enumerate_violations_count(spec, cands, eps):
    from optikv.oracle import CandidateLog
    return len(enumerate_violations(CandidateLog(cands, eps), spec, "p", OWN))


def test_stream_end_stops_detection():
    streams = {0: [cand(0, (1, 0), (3, 0), {"x": "1"})], 1: []}
    assert list(run_linear(XY, streams, 0, owners=OWN)) == []


# -- offline semilinear detection --------------------------------------------------------------


SAMPLE = parse(SAMPLE_XML)
SAMPLE_OWNERS = {"x2": 1, "y2": 1, "z2": 2}


def test_single_server_clause_needs_no_concurrency():
    streams = {2: [cand(2, (0, 0, 5), (0, 0, 9), {"z2": "1"}, clause=1)]}
    (v,) = run_semilinear(SAMPLE, streams, 0, owners=SAMPLE_OWNERS)
    assert v.clause_id == 1 and v.refs == ((2, 1),)


def test_toggling_variable_yields_one_violation():
    s0 = [cand(0, (0, 0), (10, 10), {"x": "0"}, 1),
          cand(0, (10, 10), (20, 20), {"x": "1"}, 2),
          cand(0, (20, 20), (30, 30), {"x": "0"}, 3)]
    s1 = [cand(1, (12, 12), (18, 18), {"y": "1"}, 1)]
    spec = conjunction({"x": "1", "y": "1"}, "semilinear")
    vs = list(run_semilinear(spec, {0: s0, 1: s1}, 0, owners=OWN))
    assert [v.refs for v in vs] == [((0, 2), (1, 1))]
    assert cut_refs(vs) == cut_refs(enumerate_violations_of(spec, s0 + s1))


def enumerate_violations_of(spec, cands):
    from optikv.oracle import CandidateLog
    return enumerate_violations(CandidateLog(cands, 0), spec, "p", OWN)


def test_all_false_states_give_nothing():
    spec = conjunction({"x": "1", "y": "1"}, "semilinear")
    s0 = [cand(0, (0, 0), (10, 10), {"x": "0"})]
    s1 = [cand(1, (0, 0), (10, 10), {"y": "2"})]
    assert list(run_semilinear(spec, {0: s0, 1: s1}, INFINITY, owners=OWN)) == []


def test_unreported_variable_disables_its_clause():
    streams = {2: [cand(2, (0, 0, 5), (0, 0, 9), {"z2": "0"}, clause=1)]}
    assert list(run_semilinear(SAMPLE, streams, 0)) == []


# -- equivalence on random logs (full sweep lives in the acceptance suite) -----------------------


@pytest.mark.parametrize("eps", [0, 5, INFINITY])
@pytest.mark.parametrize("semilinear", [False, True])
def test_random_logs_match_oracle(eps, semilinear):
    rng = random.Random(f"monitor-{eps}-{semilinear}")
    found = 0
    for _ in range(40):
        spec, owners, log = random_case(rng, eps, semilinear)
        assert compare_with_oracle(spec, owners, log) == []
        found += len(enumerate_violations(log, spec, "p", owners))
    assert found > 0


# -- streaming monitor ------------------------------------------------------------------------------


def make_monitor(clock=lambda: 1000):
    return Monitor("p", XY, OWN, 0, clock)


def test_streaming_monitor_reports_on_last_member():
    m = make_monitor()
    assert m.feed(cand(0, (1, 0), (3, 0), {"x": "1"})) == []
    (v,) = m.feed(cand(1, (0, 2), (0, 5), {"y": "1"}))
    assert v.detected_at == 1000 and v.t_violate == 1
    assert v.onset == 2 and v.latency_ms == 998
    assert m.violations == [v]


def test_duplicates_and_stale_epochs_dropped():
    m = make_monitor()
    a = cand(0, (1, 0), (3, 0), {"x": "1"})
    m.feed(a)
    assert m.feed(a) == []
    assert m.dropped == 1
    # a restore starts every stream over at sequence number 1
    m.feed(cand(0, (5, 0), (6, 0), {"x": "1"}, seq=1, epoch=1))
    assert m.epoch == 1 and m.gaps == 0
    assert m.feed(cand(1, (0, 2), (0, 5), {"y": "1"}, epoch=0)) == []
    assert m.dropped == 2


def test_new_epoch_clears_old_candidates():
    m = make_monitor()
    m.feed(cand(0, (1, 0), (3, 0), {"x": "1"}))
    m.feed(cand(0, (4, 0), (4, 0), {"x": "0"}, seq=2, epoch=0))
    # after a restore the old x=1 interval must not pair with new states
    assert m.feed(cand(1, (0, 2), (0, 5), {"y": "1"}, seq=1, epoch=1)) == []


def test_sequence_gap_counted():
    m = make_monitor()
    m.feed(cand(0, (1, 0), (3, 0), {"x": "1"}, seq=1))
    m.feed(cand(0, (4, 0), (5, 0), {"x": "1"}, seq=3))
    assert m.gaps == 1


def test_monitor_rejects_foreign_candidates():
    m = make_monitor()
    with pytest.raises(MonitorContractError):
        m.feed(cand(0, (1, 0), (3, 0), {"x": "1"}, pid="other"))
    with pytest.raises(MonitorContractError):
        ClauseMonitor(XY.clauses[0], [0], 0).add(cand(1, (0, 0), (0, 1), {"y": "1"}))


def test_violation_payload_round_trip(tmp_path):
    v = Violation("p", 0, (cand(0, (1, 0), (3, 0), {"x": "1"}), cand(1, (0, 2), (0, 5), {"y": "1"})),
                  1, 40, 2)
    n = ViolationNotice.of(v)
    assert n.refs == v.refs and n.latency_ms == v.latency_ms == 38 and n.epoch == 2
    path = tmp_path / "violations.csv"
    write_violations_csv(path, [v])
    rows = list(csv.reader(open(path)))
    assert rows == [["predicate", "clause", "t_violate", "detected_at", "latency_ms"], ["p", "0", "1", "40", "38"]]


def test_long_streams_keep_queues_short():
    cm = ClauseMonitor(XY.clauses[0], [0, 1], 0)
    cuts = []
    for k in range(50):
        cuts += cm.add(cand(0, (10 * k, 10 * k), (10 * k + 5, 10 * k + 5), {"x": "1"}, seq=k + 1))
        cuts += cm.add(cand(1, (10 * k + 2, 10 * k + 2), (10 * k + 7, 10 * k + 7), {"y": "1"}, seq=k + 1))
        assert sum(len(q) for q in cm.live.values()) <= 3
    assert len(cuts) == 50 and cm.retired > 0
