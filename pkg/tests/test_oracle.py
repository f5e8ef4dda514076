from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from optikv import oracle
from optikv.hvc import INFINITY
from optikv.monitor import run_linear, run_semilinear
from optikv.oracle import CandidateLog, LogError, OracleRefused, cut_refs, enumerate_violations, random_log, replay
from optikv.predicates import conjunction, parse

from _support import cand, random_case

DATA = Path(__file__).parent / "data"
MANIFEST = json.loads((DATA / "manifest.json").read_text())


def test_empty_log():
    assert enumerate_violations(CandidateLog([], 0), conjunction({"x": "1"}), "p", {"x": 0}) == []


def test_one_overlapping_pair():
    log = CandidateLog([cand(0, (1, 0), (3, 0), {"x": "1"}), cand(1, (0, 2), (0, 5), {"y": "1"})], 0)
    (cut,) = enumerate_violations(log, conjunction({"x": "1", "y": "1"}))
    assert cut.refs == ((0, 1), (1, 1))


def test_seed_42_three_servers_matches_linear_monitor():
    spec = conjunction({"a": "1", "b": "1", "c": "1"})
    owners = {"a": 0, "b": 1, "c": 2}
    log = random_log(random.Random(42), 3, 4, spec, owners, 0, semilinear_states=False)
    truth = cut_refs(enumerate_violations(log, spec, "p", owners))
    got = cut_refs(run_linear(spec, log.streams("p"), 0, owners=owners))
    assert truth and sorted(got) == sorted(truth)
    assert got[0] == truth[0]


def test_size_bound_enforced(monkeypatch):
    monkeypatch.setattr(oracle, "MAX_COMBINATIONS", 3)
    spec = conjunction({"x": "1", "y": "1"})
    cands = [cand(0, (i, 0), (i, 0), {"x": "1"}, seq=i + 1) for i in range(2)]
    cands += [cand(1, (0, i), (0, i), {"y": "1"}, seq=i + 1) for i in range(2)]
    with pytest.raises(OracleRefused):
        enumerate_violations(CandidateLog(cands, 0), spec)


def test_several_predicates_need_a_name():
    log = CandidateLog([cand(0, (0,), (1,), {"x": "1"}, pid="a"), cand(0, (0,), (1,), {"x": "1"}, pid="b")])
    with pytest.raises(OracleRefused):
        enumerate_violations(log, conjunction({"x": "1"}))
    assert len(enumerate_violations(log, conjunction({"x": "1"}), "a")) == 1


def test_deterministic_order():
    rng = random.Random(5)
    for _ in range(20):
        spec, owners, log = random_case(rng, 5, True)
        first = cut_refs(enumerate_violations(log, spec, "p", owners))
        again = cut_refs(enumerate_violations(CandidateLog(list(log.candidates), log.epsilon), spec, "p", owners))
        assert first == again
        by_clause = {}
        for c, r in first:
            by_clause.setdefault(c, []).append(r)
        for refs in by_clause.values():
            assert refs == sorted(refs)
        assert [c for c, _ in first] == sorted(c for c, _ in first)


# -- log files ----------------------------------------------------------------------------------


def test_log_round_trip(tmp_path):
    log = random_log(random.Random(1), 3, 5, conjunction({"a": "1", "b": "1"}), {"a": 0, "b": 2}, 5)
    path = tmp_path / "log.jsonl"
    log.save(path)
    back = CandidateLog.load(path, 5)
    assert back.candidates == log.candidates
    assert [c.state for c in back.candidates] == [c.state for c in log.candidates]


def test_gappy_log_rejected():
    text = CandidateLog([cand(0, (0,), (1,), {"x": "1"}, seq=1), cand(0, (1,), (2,), {"x": "1"}, seq=3)]).dumps()
    with pytest.raises(LogError):
        CandidateLog.loads(text)


def test_non_candidate_line_rejected():
    with pytest.raises(LogError):
        CandidateLog.loads('{"type": "PUT", "request-id": 1, "payload": {}}\n')
    with pytest.raises(LogError):
        CandidateLog.loads("not json\n")


# -- frozen regression corpus ----------------------------------------------------------------------


@pytest.mark.parametrize("entry", MANIFEST["logs"], ids=lambda e: e["file"])
def test_regression_corpus(entry):
    spec = parse(MANIFEST["spec"])
    owners = MANIFEST["owners"]
    log = CandidateLog.load(DATA / entry["file"], entry["epsilon"])
    want = [(c, tuple(tuple(r) for r in refs)) for c, refs in entry["cuts"]]
    assert len(want) == entry["violations"]
    assert cut_refs(enumerate_violations(log, spec, "p", owners)) == want
    assert sorted(cut_refs(replay(log, spec, "p", owners))) == sorted(want)
    assert sorted(cut_refs(run_semilinear(spec, log.streams("p"), log.epsilon, owners=owners))) == sorted(want)


def test_corpus_covers_the_intended_counts():
    assert sorted(e["violations"] for e in MANIFEST["logs"]) == [0, 1, 7]


# -- random generator ----------------------------------------------------------------------------------


@pytest.mark.parametrize("eps", [0, 5, INFINITY])
def test_random_log_shape(eps):
    spec = conjunction({"a": "1", "b": "1", "c": "1"})
    owners = {"a": 0, "b": 1, "c": 2}
    log = random_log(random.Random(3), 3, 6, spec, owners, eps, semilinear_states=False)
    log.check_gapless()
    streams = log.streams("p")
    assert sorted(streams) == [0, 1, 2] and all(len(s) == 6 for s in streams.values())
    assert all(c.state == {v: "1" for v, s in owners.items() if s == c.server_id} for c in log.candidates)
    for s in streams.values():
        for a, b in zip(s, s[1:]):
            assert a.end == b.start  # back-to-back intervals
