"""Exit criteria.  Each test prints one PASS/FAIL line; the run summary repeats them."""

from __future__ import annotations

import itertools
import json
import random
import time
from pathlib import Path

import pytest

from optikv import hvc
from optikv.client import PRESETS, preset
from optikv.hvc import INFINITY, Hvc
from optikv.oracle import enumerate_violations
from optikv.predicates import Clause, PredicateParseError, parse, to_xml
from optikv.workloads import (
    ConjunctiveWorkload, GraphWorkload, SimOptions, adversarial_flag_delay, compare_throughput, monitor_overhead,
    run_conjunctive, run_graph,
)

from _support import SAMPLE_XML, Criterion, compare_with_oracle, mutate, random_case, random_trace, rollback_run, vc_order

pytestmark = pytest.mark.acceptance

REPORT_PATH = Path(__file__).resolve().parents[1] / "report.json"
SEQUENTIAL = sorted(n for n, c in PRESETS.items() if c.sequential)
EVENTUAL = sorted(n for n, c in PRESETS.items() if not c.sequential)


def test_hvc_agrees_with_vector_clocks():
    with Criterion(1, "HVC order equals vector-clock order") as crit:
        rng = random.Random("criterion-1")
        started = time.perf_counter()
        pairs = mismatches = 0
        for _ in range(1000):
            trace = random_trace(rng, rng.randint(1, 5), rng.randint(1, 50), INFINITY)
            for x, y in itertools.combinations(trace, 2):
                pairs += 1
                if hvc.compare(x.hvc, y.hvc).value != vc_order(x.vc, y.vc):
                    mismatches += 1
        elapsed = time.perf_counter() - started
        crit.detail = f"1000 traces, {pairs} pairs, {mismatches} mismatches, {elapsed:.2f}s"
        assert mismatches == 0
        assert elapsed < 10


def test_monitors_agree_with_oracle():
    with Criterion(2, "monitor output equals oracle") as crit:
        rng = random.Random("criterion-2")
        started = time.perf_counter()
        problems, violations = [], 0
        combos = [(eps, semi) for eps in (0, 5, INFINITY) for semi in (False, True)]
        for i in range(500):
            eps, semi = combos[i % len(combos)]
            spec, owners, log = random_case(rng, eps, semi)
            found = compare_with_oracle(spec, owners, log)
            problems += [f"log {i} eps={eps} semilinear={semi}: {p}" for p in found]
            violations += len(enumerate_violations(log, spec, "p", owners))
        elapsed = time.perf_counter() - started
        crit.detail = f"500 logs, {violations} oracle violations, {len(problems)} differences, {elapsed:.2f}s"
        assert problems == []
        assert violations > 0
        assert elapsed < 60


def _random_compressible(rng: random.Random) -> Hvc:
    n = rng.randint(1, 16)
    owner = rng.randrange(n)
    eps = rng.randint(0, 100)
    base = rng.randint(eps, 1_000_000)
    entries = [base - eps if rng.random() < 0.5 else rng.randint(base - eps, base + 50) for _ in range(n)]
    entries[owner] = base
    return Hvc(owner, tuple(entries), eps)


def test_compression_round_trip():
    with Criterion(3, "compact clocks decode to the original") as crit:
        rng = random.Random("criterion-3")
        clocks = [_random_compressible(rng) for _ in range(8000)]
        # and clocks produced by the event rules themselves
        while len(clocks) < 10_000:
            clocks += [e.hvc for e in random_trace(rng, rng.randint(1, 6), 40, rng.randint(0, 10))]
        clocks = clocks[:10_000]
        bad = [h for h in clocks if hvc.decompress(hvc.compress(h), h.n, h.owner) != h]
        wire_bad = [h for h in clocks[:2000] if hvc.decode(hvc.encode(h), h.owner) != h]
        worked = hvc.compress(Hvc(0, (100, 80, 80, 95, 80, 80, 100, 80, 80, 80), 20))
        crit.detail = f"{len(clocks)} clocks, {len(bad)} failures; example keeps {list(worked.values)} at {worked.positions()}"
        assert bad == [] and wire_bad == []
        assert list(worked.values) == [100, 95, 100] and worked.positions() == [0, 3, 6]


def test_mutual_exclusion_soundness_and_recall():
    with Criterion(4, "graph workload: sound under sequential, complete under eventual") as crit:
        clean_runs = 0
        false_alarms = []
        for name in SEQUENTIAL:
            for seed in range(100):
                gw = GraphWorkload.on_grid(3, 3, ["a", "b", "c"], iterations=10)
                delay = random.Random(seed).uniform(5, 40)
                opts = SimOptions(seed=seed, faults=[adversarial_flag_delay(gw, delay)])
                r = run_graph(gw, preset(name), True, opts).report
                clean_runs += 1
                if r.violations or r.episodes or r.client_overlaps:
                    false_alarms.append((name, seed, r.violations, r.episodes))
        episodes = detected = 0
        missed, worst = [], 0
        bound = None
        for name in EVENTUAL:
            for seed in range(30):
                gw = GraphWorkload.on_grid(4, 4, ["a", "b", "c", "d"], iterations=20)
                delay = random.Random(seed).uniform(10, 60)
                opts = SimOptions(seed=seed, faults=[adversarial_flag_delay(gw, delay)])
                bound = opts.heartbeat_ms + opts.delay.max_ms
                r = run_graph(gw, preset(name), True, opts).report
                episodes += r.episodes
                detected += r.detected_episodes
                if r.recall < 1.0:
                    missed.append((name, seed, r.episodes - r.detected_episodes))
                worst = max(worst, max(r.episode_latencies_ms, default=0))
        crit.detail = (f"{clean_runs} sequential runs with {len(false_alarms)} reports; "
                       f"{episodes} injected episodes, {detected} detected, worst latency {worst} ms <= {bound} ms")
        assert false_alarms == []
        assert episodes > 0 and missed == []
        assert worst <= bound


def _client_visible(art) -> str:
    return json.dumps({"histories": art.histories, "scan": art.scan}, sort_keys=True, default=str)


def test_detection_is_non_intrusive():
    with Criterion(5, "detector with blackholed monitor leaves client results unchanged") as crit:
        cases = 0
        sent = 0
        for seed in range(5):
            for name in ("N3R1W1", "N3R1W3"):
                cw = ConjunctiveWorkload(l=4, beta=0.5, duration_ms=500, seed=seed)
                with_det = run_conjunctive(cw, preset(name), False, SimOptions(seed=seed, detect=True))
                clean = run_conjunctive(cw, preset(name), False, SimOptions(seed=seed, detect=False))
                assert with_det.report.candidates_sent > 0 and clean.report.candidates_sent == 0
                assert _client_visible(with_det) == _client_visible(clean)
                sent += with_det.report.candidates_sent
                cases += 1
            gw = GraphWorkload.on_grid(3, 3, ["a", "b", "c"], iterations=8)
            opts = dict(seed=seed, faults=[adversarial_flag_delay(gw, 20)])
            with_det = run_graph(gw, preset("N3R1W1"), False, SimOptions(detect=True, **opts))
            clean = run_graph(gw, preset("N3R1W1"), False, SimOptions(detect=False, **opts))
            assert _client_visible(with_det) == _client_visible(clean)
            sent += with_det.report.candidates_sent
            cases += 1
        crit.detail = f"{cases} paired runs identical, {sent} candidates sent into the void"


def test_rollback_integrity():
    with Criterion(6, "restores match checkpoints and epochs never mix") as crit:
        restores = replies = 0
        problems = []
        for seed in range(50):
            audit = rollback_run(seed)
            restores += audit.restores
            replies += audit.replies_checked
            problems += [(seed, "scan", m) for m in audit.scan_mismatches]
            problems += [(seed, "epoch", m) for m in audit.epoch_mismatches]
        crit.detail = f"50 runs, {restores} restores, {replies} replies audited, {len(problems)} problems"
        assert restores > 0
        assert problems == []


def test_directional_throughput():
    with Criterion(7, "eventual+monitor beats sequential, overhead and latency in range") as crit:
        results = {}
        latencies = []
        for n, (ev, sq) in {2: ("N2R1W1", "N2R1W2"), 3: ("N3R1W1", "N3R1W3")}.items():
            cw = ConjunctiveWorkload(l=3, beta=0.5, put_ratio=0.5, duration_ms=3000, seed=n)
            opts = SimOptions(seed=n)
            cmp = compare_throughput(cw, preset(ev), preset(sq), True, False, opts)
            ovh = monitor_overhead(cw, preset(ev), opts)
            latencies += cmp.a.latencies_ms
            results[f"N{n}"] = {
                "eventual_monitored_ops_per_s": cmp.a.throughput,
                "sequential_ops_per_s": cmp.b.throughput,
                "gain_pct": cmp.delta_pct,
                "unmonitored_ops_per_s": ovh.a.throughput,
                "monitored_ops_per_s": ovh.b.throughput,
                "overhead_pct": ovh.b.overhead_pct,
                "violations": cmp.a.violations,
            }
        fast = sum(1 for x in latencies if x < 100) / len(latencies) if latencies else 0.0
        report = {"put_ratio": 0.5, "heartbeat_ms": SimOptions().heartbeat_ms, "by_n": results,
                  "detections": len(latencies), "fraction_under_100ms": fast,
                  "max_latency_ms": max(latencies, default=0)}
        REPORT_PATH.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        crit.detail = ", ".join(f"{k}: gain {v['gain_pct']:.1f}% overhead {v['overhead_pct']:.2f}%"
                                for k, v in results.items()) + f", {fast:.1%} of {len(latencies)} latencies < 100 ms"
        for v in results.values():
            assert v["eventual_monitored_ops_per_s"] > v["sequential_ops_per_s"]
            assert v["overhead_pct"] < 25
        assert latencies and fast >= 0.99


def test_predicate_documents():
    with Criterion(8, "sample document round trips and mutants are rejected") as crit:
        spec = parse(SAMPLE_XML)
        assert spec.detection_class == "semilinear"
        assert spec.clauses == (Clause(0, (("x2", "1"), ("y2", "1"))), Clause(1, (("z2", "1"),)))
        assert parse(to_xml(spec)) == spec and to_xml(parse(to_xml(spec))) == to_xml(spec)
        rng = random.Random("criterion-8")
        docs: list[str] = []
        while len(docs) < 200:
            doc = mutate(rng)
            if doc not in docs:
                docs.append(doc)
        unlocated = []
        for doc in docs:
            try:
                parse(doc)
                unlocated.append((doc, "accepted"))
            except PredicateParseError as err:
                if not (err.location.startswith("/predicate") or err.location.startswith("line ")):
                    unlocated.append((doc, err.location))
        crit.detail = f"{len(docs)} mutants, {len(docs) - len(unlocated)} rejected with a location"
        assert unlocated == []
