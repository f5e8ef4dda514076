"""Per-predicate monitors.

A monitor keeps, per clause, a FIFO of candidates from every participating
server.  The heads of those FIFOs form the global state GS.  A head whose
interval happened before another server's head is *forbidden*: it can never
be concurrent with that server's current or future candidates, so GS
advances past it.  For semilinear clauses a candidate whose local state
falsifies its part of the clause is advanced immediately (advancing along it
cannot skip a satisfying cut).

Every consistent cut on which the clause holds is reported exactly once, at
the arrival of its last member.  Cuts completed by one arrival are reported
in lexicographic (per-server sequence) order, so the first violation is the
least satisfying cut, the one the forbidden-state advancement converges to.
"""

from __future__ import annotations

import csv
import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence

from optikv import hvc as hvcmod
from optikv import wire
from optikv.detector import Candidate
from optikv.hvc import INFINITY, CausalOrder
from optikv.predicates import Clause, GlobalView, PredicateSpec, eval_clause, local_partition

log = logging.getLogger(__name__)


class IntervalRelation(enum.Enum):
    HAPPENED_BEFORE = "happened-before"
    CONCURRENT = "concurrent"


class MonitorContractError(ValueError):
    pass


def interval_relation(c1: Candidate, c2: Candidate, epsilon: float) -> IntervalRelation:
    """Causality between two candidate intervals from different servers."""
    if c1.server_id == c2.server_id:
        raise MonitorContractError(f"both candidates come from server {c1.server_id}")
    if hvcmod.compare(c1.start, c2.start) is CausalOrder.AFTER:
        c1, c2 = c2, c1
    # common time segment (touching counts)
    if hvcmod.compare(c2.start, c1.end) in (CausalOrder.BEFORE, CausalOrder.EQUAL):
        return IntervalRelation.CONCURRENT
    if (hvcmod.compare(c1.end, c2.start) is CausalOrder.BEFORE
            and c1.end[c1.end.owner] <= c2.start[c2.start.owner] - epsilon):
        return IntervalRelation.HAPPENED_BEFORE
    # uncertain: treat as concurrent so no violation is missed
    return IntervalRelation.CONCURRENT


def precedes(a: Candidate, b: Candidate, epsilon: float) -> bool:
    """Directional form: a's interval happened before b's."""
    return (hvcmod.compare(a.end, b.start) is CausalOrder.BEFORE
            and a.end[a.end.owner] <= b.start[b.start.owner] - epsilon)


def concurrent(a: Candidate, b: Candidate, epsilon: float) -> bool:
    return interval_relation(a, b, epsilon) is IntervalRelation.CONCURRENT


def locally_true(clause: Clause, state: Mapping[str, Optional[str]]) -> bool:
    """Whether a candidate's state satisfies the clause terms it covers."""
    covered = False
    for name, want in clause.terms:
        if name in state:
            covered = True
            got = state[name]
            if got is None or str(got).strip() != want.strip():
                return False
    return covered


def estimate_t_violate(cut: Sequence[Candidate], epsilon: float) -> int:
    """Safe (early) estimate of when the violation began, clamped at 0."""
    if not cut:
        raise ValueError("empty cut")
    if epsilon == INFINITY:
        return 0
    return max(0, min(c.start[c.start.owner] for c in cut) - int(epsilon))


@dataclass(frozen=True)
class Violation:
    predicate_id: str
    clause_id: int
    cut: tuple[Candidate, ...]
    t_violate: int
    detected_at: int
    epoch: int = 0

    @property
    def refs(self) -> tuple[tuple[int, int], ...]:
        return tuple(c.ref for c in self.cut)

    @property
    def onset(self) -> int:
        """Latest own-entry among the cut's interval starts."""
        return max(c.start[c.start.owner] for c in self.cut)

    @property
    def latency_ms(self) -> int:
        return self.detected_at - self.onset

    def to_payload(self) -> dict:
        return {
            "predicate-id": self.predicate_id,
            "clause-id": self.clause_id,
            "cut": [{"server-id": s, "seq": q} for s, q in self.refs],
            "t-violate": self.t_violate,
            "detected-at": self.detected_at,
            "onset": self.onset,
            "epoch": self.epoch,
        }

    def to_record(self) -> dict:
        return wire.record(wire.VIOLATION, self.to_payload())


@dataclass(frozen=True)
class ViolationNotice:
    """A violation as seen by the coordinator (cut members by reference only)."""

    predicate_id: str
    clause_id: int
    refs: tuple[tuple[int, int], ...]
    t_violate: int
    detected_at: int
    onset: int
    epoch: int

    @classmethod
    def from_payload(cls, p: Mapping) -> ViolationNotice:
        return cls(str(p["predicate-id"]), int(p["clause-id"]),
                   tuple((int(r["server-id"]), int(r["seq"])) for r in p["cut"]),
                   int(p["t-violate"]), int(p["detected-at"]), int(p.get("onset", p["t-violate"])),
                   int(p.get("epoch", 0)))

    @classmethod
    def of(cls, v: Violation) -> ViolationNotice:
        return cls.from_payload(v.to_payload())

    @property
    def latency_ms(self) -> int:
        return self.detected_at - self.onset


class ClauseMonitor:
    """Cut search for one clause across its participating servers."""

    def __init__(self, clause: Clause, participants: Iterable[int], epsilon: float):
        self.clause = clause
        self.participants = sorted(set(participants))
        if not self.participants:
            raise MonitorContractError(f"clause {clause.id} has no participating server")
        self.epsilon = epsilon
        self.live: dict[int, deque[Candidate]] = {s: deque() for s in self.participants}
        self.latest: dict[int, Candidate] = {}  # newest arrival per server, true or not
        self.received = 0
        self.advanced = 0
        self.retired = 0

    def reset(self) -> None:
        for q in self.live.values():
            q.clear()
        self.latest.clear()

    def heads(self) -> dict[int, Candidate]:
        return {s: q[0] for s, q in self.live.items() if q}

    def _eliminate_forbidden(self) -> None:
        changed = True
        while changed:
            changed = False
            heads = self.heads()
            for s, head in heads.items():
                if any(t != s and precedes(head, other, self.epsilon) for t, other in heads.items()):
                    self.live[s].popleft()
                    self.advanced += 1
                    changed = True
                    break

    def _retire(self) -> None:
        """Drop candidates that precede the newest arrival of every other server.

        Later arrivals from a server start no earlier than its newest one, so
        such a candidate can never be concurrent with anything still to come
        and no future cut can contain it.  Dead candidates form a queue prefix.
        """
        for s, q in self.live.items():
            others = [c for t, c in self.latest.items() if t != s]
            if len(others) < len(self.participants) - 1:
                continue
            while q and all(precedes(q[0], c, self.epsilon) for c in others):
                q.popleft()
                self.retired += 1

    def add(self, cand: Candidate) -> list[tuple[Candidate, ...]]:
        if cand.server_id not in self.live:
            raise MonitorContractError(
                f"server {cand.server_id} does not participate in clause {self.clause.id}")
        self.received += 1
        self.latest[cand.server_id] = cand
        cuts: list[tuple[Candidate, ...]] = []
        if not locally_true(self.clause, cand.state):
            self.advanced += 1
        else:
            self.live[cand.server_id].append(cand)
            self._eliminate_forbidden()
            queue = self.live[cand.server_id]
            if queue and queue[-1] is cand:
                cuts = self._cuts_with(cand)
        self._retire()
        return cuts

    def _cuts_with(self, cand: Candidate) -> list[tuple[Candidate, ...]]:
        servers = self.participants
        cuts: list[tuple[Candidate, ...]] = []
        chosen: list[Candidate] = []

        def extend(i: int) -> None:
            if i == len(servers):
                cuts.append(tuple(chosen))
                return
            options = (cand,) if servers[i] == cand.server_id else tuple(self.live[servers[i]])
            for c in options:
                if all(concurrent(c, prev, self.epsilon) for prev in chosen):
                    chosen.append(c)
                    extend(i + 1)
                    chosen.pop()

        extend(0)
        return cuts


class Monitor:
    """Monitor for one predicate; feed it candidates in per-server FIFO order."""

    def __init__(
        self,
        predicate_id: str,
        spec: PredicateSpec,
        owners: Mapping[str, int],
        epsilon: float = INFINITY,
        clock_ms: Callable[[], int] = lambda: 0,
    ):
        self.predicate_id = predicate_id
        self.spec = spec
        self.epsilon = epsilon
        self.clock_ms = clock_ms
        parts = local_partition(spec, owners)
        self.clauses = {
            c.id: ClauseMonitor(c, [s for (cid, s) in parts if cid == c.id], epsilon) for c in spec.clauses
        }
        self.epoch = 0
        self.last_seq: dict[int, int] = {}
        self.violations: list[Violation] = []
        self.dropped = 0
        self.gaps = 0

    def reset(self, epoch: int) -> None:
        self.epoch = epoch
        self.last_seq.clear()
        for cm in self.clauses.values():
            cm.reset()

    def feed(self, cand: Candidate) -> list[Violation]:
        if cand.predicate_id != self.predicate_id:
            raise MonitorContractError(f"candidate for {cand.predicate_id} fed to monitor {self.predicate_id}")
        if cand.epoch < self.epoch:
            self.dropped += 1
            return []
        if cand.epoch > self.epoch:
            self.reset(cand.epoch)
        last = self.last_seq.get(cand.server_id, 0)
        if cand.seq <= last:
            self.dropped += 1
            return []
        if cand.seq != last + 1:
            self.gaps += 1
            log.warning("monitor %s: gap in server %s stream (%s -> %s)",
                        self.predicate_id, cand.server_id, last, cand.seq)
        self.last_seq[cand.server_id] = cand.seq
        cm = self.clauses.get(cand.clause_id)
        if cm is None:
            raise MonitorContractError(f"unknown clause {cand.clause_id}")
        out = []
        now = int(self.clock_ms())
        for cut in cm.add(cand):
            assert eval_clause(cm.clause, GlobalView.from_cut(cut)) is True
            out.append(Violation(self.predicate_id, cm.clause.id, cut,
                                 estimate_t_violate(cut, self.epsilon), now, self.epoch))
        self.violations.extend(out)
        return out


# -- offline drivers ------------------------------------------------------------


def _drive_clause(
    clause: Clause,
    streams: Mapping[int, Iterable[Candidate]],
    epsilon: float,
    predicate_id: str,
    clock_ms: Callable[[], int],
) -> Iterator[Violation]:
    """Pull candidates the way the detection loop would.

    Servers with no live candidate are pulled first (GS needs one state per
    server; forbidden heads were already advanced).  Once GS is consistent the
    server whose latest candidate ends earliest is advanced next.
    """
    cm = ClauseMonitor(clause, streams.keys(), epsilon)
    its = {s: iter(streams[s]) for s in cm.participants}
    last: dict[int, Candidate] = {}
    exhausted: set[int] = set()

    def pull(s: int) -> list[tuple[Candidate, ...]]:
        try:
            cand = next(its[s])
        except StopIteration:
            exhausted.add(s)
            return []
        if cand.clause_id != clause.id:
            return []
        last[s] = cand
        return cm.add(cand)

    while True:
        starving = [s for s in cm.participants if not cm.live[s]]
        if any(s in exhausted for s in starving):
            break  # that server can never contribute again
        if starving:
            s = starving[0]
        else:
            open_ = [s for s in cm.participants if s not in exhausted]
            if not open_:
                break
            s = min(open_, key=lambda x: (last[x].end[last[x].end.owner] if x in last else -1, x))
        for cut in pull(s):
            yield Violation(predicate_id, clause.id, cut, estimate_t_violate(cut, epsilon), int(clock_ms()))


def run_linear(
    spec: PredicateSpec,
    streams: Mapping[int, Iterable[Candidate]],
    epsilon: float,
    clause_id: int = 0,
    predicate_id: str = "p",
    clock_ms: Callable[[], int] = lambda: 0,
    owners: Mapping[str, int] | None = None,
) -> Iterator[Violation]:
    """Linear (conjunctive) detection of one clause over per-server candidate streams."""
    streams = {s: list(v) for s, v in streams.items()}
    clause = spec.clause(clause_id)
    servers = _participants(spec, clause_id, streams, owners)
    if not servers:
        return
    yield from _drive_clause(clause, {s: _only(streams.get(s, ()), clause_id) for s in servers},
                             epsilon, predicate_id, clock_ms)


def run_semilinear(
    spec: PredicateSpec,
    streams: Mapping[int, Iterable[Candidate]],
    epsilon: float,
    predicate_id: str = "p",
    clock_ms: Callable[[], int] = lambda: 0,
    owners: Mapping[str, int] | None = None,
) -> Iterator[Violation]:
    """Semilinear detection: every clause of the DNF, in clause order."""
    streams = {s: list(v) for s, v in streams.items()}
    for clause in spec.clauses:
        servers = _participants(spec, clause.id, streams, owners)
        if not servers:
            continue
        yield from _drive_clause(clause, {s: _only(streams.get(s, ()), clause.id) for s in servers},
                                 epsilon, predicate_id, clock_ms)


def _only(stream: Iterable[Candidate], clause_id: int) -> Iterator[Candidate]:
    return (c for c in stream if c.clause_id == clause_id)


def infer_owners(streams: Mapping[int, Iterable[Candidate]]) -> dict[str, int]:
    """variable -> server, read off the states the candidates carry."""
    owners: dict[str, int] = {}
    for sid, cands in streams.items():
        for c in cands:
            for var in c.state:
                if owners.setdefault(var, sid) != sid:
                    raise MonitorContractError(f"variable {var!r} reported by servers {owners[var]} and {sid}")
    return owners


def _participants(spec, clause_id, streams, owners) -> list[int]:
    if owners is None:
        owners = infer_owners(streams)
    clause = spec.clause(clause_id)
    if any(v not in owners for v in clause.variables):
        return []  # some variable is never reported, the clause cannot hold
    return sorted({owners[v] for v in clause.variables})


# -- logging -----------------------------------------------------------------------

VIOLATION_COLUMNS = ["predicate", "clause", "t_violate", "detected_at", "latency_ms"]


def write_violations_csv(path, violations: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VIOLATION_COLUMNS)
        for v in violations:
            w.writerow([v.predicate_id, v.clause_id, v.t_violate, v.detected_at, v.latency_ms])
