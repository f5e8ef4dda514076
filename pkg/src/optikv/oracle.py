"""Brute-force ground truth for the monitors.

Enumerates every combination of one candidate per participating server and
keeps the pairwise-concurrent ones on which the clause holds.  Meant for
small recorded logs only.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from optikv import wire
from optikv.detector import Candidate
from optikv.hvc import INFINITY
from optikv.monitor import Monitor, Violation, infer_owners, interval_relation, IntervalRelation
from optikv.predicates import GlobalView, PredicateSpec, eval_clause

MAX_COMBINATIONS = 10**6


class OracleRefused(ValueError):
    pass


class LogError(ValueError):
    pass


@dataclass
class CandidateLog:
    candidates: list[Candidate] = field(default_factory=list)
    epsilon: float = INFINITY

    def streams(self, predicate_id: str | None = None) -> dict[int, list[Candidate]]:
        out: dict[int, list[Candidate]] = {}
        for c in self.candidates:
            if predicate_id is None or c.predicate_id == predicate_id:
                out.setdefault(c.server_id, []).append(c)
        return out

    @property
    def predicate_ids(self) -> list[str]:
        return sorted({c.predicate_id for c in self.candidates})

    def check_gapless(self) -> None:
        last: dict[tuple[str, int, int], int] = {}
        for c in self.candidates:
            key = (c.predicate_id, c.server_id, c.epoch)
            want = last.get(key, 0) + 1
            if c.seq != want:
                raise LogError(f"stream {key}: expected seq {want}, found {c.seq}")
            last[key] = c.seq

    def dumps(self) -> str:
        return "".join(wire.dumps(c.to_record()) + "\n" for c in self.candidates)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str, epsilon: float = INFINITY) -> CandidateLog:
        cands = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = wire.loads(line)
            except wire.WireError as exc:
                raise LogError(f"line {lineno}: {exc}") from exc
            if rec["type"] != wire.CANDIDATE:
                raise LogError(f"line {lineno}: expected CANDIDATE, found {rec['type']}")
            cands.append(Candidate.from_payload(rec["payload"]))
        log = cls(cands, epsilon)
        log.check_gapless()
        return log

    @classmethod
    def load(cls, path, epsilon: float = INFINITY) -> CandidateLog:
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read(), epsilon)


@dataclass(frozen=True)
class OracleCut:
    clause_id: int
    cut: tuple[Candidate, ...]

    @property
    def refs(self) -> tuple[tuple[int, int], ...]:
        return tuple(c.ref for c in self.cut)


def enumerate_violations(
    log: CandidateLog,
    spec: PredicateSpec,
    predicate_id: str | None = None,
    owners: Optional[Mapping[str, int]] = None,
) -> list[OracleCut]:
    """All satisfying consistent cuts, clause by clause, in lexicographic order."""
    if predicate_id is None:
        ids = log.predicate_ids
        if len(ids) > 1:
            raise OracleRefused(f"log holds several predicates {ids}; name one")
        predicate_id = ids[0] if ids else ""
    streams = log.streams(predicate_id)
    if owners is None:
        owners = infer_owners(streams)
    out: list[OracleCut] = []
    for clause in spec.clauses:
        if any(v not in owners for v in clause.variables):
            continue
        servers = sorted({owners[v] for v in clause.variables})
        per_server = [[c for c in streams.get(s, []) if c.clause_id == clause.id] for s in servers]
        size = math.prod(len(p) for p in per_server)
        if size > MAX_COMBINATIONS:
            raise OracleRefused(f"clause {clause.id}: {size} combinations exceed {MAX_COMBINATIONS}")
        for cut in itertools.product(*per_server):
            if not all(
                interval_relation(a, b, log.epsilon) is IntervalRelation.CONCURRENT
                for a, b in itertools.combinations(cut, 2)
            ):
                continue
            if eval_clause(clause, GlobalView.from_cut(cut)) is True:
                out.append(OracleCut(clause.id, cut))
    return out


def replay(
    log: CandidateLog,
    spec: PredicateSpec,
    predicate_id: str | None = None,
    owners: Optional[Mapping[str, int]] = None,
) -> list[Violation]:
    """Feed the log through a streaming monitor in file order."""
    if predicate_id is None:
        ids = log.predicate_ids
        predicate_id = ids[0] if ids else ""
    cands = [c for c in log.candidates if c.predicate_id == predicate_id]
    if owners is None:
        owners = infer_owners(log.streams(predicate_id))
    owners = dict(owners)
    # variables nobody reports still need a home so the clause can be built
    for v in {v for c in spec.clauses for v in c.variables} - owners.keys():
        owners[v] = -1
    monitor = Monitor(predicate_id, spec, owners, log.epsilon)
    out: list[Violation] = []
    for c in cands:
        out.extend(monitor.feed(c))
    return out


def cut_refs(items: Iterable) -> list[tuple[int, tuple[tuple[int, int], ...]]]:
    """(clause id, member refs) for oracle cuts or violations alike."""
    return [(x.clause_id, x.refs) for x in items]


# -- random logs -----------------------------------------------------------------


def random_log(
    rng,
    servers: int,
    per_server: int,
    spec: PredicateSpec,
    owners: Mapping[str, int],
    epsilon: float = INFINITY,
    predicate_id: str = "p",
    p_true: float = 0.6,
    semilinear_states: bool = True,
) -> CandidateLog:
    """Candidate log from a random message-passing execution.

    Servers advance skewed physical clocks (skew kept within ``epsilon``) and
    exchange messages; each server reports ``per_server`` back-to-back
    intervals carrying random values for the variables it owns.  With
    ``semilinear_states`` false every interval satisfies its clause-local
    terms, as a linear detector would guarantee.
    """
    from optikv.hvc import Hvc

    skew_bound = 3 if epsilon == INFINITY else int(epsilon) // 2
    skew = [rng.randint(0, skew_bound) for _ in range(servers)]
    clocks = [Hvc.zero(s, servers, epsilon) for s in range(servers)]
    t = 0
    inflight: list[tuple[int, int, Hvc]] = []  # (deliver_at, dst, stamp)
    emitted = [0] * servers
    since: list[Optional[Hvc]] = [None] * servers
    cands: list[Candidate] = []
    by_server_clause = {}
    for clause in spec.clauses:
        for name, want in clause.terms:
            by_server_clause.setdefault((owners[name], clause.id), []).append((name, want))

    def now(s: int) -> int:
        return max(t + skew[s], clocks[s].own)

    seqs = [0] * servers
    while any(e < per_server for e in emitted):
        t += rng.randint(0, 3)
        s = rng.randrange(servers)
        roll = rng.random()
        ready = [m for m in inflight if m[1] == s and m[0] <= t]
        if ready and roll < 0.4:
            m = ready[0]
            inflight.remove(m)
            clocks[s] = clocks[s].on_receive(m[2], now(s))
        elif roll < 0.7 and servers > 1:
            clocks[s] = clocks[s].on_send(now(s))
            dst = rng.choice([d for d in range(servers) if d != s])
            inflight.append((t + rng.randint(1, 6), dst, clocks[s]))
        else:
            clocks[s] = clocks[s].tick(now(s))
        if since[s] is None:
            since[s] = clocks[s]
            continue
        if emitted[s] < per_server and rng.random() < 0.5:
            clause_ids = sorted({cid for (srv, cid) in by_server_clause if srv == s})
            if not clause_ids:
                emitted[s] = per_server
                continue
            cid = rng.choice(clause_ids)
            terms = by_server_clause[(s, cid)]
            state = {}
            for name, want in terms:
                if not semilinear_states or rng.random() < p_true:
                    state[name] = want
                else:
                    state[name] = want + "x"
            seqs[s] += 1
            cands.append(Candidate(s, predicate_id, cid, since[s], clocks[s], state, seqs[s]))
            emitted[s] += 1
            since[s] = clocks[s]
    return CandidateLog(cands, epsilon)
