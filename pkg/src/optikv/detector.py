"""Local predicate detector hooked into a server's PUT path.

For every monitored clause that has variables on this server the detector
caches those variables and tracks the server-local sub-conjunction.  It
reports *closed* local intervals to the clause's monitor:

* linear clauses: one candidate per maximal interval during which the local
  sub-conjunction held, sent when a PUT (or a heartbeat flush) closes it;
* semilinear clauses: one candidate per local state, true or not, sent on
  every relevant PUT and on heartbeats.

Intervals are ``[start, end]`` HVC pairs stamped by the server.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

from optikv import hvc as hvcmod
from optikv import wire
from optikv.hvc import Hvc
from optikv.predicates import Clause, PredicateSpec, eval_clause, local_partition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Candidate:
    server_id: int
    predicate_id: str
    clause_id: int
    start: Hvc
    end: Hvc
    state: Mapping[str, Optional[str]]
    seq: int
    epoch: int = 0

    def __post_init__(self) -> None:
        if hvcmod.compare(self.end, self.start) is hvcmod.CausalOrder.BEFORE:
            raise ValueError(f"candidate interval ends before it starts: {self.start} .. {self.end}")
        object.__setattr__(self, "state", dict(self.state))

    def __hash__(self) -> int:
        return hash((self.server_id, self.predicate_id, self.clause_id, self.seq, self.epoch))

    @property
    def ref(self) -> tuple[int, int]:
        return (self.server_id, self.seq)

    def to_payload(self) -> dict:
        return {
            "predicate-id": self.predicate_id,
            "clause-id": self.clause_id,
            "server-id": self.server_id,
            "seq": self.seq,
            "epoch": self.epoch,
            "interval": {"start": hvcmod.to_b64(self.start), "end": hvcmod.to_b64(self.end)},
            "state": dict(self.state),
        }

    @classmethod
    def from_payload(cls, p: Mapping, owner: int | None = None) -> Candidate:
        try:
            sid = int(p["server-id"])
            idx = sid if owner is None else owner
            return cls(
                server_id=sid,
                predicate_id=str(p["predicate-id"]),
                clause_id=int(p["clause-id"]),
                start=hvcmod.from_b64(p["interval"]["start"], idx),
                end=hvcmod.from_b64(p["interval"]["end"], idx),
                state=dict(p["state"]),
                seq=int(p["seq"]),
                epoch=int(p.get("epoch", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise wire.WireError(f"malformed CANDIDATE payload: {exc}") from exc

    def to_record(self) -> dict:
        return wire.record(wire.CANDIDATE, self.to_payload())


@dataclass
class DetectorCache:
    predicate_id: str
    semilinear: bool
    local: Clause
    values: dict[str, Optional[str]]
    truth: bool
    since: Hvc
    since_flush: bool = False

    def evaluate(self) -> bool:
        return eval_clause(self.local, self.values) is True


class LocalDetector:
    def __init__(
        self,
        server_id: int,
        predicates: Mapping[str, PredicateSpec],
        owners: Mapping[str, int],
        initial: Hvc,
    ):
        self.server_id = server_id
        self.epoch = 0
        self.caches: list[DetectorCache] = []
        self.by_var: dict[str, list[DetectorCache]] = {}
        self.seq: dict[str, int] = {pid: 0 for pid in predicates}
        for pid, spec in sorted(predicates.items()):
            parts = local_partition(spec, owners)
            for clause in spec.clauses:
                local = parts.get((clause.id, server_id))
                if local is None:
                    continue
                cache = DetectorCache(pid, spec.detection_class == "semilinear", local,
                                      {v: None for v in local.variables}, False, initial)
                cache.truth = cache.evaluate()
                self.caches.append(cache)
                for var in local.variables:
                    self.by_var.setdefault(var, []).append(cache)

    @property
    def relevant(self) -> set[str]:
        return set(self.by_var)

    def _emit(self, cache: DetectorCache, end: Hvc) -> Candidate:
        self.seq[cache.predicate_id] += 1
        return Candidate(self.server_id, cache.predicate_id, cache.local.id, cache.since, end,
                         dict(cache.values), self.seq[cache.predicate_id], self.epoch)

    def _closing(self, cache: DetectorCache, end: Hvc) -> bool:
        if not (cache.semilinear or cache.truth):
            return False
        # a heartbeat already reported everything up to ``end``
        return not (cache.since_flush and cache.since == end)

    def on_put(self, key: str, value: Optional[str], before: Hvc, after: Hvc) -> list[Candidate]:
        caches = self.by_var.get(key)
        if not caches:
            return []
        out = []
        for cache in caches:
            if self._closing(cache, before):
                out.append(self._emit(cache, before))
            cache.values[key] = value
            cache.truth = cache.evaluate()
            cache.since = after
            cache.since_flush = False
        return out

    def flush(self, now: Hvc) -> list[Candidate]:
        out = []
        for cache in self.caches:
            if not (cache.semilinear or cache.truth) or cache.since == now:
                continue
            out.append(self._emit(cache, now))
            cache.since = now
            cache.since_flush = True
        return out

    def reset(self, values: Mapping[str, Optional[str]], now: Hvc, epoch: int) -> None:
        """Re-seed caches after a restore; open intervals restart at ``now``.

        Each epoch is a fresh stream, so sequence numbers start over.
        """
        self.epoch = epoch
        self.seq = {pid: 0 for pid in self.seq}
        for cache in self.caches:
            cache.values = {v: values.get(v) for v in cache.local.variables}
            cache.truth = cache.evaluate()
            cache.since = now
            cache.since_flush = False
