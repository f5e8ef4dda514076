"""Server-side versioned key-value table.

A key maps to a list of sibling versions ``(VersionVector, bytes)``.  Writes
reconcile on arrival: versions dominated by the incoming one are dropped,
concurrent ones are kept as siblings, and a stale write (dominated by or equal
to a stored version) is ignored.
"""

from __future__ import annotations

import bisect
import copy
import hashlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

from optikv.hvc import INFINITY, Hvc

log = logging.getLogger(__name__)


class StoreError(Exception):
    pass


class RetryAfterRestore(StoreError):
    """The server is paused or the request carries a stale epoch."""

    code = "RETRY-AFTER-RESTORE"


class ProtocolError(StoreError):
    code = "PROTOCOL-ERROR"


class RestoreRefused(StoreError):
    pass


@dataclass(frozen=True)
class VersionVector:
    counters: tuple[tuple[str, int], ...] = ()

    @classmethod
    def of(cls, mapping: Mapping[str, int] | None = None) -> VersionVector:
        items = {}
        for writer, count in (mapping or {}).items():
            if not isinstance(writer, str) or not writer:
                raise ProtocolError(f"bad writer id {writer!r}")
            if isinstance(count, bool) or not isinstance(count, int) or count < 0:
                raise ProtocolError(f"bad counter {count!r} for writer {writer!r}")
            if count:
                items[writer] = count
        return cls(tuple(sorted(items.items())))

    def as_dict(self) -> dict[str, int]:
        return dict(self.counters)

    def get(self, writer: str) -> int:
        return self.as_dict().get(writer, 0)

    def increment(self, writer: str) -> VersionVector:
        d = self.as_dict()
        d[writer] = d.get(writer, 0) + 1
        return VersionVector.of(d)

    def merge(self, other: VersionVector) -> VersionVector:
        d = self.as_dict()
        for w, c in other.counters:
            d[w] = max(d.get(w, 0), c)
        return VersionVector.of(d)

    def descends(self, other: VersionVector) -> bool:
        """self >= other elementwise."""
        mine = self.as_dict()
        return all(mine.get(w, 0) >= c for w, c in other.counters)

    def dominates(self, other: VersionVector) -> bool:
        return self != other and self.descends(other)

    def concurrent(self, other: VersionVector) -> bool:
        return not self.descends(other) and not other.descends(self)

    def sort_key(self) -> tuple:
        return tuple(sorted(self.counters, reverse=True))

    def __repr__(self) -> str:
        return "{" + ",".join(f"{w}:{c}" for w, c in self.counters) + "}"


Version = tuple[VersionVector, bytes]


def reconcile(existing: list[Version], incoming: Version) -> tuple[list[Version], bool]:
    """Return the new sibling list and whether the incoming version was kept."""
    vv, _ = incoming
    if any(old.descends(vv) for old, _ in existing):
        return existing, False
    kept = [(old, val) for old, val in existing if not vv.dominates(old)]
    kept.append(incoming)
    kept.sort(key=lambda v: v[0].sort_key())
    return kept, True


# -- cluster layout ------------------------------------------------------------


@dataclass(frozen=True)
class StoreMetadata:
    servers: tuple[tuple[int, str], ...]
    n: int
    r: int
    w: int
    timeout_ms: int = 500

    def __post_init__(self) -> None:
        if not (1 <= self.r <= self.n and 1 <= self.w <= self.n):
            raise ValueError(f"need 1<=R<=N and 1<=W<=N, got N={self.n} R={self.r} W={self.w}")
        if self.n > len(self.servers):
            raise ValueError(f"N={self.n} exceeds cluster size {len(self.servers)}")

    @property
    def server_ids(self) -> list[int]:
        return [sid for sid, _ in self.servers]

    def address(self, server_id: int) -> str:
        return dict(self.servers)[server_id]

    def to_json(self) -> dict:
        return {
            "servers": [{"id": sid, "address": addr} for sid, addr in self.servers],
            "N": self.n,
            "R": self.r,
            "W": self.w,
            "timeout": self.timeout_ms,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> StoreMetadata:
        servers = tuple((int(s["id"]), str(s.get("address", ""))) for s in obj["servers"])
        return cls(servers, int(obj["N"]), int(obj["R"]), int(obj["W"]), int(obj.get("timeout", 500)))


def _hash(text: str) -> int:
    return int.from_bytes(hashlib.md5(text.encode()).digest()[:8], "big")


class Ring:
    """Consistent-hash ring; the first N successors of a key replicate it."""

    def __init__(self, server_ids: Iterable[int], vnodes: int = 8):
        points = []
        for sid in server_ids:
            for v in range(vnodes):
                points.append((_hash(f"server-{sid}#{v}"), sid))
        points.sort()
        self._points = points
        self._keys = [p for p, _ in points]

    def successors(self, key: str) -> list[int]:
        """All servers in ring order starting at the key's position."""
        start = bisect.bisect(self._keys, _hash(key))
        order: list[int] = []
        for i in range(len(self._points)):
            sid = self._points[(start + i) % len(self._points)][1]
            if sid not in order:
                order.append(sid)
        return order

    def preference_list(self, key: str, n: int) -> list[int]:
        return self.successors(key)[:n]


# -- server --------------------------------------------------------------------


@dataclass
class PutAck:
    server_id: int
    hvc: Hvc
    epoch: int


# hook(key, resolved value or None, hvc_before, hvc_after)
PutHook = Callable[[str, Optional[str], Hvc, Hvc], None]


class Server:
    """One replica's table, clock and request handlers.

    ``clock_ms`` is the injectable physical clock.  ``hook`` runs inside the
    per-key critical section after reconciliation; its failures never fail
    the PUT.
    """

    def __init__(
        self,
        server_id: int,
        metadata: StoreMetadata,
        clock_ms: Callable[[], int],
        epsilon: float = INFINITY,
        resolver: Callable[[list[Version]], Version] | None = None,
    ):
        from optikv.client import default_resolver

        self.server_id = server_id
        self.metadata = metadata
        self.index = metadata.server_ids.index(server_id)
        self.clock_ms = clock_ms
        self.hvc = Hvc.zero(self.index, len(metadata.servers), epsilon)
        self.table: dict[str, list[Version]] = {}
        self.resolver = resolver or default_resolver
        self.hooks: list[PutHook] = []
        self.paused = False
        self.epoch = 0
        self._key_locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    # clock

    def _now(self) -> int:
        # never regress even if the physical source does
        return max(int(self.clock_ms()), self.hvc.own)

    def tick(self) -> Hvc:
        self.hvc = self.hvc.tick(self._now())
        return self.hvc

    def _check_open(self, epoch: int | None) -> None:
        if self.paused:
            raise RetryAfterRestore(f"server {self.server_id} paused")
        if epoch is not None and epoch != self.epoch:
            raise RetryAfterRestore(f"server {self.server_id} at epoch {self.epoch}, request epoch {epoch}")

    def _lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._key_locks.setdefault(key, threading.Lock())

    # handlers

    def handle_put(
        self,
        key: str,
        value: bytes,
        version: VersionVector | Mapping[str, int],
        client_id: str,
        epoch: int | None = None,
    ) -> PutAck:
        self._check_open(epoch)
        if not isinstance(key, str) or not key:
            raise ProtocolError(f"bad key {key!r}")
        if not isinstance(version, VersionVector):
            version = VersionVector.of(version)
        if not version.counters:
            raise ProtocolError("empty version")
        if isinstance(value, str):
            value = value.encode()
        with self._lock_for(key):
            with self._guard:
                before = self.tick()
                siblings, _ = reconcile(self.table.get(key, []), (version, bytes(value)))
                self.table[key] = siblings
                after = self.tick()
                resolved = self.resolved_value(key)
            for hook in self.hooks:
                try:
                    hook(key, resolved, before, after)
                except Exception:  # detector faults must not fail the PUT
                    log.exception("put hook failed on server %s", self.server_id)
        return PutAck(self.server_id, after, self.epoch)

    def handle_get(self, key: str, epoch: int | None = None) -> list[Version]:
        self._check_open(epoch)
        return list(self.table.get(key, []))

    def get_metadata(self) -> StoreMetadata:
        return self.metadata

    def resolved_value(self, key: str) -> str | None:
        siblings = self.table.get(key)
        if not siblings:
            return None
        _, value = self.resolver(siblings)
        return value.decode("utf-8", errors="replace")

    # checkpoint support

    def snapshot_state(self) -> dict:
        with self._guard:
            return {
                "server_id": self.server_id,
                "epoch": self.epoch,
                "hvc": list(self.hvc.entries),
                "table": {
                    k: [(vv.as_dict(), val.hex()) for vv, val in vs] for k, vs in sorted(self.table.items())
                },
            }

    def restore_state(self, image: Mapping) -> None:
        if image.get("server_id") != self.server_id:
            raise RestoreRefused(f"image of server {image.get('server_id')} offered to server {self.server_id}")
        with self._guard:
            self.table = {
                k: [(VersionVector.of(vv), bytes.fromhex(val)) for vv, val in vs]
                for k, vs in image["table"].items()
            }
            if image.get("hvc") is not None:
                self.hvc = Hvc(self.index, tuple(image["hvc"]), self.hvc.epsilon)

    def scan(self) -> dict:
        """Full table in snapshot form, for differential checks."""
        return copy.deepcopy(self.snapshot_state()["table"])
