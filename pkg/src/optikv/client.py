"""Client-side replication: presets, sibling resolution and two-round quorum requests."""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from optikv import wire
from optikv.net import Transport
from optikv.store import RetryAfterRestore, Ring, StoreMetadata, Version, VersionVector

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class PutFailed(Exception):
    code = "PUT-FAILED"


class GetFailed(Exception):
    code = "GET-FAILED"


@dataclass(frozen=True)
class ConsistencyConfig:
    n: int
    r: int
    w: int
    timeout_ms: int = 500
    name: str = ""

    def __post_init__(self) -> None:
        if min(self.n, self.r, self.w) < 1 or self.r > self.n or self.w > self.n:
            raise ConfigurationError(f"invalid quorum N={self.n} R={self.r} W={self.w}")
        if not self.name:
            object.__setattr__(self, "name", f"N{self.n}R{self.r}W{self.w}")

    @property
    def model(self) -> str:
        if self.w + self.r > self.n and 2 * self.w > self.n:
            return "sequential"
        return "eventual"

    @property
    def sequential(self) -> bool:
        return self.model == "sequential"


PRESETS = {
    "N2R1W2": ConsistencyConfig(2, 1, 2, name="N2R1W2"),
    "N2R1W1": ConsistencyConfig(2, 1, 1, name="N2R1W1"),
    "N3R1W3": ConsistencyConfig(3, 1, 3, name="N3R1W3"),
    "N3R1W1": ConsistencyConfig(3, 1, 1, name="N3R1W1"),
    "N5R1W5": ConsistencyConfig(5, 1, 5, name="N5R1W5"),
    "N5R1W1": ConsistencyConfig(5, 1, 1, name="N5R1W1"),
}


def preset(name: str, timeout_ms: int | None = None) -> ConsistencyConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if timeout_ms is not None:
        cfg = ConsistencyConfig(cfg.n, cfg.r, cfg.w, timeout_ms, cfg.name)
    return cfg


def sequential_counterpart(cfg: ConsistencyConfig) -> ConsistencyConfig:
    """Same N and R, W raised to N."""
    return ConsistencyConfig(cfg.n, cfg.r, cfg.n, cfg.timeout_ms)


Resolver = Callable[[list[Version]], Version]


def maximal_versions(siblings: list[Version]) -> list[Version]:
    out: list[Version] = []
    for vv, val in siblings:
        if any(other.dominates(vv) for other, _ in siblings):
            continue
        if any(vv == o for o, _ in out):
            continue
        out.append((vv, val))
    return out


def default_resolver(siblings: list[Version]) -> Version:
    """A dominating version wins; among concurrent ones the greatest (writer, counter) list."""
    if not siblings:
        raise ValueError("nothing to resolve")
    frontier = maximal_versions(siblings)
    return max(frontier, key=lambda v: (v[0].sort_key(), v[1]))


@dataclass
class OpRecord:
    op: str
    key: str
    ok: bool
    value: Optional[str] = None
    acks: list[int] = field(default_factory=list)
    request_ids: list[int] = field(default_factory=list)
    epoch: int = 0


class QuorumClient:
    """One logical requester.  At most one in-flight operation per key."""

    def __init__(
        self,
        client_id: str,
        metadata: StoreMetadata,
        transport: Transport,
        config: ConsistencyConfig | None = None,
        resolver: Resolver = default_resolver,
        node_name: str | None = None,
        server_name: Callable[[int], str] = lambda sid: f"server:{sid}",
    ):
        self.client_id = client_id
        self.metadata = metadata
        self.transport = transport
        self.config = config or ConsistencyConfig(metadata.n, metadata.r, metadata.w, metadata.timeout_ms)
        if self.config.n > len(metadata.servers):
            raise ConfigurationError(f"N={self.config.n} exceeds cluster size {len(metadata.servers)}")
        self.resolver = resolver
        self.name = node_name or f"client:{client_id}"
        self.server_name = server_name
        self.ring = Ring(metadata.server_ids)
        self.contexts: dict[str, VersionVector] = {}
        self.epoch = 0
        self.history: list[OpRecord] = []

    def set_config(self, config: ConsistencyConfig) -> None:
        self.config = config

    async def _quorum(self, key: str, make: Callable[[], dict], need: int, parse) -> tuple[list, list[int]]:
        """Fan out, wait for ``need`` good replies; one more round on a shortfall.

        Returns (parsed replies, request ids); raises RetryAfterRestore if a
        server fences the request.
        """
        loop = asyncio.get_running_loop()
        order = self.ring.successors(key)
        round1, standby = order[: self.config.n], order[self.config.n :]
        timeout = self.config.timeout_ms / 1000.0
        good: list = []
        rids: list[int] = []
        tasks: set[asyncio.Task] = set()
        epoch = self.epoch

        def launch(targets):
            for sid in targets:
                rec = make()
                rids.append(rec["request-id"])
                tasks.add(loop.create_task(self.transport.request(self.name, self.server_name(sid), rec)))

        async def collect(deadline):
            while tasks and len(good) < need:
                remaining = deadline - loop.time()
                if remaining <= 0:
                    break
                done, _ = await asyncio.wait(tasks, timeout=remaining, return_when=asyncio.FIRST_COMPLETED)
                for t in done:
                    tasks.discard(t)
                    try:
                        resp = t.result()
                    except (asyncio.TimeoutError, OSError, ConnectionError):
                        continue
                    if resp["type"] == wire.ERROR:
                        if resp["payload"].get("error") == RetryAfterRestore.code:
                            raise RetryAfterRestore(resp["payload"].get("message", ""))
                        continue
                    if resp["payload"].get("epoch", epoch) != epoch:
                        raise RetryAfterRestore("reply from another epoch")
                    good.append(parse(resp))

        try:
            launch(round1)
            await collect(loop.time() + timeout)
            if len(good) < need and standby:
                launch(standby[: need - len(good)])
                await collect(loop.time() + timeout)
        finally:
            for t in tasks:
                t.cancel()
        if self.epoch != epoch:
            raise RetryAfterRestore("epoch changed during the operation")
        return good, rids

    async def put(self, key: str, value: str | bytes) -> OpRecord:
        data = value.encode() if isinstance(value, str) else value
        version = self.contexts.get(key, VersionVector()).increment(self.client_id)
        self.contexts[key] = version
        epoch = self.epoch

        def make():
            return wire.record(wire.PUT, {
                "key": key, "value": wire.b64(data), "version": version.as_dict(),
                "client-id": self.client_id, "epoch": epoch,
            })

        acks, rids = await self._quorum(key, make, self.config.w, lambda r: r["payload"]["server-id"])
        rec = OpRecord("put", key, len(acks) >= self.config.w, data.decode("utf-8", "replace"),
                       acks, rids, epoch)
        self.history.append(rec)
        if not rec.ok:
            raise PutFailed(f"{key}: {len(acks)}/{self.config.w} acks")
        return rec

    async def get(self, key: str) -> tuple[Optional[str], VersionVector, OpRecord]:
        epoch = self.epoch

        def make():
            return wire.record(wire.GET, {"key": key, "epoch": epoch})

        def parse(resp):
            p = resp["payload"]
            return p["server-id"], [
                (VersionVector.of(v["version"]), wire.unb64(v["value"])) for v in p["versions"]
            ]

        replies, rids = await self._quorum(key, make, self.config.r, parse)
        if len(replies) < self.config.r:
            rec = OpRecord("get", key, False, None, [s for s, _ in replies], rids, epoch)
            self.history.append(rec)
            raise GetFailed(f"{key}: {len(replies)}/{self.config.r} responses")
        siblings = [v for _, vs in replies for v in vs]
        context = self.contexts.get(key, VersionVector())
        for vv, _ in siblings:
            context = context.merge(vv)
        self.contexts[key] = context
        value = None
        if siblings:
            _, raw = self.resolver(siblings)
            value = raw.decode("utf-8", "replace")
        rec = OpRecord("get", key, True, value, [s for s, _ in replies], rids, epoch)
        self.history.append(rec)
        return value, context, rec

    async def fetch_metadata(self, server_id: int) -> StoreMetadata:
        resp = await self.transport.request(
            self.name, self.server_name(server_id), wire.record(wire.METADATA), self.config.timeout_ms / 1000.0
        )
        return StoreMetadata.from_json(resp["payload"])
