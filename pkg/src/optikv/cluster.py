"""Assemble servers, detectors, monitors, coordinator and clients on one transport."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

from optikv.client import ConsistencyConfig, QuorumClient
from optikv.detector import LocalDetector
from optikv.hvc import Hvc
from optikv.monitor import Monitor
from optikv.net import Host
from optikv.nodes import (
    COORDINATOR, HEARTBEAT_MS, ClientNode, MonitorNode, ServerNode, ServiceTimes,
    monitor_name, server_name, virtual_clock,
)
from optikv.predicates import PredicateSpec
from optikv.rollback import Coordinator, RollbackPolicy
from optikv.store import Ring, Server, StoreMetadata

log = logging.getLogger(__name__)


def place(var: str, preferred: int, ring: Ring, n: int) -> int:
    """Owner server for a variable: ``preferred`` if it replicates the key, else the key's primary."""
    prefs = ring.preference_list(var, n)
    return preferred if preferred in prefs else prefs[0]


@dataclass
class ClusterSettings:
    epsilon: float = 0
    heartbeat_ms: int = HEARTBEAT_MS
    service: ServiceTimes = field(default_factory=ServiceTimes)
    timeout_ms: int = 500
    record: bool = False
    skews: Mapping[int, int] = field(default_factory=dict)


class Cluster:
    """One deployment.  ``detect`` installs detectors; ``monitored`` also runs monitors.

    With ``detect`` and not ``monitored`` the detectors still emit their
    candidates, but nobody listens (the monitors' addresses are blackholed).
    """

    def __init__(
        self,
        net,
        config: ConsistencyConfig,
        predicates: Mapping[str, PredicateSpec] | None = None,
        owners: Mapping[str, int] | None = None,
        monitored: bool = False,
        detect: bool | None = None,
        policy: RollbackPolicy | None = None,
        settings: ClusterSettings | None = None,
        n_servers: int | None = None,
    ):
        self.net = net
        self.config = config
        self.predicates = dict(predicates or {})
        self.owners = dict(owners or {})
        self.monitored = monitored
        self.detect = monitored if detect is None else detect
        self.policy = policy
        self.settings = settings or ClusterSettings()
        n = n_servers or config.n
        self.metadata = StoreMetadata(tuple((i, server_name(i)) for i in range(n)),
                                      config.n, config.r, config.w, config.timeout_ms)
        self.hosts = [Host(f"host-{i}") for i in range(n)]
        self.servers: list[ServerNode] = []
        self.monitors: dict[str, MonitorNode] = {}
        self.clients: dict[str, ClientNode] = {}
        self.coordinator: Optional[Coordinator] = None
        # (server, key) -> [(ms, resolved value, server event index)], from an observing hook
        self.timelines: dict[tuple[int, str], list[tuple[int, Optional[str], int]]] = {}
        self._client_ids: list[str] = []

    @property
    def n_servers(self) -> int:
        return len(self.metadata.servers)

    def plan_clients(self, client_ids) -> None:
        """Declare clients up front so the coordinator knows whom to pause."""
        self._client_ids = list(client_ids)

    async def start(self) -> None:
        s = self.settings
        routes = {pid: monitor_name(pid) for pid in self.predicates}
        watched = {v for spec in self.predicates.values() for c in spec.clauses for v in c.variables}
        for i in range(self.n_servers):
            server = Server(i, self.metadata, virtual_clock(s.skews.get(i, 0)), s.epsilon)
            server.hooks.append(self._observer(i, watched))
            detector = None
            if self.detect and self.predicates:
                detector = LocalDetector(i, self.predicates, self.owners, Hvc.zero(i, self.n_servers, s.epsilon))
            node = ServerNode(server, self.net, self.hosts[i], detector, routes, s.heartbeat_ms, s.service,
                              record=s.record)
            self.servers.append(node)
            await node.start()
        if self.monitored and self.policy is not None:
            self.coordinator = Coordinator(self.net, range(self.n_servers), self._client_ids, self.policy)
            await self.coordinator.start()
        for k, (pid, spec) in enumerate(sorted(self.predicates.items())):
            if not self.monitored:
                self.net.blackhole(monitor_name(pid))
                continue
            mon = Monitor(pid, spec, self.owners, s.epsilon, virtual_clock())
            host = self.hosts[k % self.n_servers]
            node = MonitorNode(mon, self.net, host, COORDINATOR if self.coordinator else None, s.service)
            self.monitors[pid] = node
            await node.start()
        for cid in self._client_ids:
            await self.add_client(cid)

    def _observer(self, sid: int, watched: set[str]):
        events = itertools.count()

        def hook(key, value, before, after):
            if key in watched:
                self.timelines.setdefault((sid, key), []).append((after.own, value, next(events)))
        return hook

    async def add_client(self, cid: str) -> ClientNode:
        if cid in self.clients:
            return self.clients[cid]
        qc = QuorumClient(cid, self.metadata, self.net, self.config)
        node = ClientNode(qc, self.net)
        await node.start()
        self.clients[cid] = node
        return node

    async def stop(self) -> None:
        if self.coordinator is not None:
            await self.coordinator.stop()
        for node in self.servers:
            await node.stop()

    def flush_all(self) -> None:
        """Close every open local interval now (end of run)."""
        for node in self.servers:
            node.flush()

    def violations(self) -> list:
        out = []
        for node in self.monitors.values():
            out.extend(node.violations)
        return sorted(out, key=lambda v: (v.detected_at, v.predicate_id, v.clause_id, v.refs))

    def recorded_candidates(self) -> list:
        out = []
        for node in self.servers:
            out.extend(node.recorded or [])
        return out

    def scan(self) -> dict[int, dict]:
        return {node.server.server_id: node.server.scan() for node in self.servers}
