"""Network actors: servers (with their local detector), monitors and clients.

Every actor owns a name on the transport and answers records through one
``async handle(record, src)`` coroutine, so the same code runs on the
simulated network and over TCP.
"""

from __future__ import annotations

import asyncio
import logging
import math
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

from optikv import wire
from optikv.client import QuorumClient
from optikv.detector import Candidate, LocalDetector
from optikv.monitor import Monitor, Violation
from optikv.net import Host, now_ms
from optikv.store import ProtocolError, RestoreRefused, RetryAfterRestore, Server

log = logging.getLogger(__name__)

HEARTBEAT_MS = 200
QUEUE_LIMIT = 1024


def server_name(sid: int) -> str:
    return f"server:{sid}"


def monitor_name(pid: str) -> str:
    return f"monitor:{pid}"


def client_name(cid: str) -> str:
    return f"client:{cid}"


COORDINATOR = "coordinator"


def virtual_clock(skew_ms: int = 0) -> Callable[[], int]:
    """Integer milliseconds of the running loop, offset by a fixed skew."""
    return lambda: max(0, math.floor(now_ms()) + skew_ms)


def wall_clock() -> int:
    """Integer milliseconds since the epoch, shared by separate processes."""
    return int(time.time() * 1000)


@dataclass
class ServiceTimes:
    """CPU cost (ms) of each kind of work on a host."""

    put_ms: float = 0.0
    get_ms: float = 0.0
    candidate_ms: float = 0.0  # detector side, per candidate sent
    monitor_ms: float = 0.0  # monitor side, per candidate consumed


class ServerNode:
    def __init__(
        self,
        server: Server,
        net,
        host: Host | None = None,
        detector: LocalDetector | None = None,
        routes: Mapping[str, str] | None = None,
        heartbeat_ms: int = HEARTBEAT_MS,
        service: ServiceTimes | None = None,
        queue_limit: int = QUEUE_LIMIT,
        record: bool = False,
    ):
        self.server = server
        self.net = net
        self.name = server_name(server.server_id)
        self.host = host or Host(self.name)
        self.detector = detector
        self.routes = dict(routes or {})
        self.heartbeat_ms = heartbeat_ms
        self.service = service or ServiceTimes()
        self.queue_limit = queue_limit
        self.recorded: list[Candidate] | None = [] if record else None
        self.sent = 0
        self._outbox: deque[Candidate] = deque()
        self._wake: asyncio.Event | None = None
        self._space: asyncio.Event | None = None
        self._tasks: list[asyncio.Task] = []
        if detector is not None:
            server.hooks.append(self._on_put)

    async def start(self) -> None:
        await self.net.serve(self.name, self.handle)
        if self.detector is not None:
            self._wake = asyncio.Event()
            self._space = asyncio.Event()
            loop = asyncio.get_running_loop()
            self._tasks.append(loop.create_task(self._sender()))
            if self.heartbeat_ms > 0:
                self._tasks.append(loop.create_task(self._heartbeat()))

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)

    # detector plumbing

    def _on_put(self, key, value, before, after) -> None:
        for c in self.detector.on_put(key, value, before, after):
            self._enqueue(c)

    def _enqueue(self, cand: Candidate) -> None:
        self._outbox.append(cand)
        if self._wake is not None:
            self._wake.set()

    async def _backpressure(self) -> None:
        # a full queue holds up the PUT path rather than dropping candidates
        while self._space is not None and len(self._outbox) >= self.queue_limit:
            self._space.clear()
            await self._space.wait()

    async def _sender(self) -> None:
        while True:
            while not self._outbox:
                self._wake.clear()
                await self._wake.wait()
            cand = self._outbox.popleft()
            self._space.set()
            dst = self.routes.get(cand.predicate_id)
            if self.recorded is not None:
                self.recorded.append(cand)
            self.host.charge(self.service.candidate_ms)
            if dst is not None:
                self.sent += 1
                self.net.send(self.name, dst, cand.to_record())

    async def _heartbeat(self) -> None:
        while True:
            await asyncio.sleep(self.heartbeat_ms / 1000.0)
            self.flush()

    def flush(self) -> None:
        if self.detector is None or self.server.paused:
            return
        for c in self.detector.flush(self.server.tick()):
            self._enqueue(c)

    # request handling

    async def handle(self, rec: dict, src: str | None) -> dict | None:
        kind = rec["type"]
        p = rec["payload"]
        try:
            if kind == wire.PUT:
                await self.host.work(self.service.put_ms)
                ack = self.server.handle_put(p["key"], wire.unb64(p["value"]), p["version"],
                                             p["client-id"], p.get("epoch"))
                await self._backpressure()
                return wire.reply(rec, wire.PUT_ACK, {"server-id": ack.server_id, "epoch": ack.epoch})
            if kind == wire.GET:
                await self.host.work(self.service.get_ms)
                versions = self.server.handle_get(p["key"], p.get("epoch"))
                return wire.reply(rec, wire.GET_RESP, {
                    "server-id": self.server.server_id, "epoch": self.server.epoch,
                    "versions": [{"version": vv.as_dict(), "value": wire.b64(val)} for vv, val in versions],
                })
            if kind == wire.METADATA:
                return wire.reply(rec, wire.METADATA_RESP, self.server.get_metadata().to_json())
            if kind == wire.PAUSE:
                self.server.paused = True
                return wire.reply(rec, wire.ACK, {"server-id": self.server.server_id})
            if kind == wire.SNAPSHOT:
                return wire.reply(rec, wire.ACK, {"server-id": self.server.server_id,
                                                  "image": self.server.snapshot_state()})
            if kind == wire.RESTORE:
                self.restore(p.get("image"), int(p["epoch"]))
                return wire.reply(rec, wire.ACK, {"server-id": self.server.server_id, "epoch": self.server.epoch})
            if kind == wire.RESUME:
                self.server.paused = False
                return wire.reply(rec, wire.ACK, {"server-id": self.server.server_id})
        except RetryAfterRestore as exc:
            return wire.error_reply(rec, RetryAfterRestore.code, str(exc))
        except (ProtocolError, KeyError, TypeError, wire.WireError) as exc:
            return wire.error_reply(rec, ProtocolError.code, str(exc))
        except RestoreRefused as exc:
            return wire.error_reply(rec, "RESTORE-REFUSED", str(exc))
        return wire.error_reply(rec, ProtocolError.code, f"unexpected {kind}")

    def restore(self, image: Optional[Mapping], epoch: int) -> None:
        """Replace the table (empty when ``image`` is None) and enter ``epoch``."""
        if image is not None:
            self.server.restore_state(image)
        else:
            self.server.table = {}
        self.server.epoch = epoch
        self._outbox.clear()
        if self.detector is not None:
            values = {v: self.server.resolved_value(v) for v in self.detector.relevant}
            self.detector.reset(values, self.server.tick(), epoch)


class MonitorNode:
    """Hosts one predicate's monitor and forwards its violations."""

    def __init__(
        self,
        monitor: Monitor,
        net,
        host: Host | None = None,
        coordinator: str | None = None,
        service: ServiceTimes | None = None,
    ):
        self.monitor = monitor
        self.net = net
        self.name = monitor_name(monitor.predicate_id)
        self.host = host or Host(self.name)
        self.coordinator = coordinator
        self.service = service or ServiceTimes()
        self.received = 0
        self.on_violation: list[Callable[[Violation], None]] = []

    @property
    def violations(self) -> list[Violation]:
        return self.monitor.violations

    async def start(self) -> None:
        await self.net.serve(self.name, self.handle)

    async def handle(self, rec: dict, src: str | None) -> dict | None:
        if rec["type"] != wire.CANDIDATE:
            return wire.error_reply(rec, ProtocolError.code, f"monitor does not take {rec['type']}")
        cand = Candidate.from_payload(rec["payload"])
        self.received += 1
        # detection itself is instant; the CPU it costs is billed to the host
        self.host.charge(self.service.monitor_ms)
        for v in self.monitor.feed(cand):
            for cb in self.on_violation:
                cb(v)
            if self.coordinator is not None:
                self.net.send(self.name, self.coordinator, v.to_record())
        return None


class ClientNode:
    """A quorum client plus the pause/restore gate the coordinator drives.

    A pause is acknowledged only once the workload reaches an iteration
    boundary, so checkpoints never capture half-finished protocol steps.
    """

    def __init__(self, client: QuorumClient, net):
        self.client = client
        self.net = net
        self.name = client.name
        self.iteration = 0
        self.restored_to: Optional[int] = None
        self._pause_requested = False
        self._idle = asyncio.Event()
        self._resumed = asyncio.Event()
        self._resumed.set()
        self.pauses = 0

    async def start(self) -> None:
        await self.net.serve(self.name, self.handle)

    async def boundary(self, iteration: int) -> int:
        """Mark a safe point; returns the iteration to continue from."""
        self.iteration = iteration
        self._idle.set()
        try:
            while self._pause_requested or not self._resumed.is_set():
                await self._resumed.wait()
        finally:
            self._idle.clear()
        if self.restored_to is not None:
            self.iteration, self.restored_to = self.restored_to, None
        return self.iteration

    def finish(self) -> None:
        """The workload ended; pauses no longer need to wait for it."""
        self._idle.set()

    async def handle(self, rec: dict, src: str | None) -> dict | None:
        kind = rec["type"]
        p = rec["payload"]
        if kind == wire.PAUSE:
            self._pause_requested = True
            self._resumed.clear()
            self.pauses += 1
            await self._idle.wait()
            return wire.reply(rec, wire.ACK, {"client-id": self.client.client_id, "iteration": self.iteration})
        if kind == wire.RESTORE:
            self.client.epoch = int(p["epoch"])
            self.restored_to = int(p.get("iteration", 0))
            return wire.reply(rec, wire.ACK, {"client-id": self.client.client_id})
        if kind == wire.RESUME:
            self._pause_requested = False
            self._resumed.set()
            return wire.reply(rec, wire.ACK, {"client-id": self.client.client_id})
        return wire.error_reply(rec, ProtocolError.code, f"client does not take {kind}")
