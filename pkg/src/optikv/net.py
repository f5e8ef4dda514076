"""Transports: a deterministic virtual-time network and a TCP one.

Both expose the same two calls to the nodes built on top of them::

    await net.request(src, dst, record, timeout)  # -> reply record
    net.send(src, dst, record)                    # one-way, fire and forget

Nodes register an ``async handler(record, src) -> reply | None``.

The simulated network runs on :class:`VirtualTimeLoop`, an asyncio loop whose
clock jumps straight to the next timer instead of sleeping, so the exact same
node code runs in simulation and over real sockets.
"""

from __future__ import annotations

import asyncio
import logging
import math
import random
import selectors
from collections import deque
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Optional, Protocol

from optikv import wire

log = logging.getLogger(__name__)

Handler = Callable[[dict, Optional[str]], Awaitable[Optional[dict]]]


class Transport(Protocol):
    async def request(self, src: str, dst: str, rec: dict, timeout: float | None = None) -> dict: ...

    def send(self, src: str, dst: str, rec: dict) -> None: ...


def now_ms() -> float:
    return asyncio.get_running_loop().time() * 1000.0


# -- virtual time ---------------------------------------------------------------


class SimulationDeadlock(RuntimeError):
    pass


class _VirtualSelector:
    def __init__(self, loop: VirtualTimeLoop, real: selectors.BaseSelector):
        self._loop = loop
        self._real = real

    def select(self, timeout=None):
        events = self._real.select(0)
        if events:
            return events
        if timeout is None:
            raise SimulationDeadlock("no runnable tasks and no pending timers")
        if timeout > 0:
            self._loop._now += timeout
        return []

    def __getattr__(self, name):
        return getattr(self._real, name)


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    """Event loop with a simulated clock (seconds)."""

    def __init__(self) -> None:
        real = selectors.DefaultSelector()
        self._now = 0.0
        super().__init__(_VirtualSelector(self, real))
        self._clock_resolution = 1e-9

    def time(self) -> float:
        return self._now


def run_simulation(main: Awaitable):
    loop = VirtualTimeLoop()
    try:
        return loop.run_until_complete(main)
    finally:
        try:
            pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
            for t in pending:
                t.cancel()
            if pending:
                loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        finally:
            loop.close()


# -- hosts (CPU contention) -------------------------------------------------------


class Host:
    """A machine whose single CPU serialises the work of co-located nodes."""

    def __init__(self, name: str):
        self.name = name
        self._cpu = asyncio.Lock()
        self.busy_ms = 0.0
        self._background: set[asyncio.Task] = set()

    async def work(self, ms: float) -> None:
        if ms <= 0:
            return
        async with self._cpu:
            self.busy_ms += ms
            await asyncio.sleep(ms / 1000.0)

    def charge(self, ms: float) -> None:
        """Consume CPU later without making the caller wait."""
        if ms <= 0:
            return
        task = asyncio.get_running_loop().create_task(self.work(ms))
        self._background.add(task)
        task.add_done_callback(self._background.discard)


# -- simulated network ------------------------------------------------------------


@dataclass
class LinkDelay:
    """Uniform per-message delay in milliseconds."""

    min_ms: float = 1.0
    max_ms: float = 5.0

    def draw(self, rng: random.Random) -> float:
        return rng.uniform(self.min_ms, self.max_ms)


@dataclass
class FaultRule:
    """Matches messages and either drops them or adds delay.

    ``match(src, dst, record) -> bool``; ``extra_ms`` may be a callable drawing
    from the link rng.
    """

    match: Callable[[str, str, dict], bool]
    drop: bool = False
    extra_ms: float | Callable[[random.Random], float] = 0.0
    start_ms: float = 0.0
    end_ms: float = math.inf
    hits: int = 0
    # the delayed message takes its own path instead of holding up the link
    overtakable: bool = False


@dataclass
class MessageLogEntry:
    sent_ms: float
    deliver_ms: float | None
    src: str
    dst: str
    type: str
    request_id: int
    dropped: bool
    payload: dict = field(repr=False, default_factory=dict)


class SimNetwork:
    def __init__(self, seed: int = 0, delay: LinkDelay | None = None, keep_log: bool = True):
        self.seed = seed
        self.delay = delay or LinkDelay()
        self.faults: list[FaultRule] = []
        self.blackholed: set[str] = set()
        self.handlers: dict[str, Handler] = {}
        self.keep_log = keep_log
        self.log: list[MessageLogEntry] = []
        self._rngs: dict[tuple[str, str], random.Random] = {}
        self._last: dict[tuple[str, str], float] = {}
        self._queues: dict[tuple[str, str], deque] = {}
        self._pending: dict[tuple[str, int], asyncio.Future] = {}
        self._tasks: set[asyncio.Task] = set()

    def register(self, name: str, handler: Handler) -> None:
        self.handlers[name] = handler

    async def serve(self, name: str, handler: Handler) -> None:
        self.register(name, handler)

    def unregister(self, name: str) -> None:
        self.handlers.pop(name, None)

    def blackhole(self, name: str) -> None:
        self.blackholed.add(name)

    def add_fault(self, rule: FaultRule) -> FaultRule:
        self.faults.append(rule)
        return rule

    def _rng(self, src: str, dst: str) -> random.Random:
        link = (src, dst)
        if link not in self._rngs:
            self._rngs[link] = random.Random(f"{self.seed}:{src}->{dst}")
        return self._rngs[link]

    def _schedule(self, src: str, dst: str, rec: dict, on_arrival: Callable[[], None]) -> None:
        loop = asyncio.get_running_loop()
        now = loop.time() * 1000.0
        rng = self._rng(src, dst)
        delay = self.delay.draw(rng)
        dropped = dst in self.blackholed
        side_path = False
        for rule in self.faults:
            if rule.start_ms <= now < rule.end_ms and rule.match(src, dst, rec):
                rule.hits += 1
                if rule.drop:
                    dropped = True
                extra = rule.extra_ms(rng) if callable(rule.extra_ms) else rule.extra_ms
                delay += extra
                side_path = side_path or rule.overtakable
        link = (src, dst)
        if side_path and not dropped:
            at = now + delay
            if self.keep_log:
                self.log.append(MessageLogEntry(now, at, src, dst, rec["type"], rec["request-id"], False,
                                                rec["payload"]))
            loop.call_at(at / 1000.0, on_arrival)
            return
        at = max(self._last.get(link, 0.0), now + delay)
        if self.keep_log:
            self.log.append(MessageLogEntry(now, None if dropped else at, src, dst, rec["type"],
                                            rec["request-id"], dropped, rec["payload"]))
        if dropped:
            return
        self._last[link] = at
        # timers due at the same instant may fire in any order, so each one
        # delivers the oldest message still queued on the link
        queue = self._queues.setdefault(link, deque())
        queue.append(on_arrival)
        loop.call_at(at / 1000.0, lambda: queue.popleft()())

    def _spawn(self, coro) -> None:
        task = asyncio.get_running_loop().create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    def _arrive(self, src: str, dst: str, rec: dict, wants_reply: bool) -> None:
        handler = self.handlers.get(dst)
        if handler is None:
            return

        async def run():
            try:
                resp = await handler(rec, src)
            except Exception:
                log.exception("handler %s failed on %s", dst, rec.get("type"))
                resp = wire.error_reply(rec, "INTERNAL")
            if wants_reply and resp is not None:
                self._schedule(dst, src, resp, lambda: self._reply_arrive(src, resp))

        self._spawn(run())

    def _reply_arrive(self, requester: str, resp: dict) -> None:
        fut = self._pending.pop((requester, resp["request-id"]), None)
        if fut is not None and not fut.done():
            fut.set_result(resp)

    async def request(self, src: str, dst: str, rec: dict, timeout: float | None = None) -> dict:
        fut = asyncio.get_running_loop().create_future()
        key = (src, rec["request-id"])
        self._pending[key] = fut
        self._schedule(src, dst, rec, lambda: self._arrive(src, dst, rec, True))
        try:
            if timeout is None:
                return await fut
            return await asyncio.wait_for(fut, timeout)
        finally:
            self._pending.pop(key, None)

    def send(self, src: str, dst: str, rec: dict) -> None:
        self._schedule(src, dst, rec, lambda: self._arrive(src, dst, rec, False))


# -- TCP -------------------------------------------------------------------------


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}; expected HOST:PORT")
    return host, int(port)


class _Conn:
    def __init__(self, reader, writer):
        self.reader = reader
        self.writer = writer
        self.lock = asyncio.Lock()
        self.waiters: dict[int, asyncio.Future] = {}
        self.task = asyncio.get_running_loop().create_task(self._pump())

    async def _pump(self) -> None:
        try:
            while True:
                rec = await wire.read_frame(self.reader)
                if rec is None:
                    break
                fut = self.waiters.pop(rec["request-id"], None)
                if fut is not None and not fut.done():
                    fut.set_result(rec)
        except (ConnectionError, wire.WireError, asyncio.IncompleteReadError):
            pass
        finally:
            for fut in self.waiters.values():
                if not fut.done():
                    fut.set_exception(ConnectionError("connection closed"))
            self.waiters.clear()

    async def write(self, rec: dict) -> None:
        async with self.lock:
            self.writer.write(wire.encode_frame(rec))
            await self.writer.drain()

    def close(self) -> None:
        self.task.cancel()
        self.writer.close()


class TcpNetwork:
    """Name-addressed TCP transport; ``addresses`` maps node name to HOST:PORT."""

    def __init__(self, addresses: dict[str, str]):
        self.addresses = dict(addresses)
        self._conns: dict[str, _Conn] = {}
        self._servers: list[asyncio.base_events.Server] = []
        self._tasks: set[asyncio.Task] = set()
        self._dial_locks: dict[str, asyncio.Lock] = {}
        self._outboxes: dict[str, asyncio.Queue] = {}

    async def serve(self, name: str, handler: Handler) -> None:
        host, port = parse_address(self.addresses[name])

        async def on_client(reader, writer):
            lock = asyncio.Lock()

            async def answer(rec):
                try:
                    resp = await handler(rec, None)
                except Exception:
                    log.exception("handler %s failed", name)
                    resp = wire.error_reply(rec, "INTERNAL")
                if resp is not None:
                    async with lock:
                        writer.write(wire.encode_frame(resp))
                        await writer.drain()

            try:
                while True:
                    rec = await wire.read_frame(reader)
                    if rec is None:
                        break
                    self._spawn(answer(rec))
            except (ConnectionError, wire.WireError, asyncio.IncompleteReadError):
                pass
            finally:
                writer.close()

        server = await asyncio.start_server(on_client, host, port)
        self._servers.append(server)

    def _spawn(self, coro) -> None:
        task = asyncio.get_running_loop().create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _conn(self, dst: str) -> _Conn:
        lock = self._dial_locks.setdefault(dst, asyncio.Lock())
        async with lock:
            conn = self._conns.get(dst)
            if conn is None or conn.task.done():
                host, port = parse_address(self.addresses[dst])
                reader, writer = await asyncio.open_connection(host, port)
                conn = self._conns[dst] = _Conn(reader, writer)
            return conn

    async def request(self, src: str, dst: str, rec: dict, timeout: float | None = None) -> dict:
        async def go():
            conn = await self._conn(dst)
            fut = asyncio.get_running_loop().create_future()
            conn.waiters[rec["request-id"]] = fut
            await conn.write(rec)
            return await fut

        return await asyncio.wait_for(go(), timeout)

    def send(self, src: str, dst: str, rec: dict) -> None:
        # one queue and one writer per destination keeps one-way traffic FIFO
        queue = self._outboxes.get(dst)
        if queue is None:
            queue = self._outboxes[dst] = asyncio.Queue()
            self._spawn(self._drain(dst, queue))
        queue.put_nowait(rec)

    async def _drain(self, dst: str, queue: asyncio.Queue) -> None:
        while True:
            rec = await queue.get()
            try:
                conn = await self._conn(dst)
                await conn.write(rec)
            except OSError as exc:
                log.warning("send to %s failed: %s", dst, exc)

    async def close(self) -> None:
        for task in list(self._tasks):
            task.cancel()
        for conn in self._conns.values():
            conn.close()
        for server in self._servers:
            server.close()
            await server.wait_closed()
