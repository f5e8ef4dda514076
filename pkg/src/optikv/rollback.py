"""Checkpoints and the response to detected violations.

The coordinator drives a stop-the-world protocol over the shared wire
format: clients are paused at an iteration boundary, then servers; state is
snapshotted or restored; then servers and clients resume.  Every restore
starts a new epoch.  Servers reject requests stamped with another epoch, and
violations reported for an old epoch are ignored, which also coalesces
several violations detected around one restore.
"""

from __future__ import annotations

import asyncio
import csv
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from optikv import wire
from optikv.monitor import Violation, ViolationNotice
from optikv.net import now_ms
from optikv.nodes import COORDINATOR, client_name, server_name

log = logging.getLogger(__name__)

STAY = "stay"
UPGRADE = "upgrade-to-sequential"


class CheckpointAborted(RuntimeError):
    pass


class RollbackHalted(RuntimeError):
    """A restore failed part-way; the system stays paused."""


@dataclass(frozen=True)
class RollbackPolicy:
    kind: str = "restart"
    interval_ms: int = 0
    threshold_per_min: float = 10.0
    window_ms: int = 60_000

    def __post_init__(self) -> None:
        if self.kind not in ("restart", "periodic"):
            raise ValueError(f"unknown rollback policy {self.kind!r}")
        if self.kind == "periodic" and self.interval_ms <= 0:
            raise ValueError("periodic checkpoints need a positive interval")
        if self.window_ms <= 0:
            raise ValueError("advice window must be positive")

    @property
    def label(self) -> str:
        return "restart" if self.kind == "restart" else f"periodic:{self.interval_ms}"

    @classmethod
    def parse(cls, text: str, threshold: str | float | None = None) -> RollbackPolicy:
        """``restart`` or ``periodic:MS``; threshold as ``N/min`` or a number."""
        kind, _, arg = text.partition(":")
        interval = 0
        if kind == "periodic":
            if not arg.isdigit():
                raise ValueError(f"bad policy {text!r}; expected periodic:MS")
            interval = int(arg)
        elif arg:
            raise ValueError(f"bad policy {text!r}")
        rate = 10.0 if threshold is None else parse_rate(threshold)
        return cls(kind, interval, rate)


def parse_rate(text: str | float) -> float:
    """Violations per minute from ``10/min``, ``2/s`` or a bare number."""
    if isinstance(text, (int, float)):
        return float(text)
    m = re.fullmatch(r"\s*([0-9.]+)\s*(?:/\s*(min|s|sec|h))?\s*", text)
    if not m:
        raise ValueError(f"bad rate {text!r}")
    value = float(m.group(1))
    return value * {"min": 1, None: 1, "s": 60, "sec": 60, "h": 1 / 60}[m.group(2)]


def advise_consistency(detected_at: Iterable[float], now: float, policy: RollbackPolicy) -> str:
    """Upgrade when the trailing-window violation rate strictly exceeds the threshold."""
    recent = sum(1 for t in detected_at if now - policy.window_ms < t <= now)
    rate = recent / (policy.window_ms / 60_000)
    return UPGRADE if rate > policy.threshold_per_min else STAY


@dataclass
class Checkpoint:
    id: int
    taken_at: int
    images: dict[int, dict]
    progress: dict[str, int]
    epoch: int = 0

    def to_json(self) -> dict:
        return {"id": self.id, "taken-at": self.taken_at, "epoch": self.epoch,
                "images": {str(k): v for k, v in self.images.items()}, "progress": self.progress}

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)


@dataclass
class RollbackReport:
    violation_id: int
    policy: str
    checkpoint_id: Optional[int]
    wasted_ms: int
    t_violate: int
    detected_at: int
    restored_at: int
    epoch: int


ROLLBACK_COLUMNS = ["violation_id", "policy", "checkpoint_id", "wasted_ms"]


def write_rollback_csv(path, reports: Iterable[RollbackReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROLLBACK_COLUMNS)
        for r in reports:
            w.writerow([r.violation_id, r.policy, "" if r.checkpoint_id is None else r.checkpoint_id, r.wasted_ms])


class Coordinator:
    """The single rollback coordinator.  One protocol run at a time."""

    def __init__(
        self,
        net,
        servers: Sequence[int],
        clients: Sequence[str],
        policy: RollbackPolicy,
        timeout_ms: int = 2000,
        on_advice: Callable[[str], None] | None = None,
        name: str = COORDINATOR,
        checkpoint_dir=None,
        clock_ms: Callable[[], float] = now_ms,
    ):
        self.net = net
        self.servers = list(servers)
        self.clients = list(clients)
        self.policy = policy
        self.timeout_ms = timeout_ms
        self.on_advice = on_advice
        self.name = name
        self.checkpoint_dir = checkpoint_dir
        self.clock_ms = clock_ms
        self.epoch = 0
        self.epoch_started_at = 0
        self.checkpoints: list[Checkpoint] = []
        self.reports: list[RollbackReport] = []
        self.received: list[ViolationNotice] = []
        self.ignored = 0
        self.aborted = 0
        self.halted: Optional[str] = None
        self.advice = STAY
        self.pause_ms: list[float] = []
        # called with (checkpoint or None, epoch) once every server has restored, before anyone resumes
        self.on_restore: list[Callable[[Optional[Checkpoint], int], None]] = []
        self._next_ckpt = 1
        self._lock = asyncio.Lock()
        self._queue: asyncio.Queue | None = None
        self._tasks: list[asyncio.Task] = []

    # lifecycle

    async def start(self) -> None:
        self._queue = asyncio.Queue()
        self.epoch_started_at = int(self.clock_ms())
        await self.net.serve(self.name, self.handle)
        loop = asyncio.get_running_loop()
        self._tasks.append(loop.create_task(self._violation_worker()))
        if self.policy.kind == "periodic":
            self._tasks.append(loop.create_task(self._checkpoint_timer()))

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)

    async def handle(self, rec: dict, src: str | None) -> dict | None:
        if rec["type"] != wire.VIOLATION:
            return wire.error_reply(rec, "PROTOCOL-ERROR", f"coordinator does not take {rec['type']}")
        self._queue.put_nowait(ViolationNotice.from_payload(rec["payload"]))
        return None

    async def _violation_worker(self) -> None:
        while True:
            notice = await self._queue.get()
            try:
                await self.on_violation(notice)
            except RollbackHalted:
                log.critical("coordinator halted: %s", self.halted)
                return

    async def _checkpoint_timer(self) -> None:
        while True:
            last = self.checkpoints[-1].taken_at if self.checkpoints else self.epoch_started_at
            wait = max(0.0, last + self.policy.interval_ms - self.clock_ms())
            await asyncio.sleep(wait / 1000.0)
            if self.clock_ms() < last + self.policy.interval_ms:
                continue
            try:
                await self.take_checkpoint()
            except CheckpointAborted as exc:
                log.warning("checkpoint aborted: %s", exc)
                await asyncio.sleep(self.policy.interval_ms / 1000.0)
            if self.halted:
                return

    # protocol steps

    async def _broadcast(self, targets: Sequence[str], make: Callable[[str], dict]) -> dict[str, dict]:
        async def one(dst):
            return dst, await self.net.request(self.name, dst, make(dst), self.timeout_ms / 1000.0)

        results = await asyncio.gather(*(one(d) for d in targets), return_exceptions=True)
        out, failures = {}, []
        for target, res in zip(targets, results):
            if isinstance(res, BaseException):
                failures.append(f"{target}: {type(res).__name__}")
            elif res[1]["type"] == wire.ERROR:
                failures.append(f"{target}: {res[1]['payload'].get('error')} {res[1]['payload'].get('message', '')}")
            else:
                out[res[0]] = res[1]
        if failures:
            raise CheckpointAborted("; ".join(failures))
        return out

    def _server_targets(self) -> list[str]:
        return [server_name(s) for s in self.servers]

    def _client_targets(self) -> list[str]:
        return [client_name(c) for c in self.clients]

    async def _pause(self) -> dict[str, int]:
        acks = await self._broadcast(self._client_targets(), lambda d: wire.record(wire.PAUSE, {"epoch": self.epoch}))
        await self._broadcast(self._server_targets(), lambda d: wire.record(wire.PAUSE, {"epoch": self.epoch}))
        return {r["payload"]["client-id"]: int(r["payload"]["iteration"]) for r in acks.values()}

    async def _resume(self) -> None:
        await self._broadcast(self._server_targets(), lambda d: wire.record(wire.RESUME, {"epoch": self.epoch}))
        await self._broadcast(self._client_targets(), lambda d: wire.record(wire.RESUME, {"epoch": self.epoch}))

    async def _resume_quietly(self) -> None:
        try:
            await self._resume()
        except CheckpointAborted as exc:
            log.warning("resume after aborted checkpoint incomplete: %s", exc)

    def _record(self, images: dict[int, dict], progress: dict[str, int], taken_at: int) -> Checkpoint:
        ckpt = Checkpoint(self._next_ckpt, taken_at, images, progress, self.epoch)
        self._next_ckpt += 1
        self.checkpoints.append(ckpt)
        if self.checkpoint_dir is not None:
            ckpt.dump(f"{self.checkpoint_dir}/checkpoint-{ckpt.id}.json")
        return ckpt

    async def take_checkpoint(self) -> Checkpoint:
        if self.halted:
            raise CheckpointAborted(f"system halted: {self.halted}")
        async with self._lock:
            started = self.clock_ms()
            try:
                progress = await self._pause()
                replies = await self._broadcast(self._server_targets(), lambda d: wire.record(wire.SNAPSHOT))
            except CheckpointAborted:
                self.aborted += 1
                await self._resume_quietly()
                raise
            taken_at = int(self.clock_ms())
            images = {int(r["payload"]["server-id"]): r["payload"]["image"] for r in replies.values()}
            ckpt = self._record(images, progress, taken_at)
            await self._resume_quietly()
            self.pause_ms.append(self.clock_ms() - started)
            return ckpt

    def _choose(self, t_violate: int) -> Optional[Checkpoint]:
        if self.policy.kind != "periodic":
            return None
        eligible = [c for c in self.checkpoints if c.taken_at <= t_violate]
        return eligible[-1] if eligible else None

    async def on_violation(self, v: Violation | ViolationNotice) -> Optional[RollbackReport]:
        notice = v if isinstance(v, ViolationNotice) else ViolationNotice.of(v)
        vid = len(self.received)
        self.received.append(notice)
        self.advice = advise_consistency((n.detected_at for n in self.received), self.clock_ms(), self.policy)
        if self.advice == UPGRADE and self.on_advice is not None:
            self.on_advice(self.advice)
        async with self._lock:
            if self.halted or notice.epoch < self.epoch:
                self.ignored += 1
                return None
            started = self.clock_ms()
            ckpt = self._choose(notice.t_violate)
            try:
                await self._pause()
            except CheckpointAborted as exc:
                # nothing has been changed yet; carry on and let the next violation retry
                log.error("pause for violation %s failed: %s", vid, exc)
                await self._resume_quietly()
                return None
            self.epoch += 1
            try:
                await self._broadcast(self._server_targets(), lambda d: wire.record(wire.RESTORE, {
                    "epoch": self.epoch,
                    "image": None if ckpt is None else ckpt.images[int(d.split(":")[1])],
                }))
                await self._broadcast(self._client_targets(), lambda d: wire.record(wire.RESTORE, {
                    "epoch": self.epoch,
                    "iteration": 0 if ckpt is None else ckpt.progress.get(d.split(":", 1)[1], 0),
                }))
            except (CheckpointAborted, KeyError) as exc:
                self.halted = f"restore for violation {vid} failed: {exc}"
                raise RollbackHalted(self.halted) from exc
            restored_at = int(self.clock_ms())
            for cb in self.on_restore:
                cb(ckpt, self.epoch)
            if ckpt is not None:
                # later checkpoints describe a history that no longer happened
                self.checkpoints = [c for c in self.checkpoints if c.taken_at <= ckpt.taken_at]
                self._record(ckpt.images, ckpt.progress, restored_at)
                base = ckpt.taken_at
            else:
                self.checkpoints = []
                if self.policy.kind == "periodic":
                    self._record({s: _empty_image(s, self.epoch) for s in self.servers},
                                 {c: 0 for c in self.clients}, restored_at)
                base = self.epoch_started_at
            self.epoch_started_at = restored_at
            await self._resume_quietly()
            self.pause_ms.append(self.clock_ms() - started)
            report = RollbackReport(vid, self.policy.label, None if ckpt is None else ckpt.id,
                                    notice.detected_at - base, notice.t_violate, notice.detected_at,
                                    restored_at, self.epoch)
            self.reports.append(report)
            return report


def _empty_image(server_id: int, epoch: int) -> dict:
    return {"server_id": server_id, "epoch": epoch, "hvc": None, "table": {}}
