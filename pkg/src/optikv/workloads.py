"""The two applications, metrics, and the experiment driver.

* Graph workload: clients update vertex states of a shared graph and must
  not work on adjacent vertices at the same time.  Locks live in the store,
  so weak consistency can break mutual exclusion; one semilinear predicate
  per cross-client edge watches for it.
* Conjunctive workload: l boolean variables spread over the servers, random
  PUT/GET traffic, one linear predicate "all variables are 1".
"""

from __future__ import annotations

import asyncio
import csv
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

from optikv import wire
from optikv.client import ConsistencyConfig, GetFailed, PutFailed, sequential_counterpart
from optikv.cluster import Cluster, ClusterSettings, place
from optikv.monitor import write_violations_csv
from optikv.net import FaultRule, LinkDelay, SimNetwork, now_ms, run_simulation
from optikv.nodes import HEARTBEAT_MS, ClientNode, ServiceTimes, server_name
from optikv.predicates import Clause, PredicateSpec
from optikv.rollback import RollbackPolicy, write_rollback_csv
from optikv.store import RetryAfterRestore, Ring

log = logging.getLogger(__name__)

FREE = "FREE"

LATENCY_BUCKETS = [(0, 100, "<100"), (100, 1000, "100-1000"), (1000, 2000, "1000-2000"),
                   (2000, 14000, "2000-14000"), (14000, math.inf, ">=14000")]


def latency_histogram(latencies) -> dict[str, int]:
    hist = {label: 0 for _, _, label in LATENCY_BUCKETS}
    for x in latencies:
        for lo, hi, label in LATENCY_BUCKETS:
            if x < hi:
                hist[label] += 1
                break
    return hist


# -- workload descriptions -------------------------------------------------------------


def grid(rows: int, cols: int) -> dict[int, list[int]]:
    adj: dict[int, list[int]] = {}
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            adj[v] = [u for u in (v - cols if r else None, v + cols if r < rows - 1 else None,
                                  v - 1 if c else None, v + 1 if c < cols - 1 else None) if u is not None]
            adj[v].sort()
    return adj


def block_assignment(vertices, clients: list[str]) -> dict[int, str]:
    vs = sorted(vertices)
    per = math.ceil(len(vs) / len(clients))
    return {v: clients[i // per] for i, v in enumerate(vs)}


@dataclass
class GraphWorkload:
    adjacency: dict[int, list[int]]
    assignment: dict[int, str]
    iterations: int = 50
    busy_ms: float = 1.0
    backoff_ms: tuple[float, float] = (1.0, 5.0)

    def __post_init__(self) -> None:
        missing = set(self.adjacency) - set(self.assignment)
        if missing:
            raise ValueError(f"vertices without a client: {sorted(missing)}")
        for v, nbrs in self.adjacency.items():
            for u in nbrs:
                if v not in self.adjacency.get(u, ()):
                    raise ValueError(f"edge {v}-{u} is not symmetric")

    @classmethod
    def on_grid(cls, rows: int, cols: int, clients: list[str], **kw) -> GraphWorkload:
        adj = grid(rows, cols)
        return cls(adj, block_assignment(adj, clients), **kw)

    @property
    def clients(self) -> list[str]:
        return sorted(set(self.assignment.values()))

    def vertices_of(self, cid: str) -> list[int]:
        return sorted(v for v, c in self.assignment.items() if c == cid)

    def cross_edges(self) -> list[tuple[int, int]]:
        return sorted((v, u) for v, nbrs in self.adjacency.items() for u in nbrs
                      if v < u and self.assignment[v] != self.assignment[u])

    @staticmethod
    def lock_key(v: int) -> str:
        return f"lock:{v}"

    @staticmethod
    def flag_key(v: int) -> str:
        return f"flag:{v}"

    @staticmethod
    def state_key(v: int) -> str:
        return f"state:{v}"

    @staticmethod
    def predicate_id(u: int, v: int) -> str:
        return f"edge-{u}-{v}"

    def predicates(self) -> dict[str, PredicateSpec]:
        out = {}
        for u, v in self.cross_edges():
            terms = ((self.lock_key(u), self.assignment[u]), (self.lock_key(v), self.assignment[v]))
            out[self.predicate_id(u, v)] = PredicateSpec("semilinear", (Clause(0, terms),))
        return out

    def owners(self, n_servers: int, n_replicas: int) -> dict[str, int]:
        ring = Ring(range(n_servers))
        return {self.lock_key(v): place(self.lock_key(v), v % n_servers, ring, n_replicas) for v in self.adjacency}


@dataclass
class ConjunctiveWorkload:
    l: int = 10
    beta: float = 0.01
    put_ratio: float = 0.5
    duration_ms: int = 5000
    seed: int = 0
    clients: int = 0  # 0 means two per server

    def __post_init__(self) -> None:
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if not 0 < self.put_ratio <= 1:
            raise ValueError("put ratio must lie in (0, 1]")
        if self.l < 1:
            raise ValueError("need at least one local predicate")

    predicate_id = "conj"

    def variables(self) -> list[str]:
        return [f"p{i}" for i in range(self.l)]

    def predicates(self) -> dict[str, PredicateSpec]:
        return {self.predicate_id: PredicateSpec("linear", (Clause(0, tuple((v, "1") for v in self.variables())),))}

    def owners(self, n_servers: int, n_replicas: int) -> dict[str, int]:
        ring = Ring(range(n_servers))
        return {v: place(v, i % n_servers, ring, n_replicas) for i, v in enumerate(self.variables())}


# -- metrics ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    workload: str
    preset: str
    model: str
    monitored: bool
    seed: int
    duration_ms: float
    ops: int
    throughput: float
    throughput_series: list[float]
    violations: int
    latencies_ms: list[int]
    latency_histogram: dict[str, int]
    candidates_sent: int = 0
    completed: int = 0
    contention: int = 0
    skipped: int = 0
    fenced: int = 0
    failed_ops: int = 0
    episodes: int = 0
    detected_episodes: int = 0
    episode_latencies_ms: list[int] = field(default_factory=list)
    client_overlaps: int = 0
    rollbacks: int = 0
    advice: str = "stay"
    overhead_pct: Optional[float] = None

    @property
    def recall(self) -> float:
        return 1.0 if self.episodes == 0 else self.detected_episodes / self.episodes

    @property
    def max_latency_ms(self) -> int:
        return max(self.latencies_ms, default=0)

    def to_json(self) -> dict:
        d = asdict(self)
        d["recall"] = self.recall
        d["max_latency_ms"] = self.max_latency_ms
        return d


@dataclass
class RunArtifacts:
    """Everything a run leaves behind, for tests and the CLI writers."""

    report: MetricsReport
    cluster: Cluster
    histories: dict[str, list[tuple]]
    scan: dict[int, dict]
    violations: list
    op_times: list[float]
    net: SimNetwork | None = None


@dataclass
class SimOptions:
    seed: int = 0
    delay: LinkDelay = field(default_factory=lambda: LinkDelay(1.0, 5.0))
    service: ServiceTimes = field(default_factory=lambda: ServiceTimes(put_ms=0.2, get_ms=0.1, monitor_ms=0.05))
    heartbeat_ms: int = HEARTBEAT_MS
    epsilon: float = 0
    detect: Optional[bool] = None  # defaults to ``monitored``
    policy: Optional[RollbackPolicy] = None
    record: bool = False
    keep_log: bool = False
    faults: list[Callable[[Cluster], FaultRule]] = field(default_factory=list)
    observers: list[Callable[[Cluster], None]] = field(default_factory=list)  # run once the cluster is up
    time_limit_ms: float = 600_000
    apply_advice: bool = False


class _Stats:
    def __init__(self) -> None:
        self.op_times: list[float] = []
        self.completed = 0
        self.contention = 0
        self.skipped = 0
        self.fenced = 0
        self.failed_ops = 0
        self.cs: list[tuple[str, int, float, float]] = []  # (client, vertex, enter, leave)


class _Skip(Exception):
    pass


async def _op(stats: _Stats, call, *args):
    """One store operation, retried once on failure."""
    for attempt in (0, 1):
        try:
            result = await call(*args)
            stats.op_times.append(now_ms())
            return result
        except (PutFailed, GetFailed):
            stats.failed_ops += 1
            if attempt:
                raise _Skip() from None


async def _graph_client(node: ClientNode, gw: GraphWorkload, stats: _Stats, rng: random.Random) -> None:
    cid = node.client.client_id
    qc = node.client
    mine = gw.vertices_of(cid)
    if not mine:
        node.finish()
        return
    i = 0
    while True:
        i = await node.boundary(i)
        if i >= gw.iterations:
            break
        v = mine[i % len(mine)]
        rivals = [u for u in gw.adjacency[v] if gw.assignment[u] != cid]
        held = []
        try:
            await _op(stats, qc.put, gw.flag_key(v), cid)
            held.append(gw.flag_key(v))
            contended = False
            for u in rivals:
                value, _, _ = await _op(stats, qc.get, gw.flag_key(u))
                if value not in (None, FREE):
                    contended = True
                    break
            if contended:
                await _op(stats, qc.put, gw.flag_key(v), FREE)
                held.clear()
                stats.contention += 1
                await asyncio.sleep(rng.uniform(*gw.backoff_ms) / 1000.0)
                i += 1
                continue
            await _op(stats, qc.put, gw.lock_key(v), cid)
            held.append(gw.lock_key(v))
            enter = now_ms()
            total = 0
            for u in gw.adjacency[v]:
                value, _, _ = await _op(stats, qc.get, gw.state_key(u))
                total += int(value.split("/")[-1]) if value else 0
            await asyncio.sleep(gw.busy_ms / 1000.0)
            await _op(stats, qc.put, gw.state_key(v), f"{cid}/{i}/{total % 1000}")
            stats.cs.append((cid, v, enter, now_ms()))
            await _op(stats, qc.put, gw.lock_key(v), FREE)
            held.remove(gw.lock_key(v))
            await _op(stats, qc.put, gw.flag_key(v), FREE)
            held.clear()
            stats.completed += 1
        except _Skip:
            stats.skipped += 1
            for key in reversed(held):
                try:
                    await qc.put(key, FREE)
                except (PutFailed, GetFailed, RetryAfterRestore):
                    pass
        except RetryAfterRestore:
            stats.fenced += 1
            continue  # the restore decides where to resume
        i += 1
    node.finish()


async def _conj_client(node: ClientNode, cw: ConjunctiveWorkload, stats: _Stats, rng: random.Random,
                       deadline_ms: float) -> None:
    qc = node.client
    names = cw.variables()
    i = 0
    while True:
        i = await node.boundary(i)
        if now_ms() >= deadline_ms:
            break
        var = rng.choice(names)
        try:
            if rng.random() < cw.put_ratio:
                await _op(stats, qc.put, var, "1" if rng.random() < cw.beta else "0")
            else:
                await _op(stats, qc.get, var)
            stats.completed += 1
        except _Skip:
            stats.skipped += 1
        except RetryAfterRestore:
            stats.fenced += 1
            continue
        i += 1
    node.finish()


# -- ground truth ----------------------------------------------------------------------


def _value_intervals(timeline, want: str, end_ms: int) -> list[tuple[int, int, int, float]]:
    """(from ms, to ms, from event, to event) for each stretch where the key held ``want``."""
    out = []
    for k, (t, value, order) in enumerate(timeline):
        if value == want:
            if k + 1 < len(timeline):
                out.append((t, timeline[k + 1][0], order, timeline[k + 1][2]))
            else:
                out.append((t, end_ms, order, math.inf))
    return out


def mutex_episodes(cluster: Cluster, gw: GraphWorkload, end_ms: int) -> dict[str, list[tuple[int, int]]]:
    """Per edge predicate: windows during which the owner servers showed both locks held.

    Locks on one server overlap only if their stretches overlap in that
    server's event order; locks on two servers overlap if their millisecond
    stretches intersect (touching included, as the monitors see it).
    """
    out: dict[str, list[tuple[int, int]]] = {}
    for u, v in gw.cross_edges():
        ku, kv = gw.lock_key(u), gw.lock_key(v)
        su, sv = cluster.owners[ku], cluster.owners[kv]
        iu = _value_intervals(cluster.timelines.get((su, ku), []), gw.assignment[u], end_ms)
        iv = _value_intervals(cluster.timelines.get((sv, kv), []), gw.assignment[v], end_ms)
        eps = []
        for a0, a1, oa0, oa1 in iu:
            for b0, b1, ob0, ob1 in iv:
                lo, hi = max(a0, b0), min(a1, b1)
                if su == sv:
                    if max(oa0, ob0) < min(oa1, ob1):
                        eps.append((lo, hi))
                elif lo <= hi:
                    eps.append((lo, hi))
        if eps:
            out[gw.predicate_id(u, v)] = sorted(eps)
    return out


def client_overlaps(stats: _Stats, gw: GraphWorkload) -> int:
    cs = sorted(stats.cs, key=lambda x: x[2])
    count = 0
    for a in range(len(cs)):
        for b in range(a + 1, len(cs)):
            ca, va, sa, ea = cs[a]
            cb, vb, sb, eb = cs[b]
            if sb > ea:
                break
            if ca != cb and vb in gw.adjacency[va]:
                count += 1
    return count


def _match_episodes(episodes, violations) -> tuple[int, list[int]]:
    detected, lat = 0, []
    for pid, windows in episodes.items():
        vs = [v for v in violations if v.predicate_id == pid]
        for lo, hi in windows:
            hits = [v for v in vs
                    if max(c.start[c.start.owner] for c in v.cut) <= hi
                    and min(c.end[c.end.owner] for c in v.cut) >= lo]
            if hits:
                detected += 1
                lat.append(min(v.detected_at for v in hits) - lo)
    return detected, lat


# -- drivers ---------------------------------------------------------------------------


def _series(op_times: list[float], duration_ms: float) -> list[float]:
    buckets = [0.0] * max(1, math.ceil(duration_ms / 1000.0))
    for t in op_times:
        idx = min(int(t // 1000), len(buckets) - 1)
        buckets[idx] += 1
    return buckets


async def _run(cluster: Cluster, net, opts: SimOptions, clients: list[str], body) -> tuple[_Stats, float]:
    cluster.plan_clients(clients)
    await cluster.start()
    for make in opts.faults:
        net.add_fault(make(cluster))
    for observe in opts.observers:
        observe(cluster)
    if cluster.coordinator is not None and opts.apply_advice:
        upgrade = sequential_counterpart(cluster.config)

        def apply(advice):
            for node in cluster.clients.values():
                node.client.set_config(upgrade)
        cluster.coordinator.on_advice = apply
    stats = _Stats()
    start = now_ms()
    await asyncio.wait_for(body(stats), opts.time_limit_ms / 1000.0)
    end = now_ms()
    stats.op_times = [t - start for t in stats.op_times]
    # drain: close open intervals and let the last candidates reach the monitors
    cluster.flush_all()
    await asyncio.sleep((opts.delay.max_ms + 1) / 1000.0 + 0.05)
    await cluster.stop()
    return stats, end - start


def _finish(kind, cluster, net, cfg, monitored, seed, stats, duration, extra=None) -> RunArtifacts:
    vs = cluster.violations()
    lat = [v.latency_ms for v in vs]
    report = MetricsReport(
        workload=kind, preset=cfg.name, model=cfg.model, monitored=monitored, seed=seed,
        duration_ms=duration, ops=len(stats.op_times),
        throughput=len(stats.op_times) / (duration / 1000.0) if duration > 0 else 0.0,
        throughput_series=_series(stats.op_times, duration),
        violations=len(vs), latencies_ms=lat, latency_histogram=latency_histogram(lat),
        candidates_sent=sum(n.sent for n in cluster.servers),
        completed=stats.completed, contention=stats.contention, skipped=stats.skipped,
        fenced=stats.fenced, failed_ops=stats.failed_ops,
        rollbacks=len(cluster.coordinator.reports) if cluster.coordinator else 0,
        advice=cluster.coordinator.advice if cluster.coordinator else "stay",
    )
    for k, val in (extra or {}).items():
        setattr(report, k, val)
    histories = {cid: [(r.op, r.key, r.ok, r.value, r.epoch) for r in node.client.history]
                 for cid, node in sorted(cluster.clients.items())}
    return RunArtifacts(report, cluster, histories, cluster.scan(), vs, stats.op_times,
                        net if isinstance(net, SimNetwork) else None)


def adversarial_flag_delay(gw: GraphWorkload, delay_ms: float) -> Callable[[Cluster], FaultRule]:
    """Delay flag raises (not releases) to every replica except the vertex's home server.

    Rivals reading a lagging replica then see the flag down and proceed.
    """

    def make(cluster: Cluster) -> FaultRule:
        homes = {gw.flag_key(v): server_name(cluster.owners[gw.lock_key(v)]) for v in gw.adjacency}

        def match(src, dst, rec):
            if rec["type"] != "PUT":
                return False
            home = homes.get(rec["payload"].get("key"))
            if home is None or dst == home:
                return False
            return wire.unb64(rec["payload"]["value"]) != FREE.encode()

        return FaultRule(match, extra_ms=delay_ms, overtakable=True)

    return make


def run_graph(gw: GraphWorkload, preset: ConsistencyConfig, monitored: bool,
              opts: SimOptions | None = None, net=None) -> RunArtifacts:
    opts = opts or SimOptions()

    async def main():
        sim = net or SimNetwork(opts.seed, opts.delay, keep_log=opts.keep_log)
        owners = gw.owners(preset.n, preset.n)
        cluster = Cluster(sim, preset, gw.predicates(), owners, monitored, opts.detect, opts.policy,
                          ClusterSettings(opts.epsilon, opts.heartbeat_ms, opts.service, record=opts.record))

        async def body(stats):
            tasks = [_graph_client(cluster.clients[cid], gw, stats, random.Random(f"{opts.seed}:{cid}"))
                     for cid in gw.clients]
            await asyncio.gather(*tasks)

        stats, duration = await _run(cluster, sim, opts, gw.clients, body)
        end = math.floor(now_ms())
        episodes = mutex_episodes(cluster, gw, end)
        detected, ep_lat = _match_episodes(episodes, cluster.violations())
        extra = {"episodes": sum(len(w) for w in episodes.values()), "detected_episodes": detected,
                 "episode_latencies_ms": ep_lat, "client_overlaps": client_overlaps(stats, gw)}
        return _finish("graph", cluster, sim, preset, monitored, opts.seed, stats, duration, extra)

    return run_simulation(main()) if net is None else main()


def run_conjunctive(cw: ConjunctiveWorkload, preset: ConsistencyConfig, monitored: bool,
                    opts: SimOptions | None = None, net=None) -> RunArtifacts:
    opts = opts or SimOptions(seed=cw.seed)

    async def main():
        sim = net or SimNetwork(opts.seed, opts.delay, keep_log=opts.keep_log)
        owners = cw.owners(preset.n, preset.n)
        cluster = Cluster(sim, preset, cw.predicates(), owners, monitored, opts.detect, opts.policy,
                          ClusterSettings(opts.epsilon, opts.heartbeat_ms, opts.service, record=opts.record))
        clients = [f"c{i}" for i in range(cw.clients or 2 * preset.n)]

        async def body(stats):
            deadline = now_ms() + cw.duration_ms
            await asyncio.gather(*(
                _conj_client(cluster.clients[cid], cw, stats, random.Random(f"{cw.seed}:{cid}"), deadline)
                for cid in clients))

        stats, duration = await _run(cluster, sim, opts, clients, body)
        return _finish("conj", cluster, sim, preset, monitored, opts.seed, stats, duration)

    return run_simulation(main()) if net is None else main()


@dataclass
class Comparison:
    a: MetricsReport
    b: MetricsReport

    @property
    def ratio(self) -> float:
        return self.a.throughput / self.b.throughput if self.b.throughput else math.inf

    @property
    def delta_pct(self) -> float:
        return (self.ratio - 1.0) * 100.0

    def to_json(self) -> dict:
        return {"a": self.a.to_json(), "b": self.b.to_json(), "ratio": self.ratio, "delta_pct": self.delta_pct}


def _run_any(workload, preset, monitored, opts):
    if isinstance(workload, GraphWorkload):
        return run_graph(workload, preset, monitored, opts)
    return run_conjunctive(workload, preset, monitored, opts)


def compare_throughput(workload, preset_a: ConsistencyConfig, preset_b: ConsistencyConfig,
                       monitored_a: bool = True, monitored_b: bool = False,
                       opts: SimOptions | None = None) -> Comparison:
    """Paired runs with identical seeds; ratio is throughput(a) / throughput(b)."""
    ra = _run_any(workload, preset_a, monitored_a, opts).report
    rb = _run_any(workload, preset_b, monitored_b, opts).report
    return Comparison(ra, rb)


def monitor_overhead(workload, preset: ConsistencyConfig, opts: SimOptions | None = None) -> Comparison:
    """Unmonitored vs monitored at the same preset and seed; positive delta = cost of monitoring."""
    cmp = compare_throughput(workload, preset, preset, False, True, opts)
    cmp.b.overhead_pct = (cmp.a.throughput - cmp.b.throughput) / cmp.a.throughput * 100.0 if cmp.a.throughput else 0.0
    return cmp


# -- output files ----------------------------------------------------------------------


def write_outputs(out_dir, art: RunArtifacts, extra: dict | None = None) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "throughput.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["second", "ops_per_s"])
        for i, x in enumerate(art.report.throughput_series):
            w.writerow([i, x])
    with open(os.path.join(out_dir, "throughput.dat"), "w") as fh:
        fh.write("# second ops_per_s\n")
        for i, x in enumerate(art.report.throughput_series):
            fh.write(f"{i} {x}\n")
    write_violations_csv(os.path.join(out_dir, "violations.csv"), art.violations)
    if art.cluster.coordinator is not None:
        write_rollback_csv(os.path.join(out_dir, "rollback.csv"), art.cluster.coordinator.reports)
    report = art.report.to_json()
    report.update(extra or {})
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
