"""Command line entry point: ``optikv server|client|monitor|coordinator|run``."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import socket
import sys
from typing import Optional

from optikv import predicates as preds
from optikv.client import ConsistencyConfig, QuorumClient, preset
from optikv.detector import LocalDetector
from optikv.hvc import INFINITY, Hvc
from optikv.monitor import Monitor
from optikv.net import TcpNetwork
from optikv.nodes import (
    COORDINATOR, ClientNode, MonitorNode, ServerNode, client_name, monitor_name, server_name, wall_clock,
)
from optikv.oracle import CandidateLog
from optikv.rollback import Coordinator, RollbackPolicy, write_rollback_csv
from optikv.store import Server, StoreMetadata
from optikv.workloads import (
    ConjunctiveWorkload, GraphWorkload, SimOptions, adversarial_flag_delay, run_conjunctive, run_graph,
    write_outputs,
)

log = logging.getLogger("optikv")


def parse_epsilon(text: str) -> float:
    if text.lower() in ("inf", "infinity"):
        return INFINITY
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("epsilon must be non-negative")
    return value


def parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# -- deployment config ------------------------------------------------------------------


class Deployment:
    """The JSON deployment file shared by every process of a real cluster::

        {"servers": [{"id": 0, "address": "127.0.0.1:7000"}, ...],
         "N": 3, "R": 1, "W": 1, "timeout": 500,
         "predicates": [{"id": "p", "file": "p.xml", "monitor-address": "127.0.0.1:7100"}],
         "variable-owners": {"x": 0},
         "coordinator-address": "127.0.0.1:7200",
         "clients": {"c0": "127.0.0.1:7300"},
         "epsilon": 0}
    """

    def __init__(self, obj: dict, base_dir: str = "."):
        self.raw = obj
        self.metadata = StoreMetadata.from_json(obj)
        ids = self.metadata.server_ids
        if ids != list(range(len(ids))):
            raise ValueError("server ids must be 0..n-1 in order")
        self.owners = {k: int(v) for k, v in obj.get("variable-owners", {}).items()}
        self.predicates: dict[str, preds.PredicateSpec] = {}
        self.monitor_addresses: dict[str, str] = {}
        for i, entry in enumerate(obj.get("predicates", [])):
            pid = str(entry.get("id", f"p{i}"))
            path = entry["file"] if os.path.isabs(entry["file"]) else os.path.join(base_dir, entry["file"])
            self.predicates[pid] = preds.load(path)
            self.monitor_addresses[pid] = entry["monitor-address"]
        self.coordinator_address = obj.get("coordinator-address")
        self.clients: dict[str, str] = dict(obj.get("clients", {}))
        self.epsilon = parse_epsilon(str(obj.get("epsilon", "inf")))

    @classmethod
    def load(cls, path: str) -> Deployment:
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh), os.path.dirname(os.path.abspath(path)))

    def addresses(self) -> dict[str, str]:
        out = {server_name(sid): addr for sid, addr in self.metadata.servers}
        out.update({monitor_name(pid): addr for pid, addr in self.monitor_addresses.items()})
        out.update({client_name(cid): addr for cid, addr in self.clients.items()})
        if self.coordinator_address:
            out[COORDINATOR] = self.coordinator_address
        return out


async def _forever() -> None:
    await asyncio.Event().wait()


# -- subcommands --------------------------------------------------------------------------


def cmd_server(args) -> int:
    dep = Deployment.load(args.config)
    eps = dep.epsilon if args.epsilon is None else args.epsilon

    async def main():
        net = TcpNetwork(dep.addresses())
        server = Server(args.id, dep.metadata, wall_clock, eps)
        detector = None
        if dep.predicates:
            clock0 = Hvc.zero(args.id, len(dep.metadata.servers), eps)
            detector = LocalDetector(args.id, dep.predicates, dep.owners, clock0)
        routes = {pid: monitor_name(pid) for pid in dep.predicates}
        node = ServerNode(server, net, detector=detector, routes=routes, heartbeat_ms=args.heartbeat_ms)
        await node.start()
        log.info("server %s listening on %s", args.id, dep.metadata.address(args.id))
        await _forever()

    asyncio.run(main())
    return 0


def cmd_client(args) -> int:
    dep = Deployment.load(args.config)
    cfg = preset(args.preset)
    with open(args.workload, encoding="utf-8") as fh:
        ops = json.load(fh)

    async def main():
        addrs = dep.addresses()
        net = TcpNetwork(addrs)
        qc = QuorumClient(args.id, dep.metadata, net, cfg)
        if client_name(args.id) in addrs:
            await ClientNode(qc, net).start()
        for op in ops:
            try:
                if op["op"] == "put":
                    rec = await qc.put(op["key"], op["value"])
                    print(json.dumps({"op": "put", "key": op["key"], "ok": rec.ok, "acks": rec.acks}))
                elif op["op"] == "get":
                    value, ctx, rec = await qc.get(op["key"])
                    print(json.dumps({"op": "get", "key": op["key"], "value": value, "context": ctx.as_dict()}))
                else:
                    raise ValueError(f"unknown op {op['op']!r}")
            except Exception as exc:  # report and continue with the next op
                print(json.dumps({"op": op.get("op"), "key": op.get("key"), "error": f"{type(exc).__name__}: {exc}"}))
        await net.close()

    asyncio.run(main())
    return 0


def cmd_monitor(args) -> int:
    spec = preds.load(args.predicate)
    owners = {}
    coordinator = None
    addrs: dict[str, str] = {}
    if args.config:
        dep = Deployment.load(args.config)
        owners = dep.owners
        addrs = dep.addresses()
        if dep.coordinator_address:
            coordinator = COORDINATOR
    if args.owners:
        owners.update({k: int(v) for k, v in json.loads(args.owners).items()})
    pid = args.id or os.path.splitext(os.path.basename(args.predicate))[0]
    addrs[monitor_name(pid)] = args.listen

    async def main():
        net = TcpNetwork(addrs)
        mon = Monitor(pid, spec, owners, args.epsilon, wall_clock)
        node = MonitorNode(mon, net, coordinator=coordinator)
        if args.log:
            node.on_violation.append(lambda v: _append_violation(args.log, v))
        await node.start()
        log.info("monitor %s listening on %s", pid, args.listen)
        await _forever()

    asyncio.run(main())
    return 0


def _append_violation(path: str, v) -> None:
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write("predicate,clause,t_violate,detected_at,latency_ms\n")
        fh.write(f"{v.predicate_id},{v.clause_id},{v.t_violate},{v.detected_at},{v.latency_ms}\n")


def cmd_coordinator(args) -> int:
    dep = Deployment.load(args.config)
    policy = RollbackPolicy.parse(args.policy, args.threshold)
    addrs = dep.addresses()
    if args.listen:
        addrs[COORDINATOR] = args.listen

    async def main():
        net = TcpNetwork(addrs)
        coord = Coordinator(net, dep.metadata.server_ids, list(dep.clients), policy, clock_ms=wall_clock)
        await coord.start()
        try:
            await _forever()
        finally:
            if args.log:
                write_rollback_csv(args.log, coord.reports)

    asyncio.run(main())
    return 0


def _free_ports(count: int) -> list[int]:
    socks, ports = [], []
    for _ in range(count):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports


def build_workload(args, cfg: ConsistencyConfig):
    if args.workload == "graph":
        clients = [f"c{i}" for i in range(args.clients or 2 * cfg.n)]
        return GraphWorkload.on_grid(args.rows, args.cols, clients, iterations=args.iterations,
                                     busy_ms=args.busy_ms)
    return ConjunctiveWorkload(l=args.l, beta=args.beta, put_ratio=args.put_ratio,
                               duration_ms=args.duration_ms, seed=args.seed, clients=args.clients)


def cmd_run(args) -> int:
    cfg = preset(args.preset, args.timeout_ms)
    wl = build_workload(args, cfg)
    policy = RollbackPolicy.parse(args.policy, args.threshold) if args.policy else None
    opts = SimOptions(seed=args.seed, heartbeat_ms=args.heartbeat_ms, epsilon=args.epsilon, policy=policy,
                      record=bool(args.record), apply_advice=args.apply_advice)
    if args.adversarial_delay_ms and isinstance(wl, GraphWorkload):
        if args.mode != "sim":
            print("adversarial delays need --mode sim", file=sys.stderr)
            return 2
        opts.faults.append(adversarial_flag_delay(wl, args.adversarial_delay_ms))
    runner = run_graph if isinstance(wl, GraphWorkload) else run_conjunctive

    if args.mode == "sim":
        art = runner(wl, cfg, args.monitored, opts)
    else:
        names = [server_name(i) for i in range(cfg.n)]
        names += [monitor_name(pid) for pid in wl.predicates()]
        clients = wl.clients if isinstance(wl, GraphWorkload) else [f"c{i}" for i in range(wl.clients or 2 * cfg.n)]
        names += [client_name(c) for c in clients] + [COORDINATOR]
        addrs = {n: f"127.0.0.1:{p}" for n, p in zip(names, _free_ports(len(names)))}

        async def main():
            net = TcpNetwork(addrs)
            try:
                return await runner(wl, cfg, args.monitored, opts, net=net)
            finally:
                await net.close()

        art = asyncio.run(main())
    write_outputs(args.out, art, {"mode": args.mode})
    if args.record:
        os.makedirs(args.record, exist_ok=True)
        CandidateLog(art.cluster.recorded_candidates(), args.epsilon).save(os.path.join(args.record, "candidates.jsonl"))
    r = art.report
    print(json.dumps({"preset": r.preset, "model": r.model, "monitored": r.monitored, "ops": r.ops,
                      "throughput": round(r.throughput, 2), "violations": r.violations,
                      "episodes": r.episodes, "recall": r.recall, "out": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="optikv", description="Quorum key-value store with runtime predicate monitoring")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("server", help="run one store server")
    s.add_argument("--id", type=int, required=True)
    s.add_argument("--config", required=True, help="deployment JSON")
    s.add_argument("--epsilon", type=parse_epsilon, default=None)
    s.add_argument("--heartbeat-ms", type=int, default=200)
    s.set_defaults(func=cmd_server)

    c = sub.add_parser("client", help="run a scripted list of operations")
    c.add_argument("--preset", required=True)
    c.add_argument("--workload", required=True, help='JSON list of {"op": "put"|"get", "key": ..., "value": ...}')
    c.add_argument("--config", required=True)
    c.add_argument("--id", default="cli")
    c.set_defaults(func=cmd_client)

    m = sub.add_parser("monitor", help="run one predicate monitor")
    m.add_argument("--predicate", required=True, help="predicate XML file")
    m.add_argument("--listen", required=True, help="HOST:PORT")
    m.add_argument("--epsilon", type=parse_epsilon, default=INFINITY)
    m.add_argument("--config", help="deployment JSON (ownership, coordinator)")
    m.add_argument("--owners", help='inline JSON variable->server map')
    m.add_argument("--id", help="predicate id (default: file stem)")
    m.add_argument("--log", help="append violations to this CSV")
    m.set_defaults(func=cmd_monitor)

    k = sub.add_parser("coordinator", help="run the rollback coordinator")
    k.add_argument("--policy", default="restart", help="restart | periodic:MS")
    k.add_argument("--threshold", default="10/min")
    k.add_argument("--config", required=True)
    k.add_argument("--listen")
    k.add_argument("--log", help="rollback CSV written on exit")
    k.set_defaults(func=cmd_coordinator)

    r = sub.add_parser("run", help="run an experiment end to end")
    r.add_argument("--mode", choices=["sim", "tcp"], default="sim")
    r.add_argument("--workload", choices=["graph", "conj"], default="conj")
    r.add_argument("--preset", default="N3R1W1")
    r.add_argument("--monitored", type=parse_bool, default=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="out")
    r.add_argument("--epsilon", type=parse_epsilon, default=0)
    r.add_argument("--heartbeat-ms", type=int, default=200)
    r.add_argument("--timeout-ms", type=int, default=None)
    r.add_argument("--clients", type=int, default=0, help="default: two per server")
    r.add_argument("--rows", type=int, default=4)
    r.add_argument("--cols", type=int, default=4)
    r.add_argument("--iterations", type=int, default=50)
    r.add_argument("--busy-ms", type=float, default=1.0)
    r.add_argument("--l", type=int, default=10)
    r.add_argument("--beta", type=float, default=0.01)
    r.add_argument("--put-ratio", type=float, default=0.5)
    r.add_argument("--duration-ms", type=int, default=5000)
    r.add_argument("--policy", help="restart | periodic:MS (enables the coordinator)")
    r.add_argument("--threshold", default="10/min")
    r.add_argument("--apply-advice", action="store_true", help="switch clients to W=N when advised")
    r.add_argument("--adversarial-delay-ms", type=float, default=0.0)
    r.add_argument("--record", help="directory for the recorded candidate log")
    r.set_defaults(func=cmd_run)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
