"""Deterministic discrete-event WAN simulator.

Time is integer microseconds. Events sit in a heap ordered by (time, seq), seq
being the enqueue counter, and every random choice comes from one seeded
generator, so a run is a pure function of its configuration and seed.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from . import trace as T
from .baselines import PartitionMap, central_zone, make_kpaxos_node, make_multipaxos_node
from .core import Command, Reply, enc_command, enc_node, encode_message
from .node import Node, NodeParams
from .quorum import ClusterConfig, NodeId, validate_config
from .workload import RequestGenerator, WorkloadSpec, issuing_zones, make_schedule

WPAXOS = "wpaxos"
KPAXOS = "kpaxos"
MULTIPAXOS = "multipaxos"
PROTOCOLS = (WPAXOS, KPAXOS, MULTIPAXOS)

# Approximate round-trip times (ms) between five public cloud regions.
# This is a fixed data preset for the simulator, not a measurement of any run.
AWS_5REGION_NAMES = ("VA", "CA", "OR", "JP", "EU")
AWS_5REGION_RTT_MS = (
    (0, 62, 70, 145, 75),
    (62, 0, 22, 105, 140),
    (70, 22, 0, 97, 125),
    (145, 105, 97, 0, 210),
    (75, 140, 125, 210, 0),
)
AWS_INTRA_ONE_WAY_US = 400


@dataclass(frozen=True)
class LatencyModel:
    base: Tuple[Tuple[int, ...], ...]  # one-way microseconds, zone i-1 -> zone j-1
    intra_zone: int = AWS_INTRA_ONE_WAY_US
    jitter: float = 0.0
    names: Tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.base)
        for i, row in enumerate(self.base):
            if len(row) != n:
                raise ValueError("latency matrix must be square")
            for j, v in enumerate(row):
                if v < 0 or v != self.base[j][i]:
                    raise ValueError("latency matrix must be symmetric and non-negative")
            if row[i] != self.intra_zone:
                raise ValueError("diagonal must equal intra_zone latency")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")

    @property
    def zones(self) -> int:
        return len(self.base)

    def one_way(self, za: int, zb: int) -> int:
        return self.base[za - 1][zb - 1]

    def rtt(self, za: int, zb: int) -> int:
        return 2 * self.one_way(za, zb)

    def zone_order(self, z: int, zones: Sequence[int]) -> List[int]:
        """``zones`` sorted by distance from ``z``, ``z`` first."""
        rest = sorted((x for x in zones if x != z), key=lambda x: (self.one_way(z, x), x))
        return [z] + rest

    def with_jitter(self, jitter: float) -> "LatencyModel":
        return replace(self, jitter=jitter)


def aws_5region(jitter: float = 0.0) -> LatencyModel:
    intra = AWS_INTRA_ONE_WAY_US
    base = tuple(
        tuple(intra if i == j else AWS_5REGION_RTT_MS[i][j] * 500 for j in range(5)) for i in range(5)
    )
    return LatencyModel(base, intra, jitter, AWS_5REGION_NAMES)


def uniform_latency(Z: int, wan: int = 50_000, intra: int = AWS_INTRA_ONE_WAY_US,
                    jitter: float = 0.0) -> LatencyModel:
    base = tuple(tuple(intra if i == j else wan for j in range(Z)) for i in range(Z))
    return LatencyModel(base, intra, jitter)


PRESETS = {"aws-5region": aws_5region}


def latency_preset(name: str, jitter: float = 0.0, zones: int = 5) -> LatencyModel:
    if name == "uniform":
        return uniform_latency(zones, jitter=jitter)
    try:
        return PRESETS[name](jitter)
    except KeyError:
        raise ValueError(f"unknown latency preset {name!r}") from None


def deliver_latency(model: LatencyModel, src: NodeId, dst: NodeId, rng: random.Random) -> int:
    if src == dst:
        return 0
    base = model.one_way(src.zone, dst.zone)
    if not model.jitter:
        return base
    return int(round(base * (1 + rng.uniform(-model.jitter, model.jitter))))


CRASH_NODE = "crash_node"
CRASH_ZONE = "crash_zone"
PARTITION = "partition"
DROP_PROB = "drop_prob"
DUPLICATE_PROB = "duplicate_prob"
HEAL = "heal"
RECONFIGURE = "reconfigure"
FAULT_KINDS = (CRASH_NODE, CRASH_ZONE, PARTITION, DROP_PROB, DUPLICATE_PROB, HEAL, RECONFIGURE)


@dataclass(frozen=True)
class FaultSpec:
    """``target`` depends on ``kind``: a (zone, index) pair, a zone, a pair of
    zone lists, a probability, or a change name for reconfiguration. ``scope``
    limits drops to inter-zone messages when set to ``"wan"``."""

    kind: str
    at: int
    target: object = None
    scope: str = "all"
    node: Tuple[int, int] = (1, 1)  # where a reconfiguration is issued

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.at < 0:
            raise ValueError("fault time must be >= 0")
        if self.scope not in ("all", "wan"):
            raise ValueError(f"unknown scope {self.scope!r}")


@dataclass
class SimConfig:
    cluster: ClusterConfig = field(default_factory=lambda: ClusterConfig(5, 3, 1, 0))
    protocol: str = WPAXOS
    params: NodeParams = field(default_factory=NodeParams)
    latency: LatencyModel = field(default_factory=aws_5region)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    faults: Tuple[FaultSpec, ...] = ()
    seed: int = 0
    drain: float = 5.0  # seconds after the workload stops
    client_timeout: int = 2_000_000
    client_node: int = 1  # index of the node clients contact first
    spare_zones: int = 0  # extra zones present for reconfiguration
    leader: Optional[Tuple[int, int]] = None  # MultiPaxos leader; default central zone
    trace_skip: Tuple[int, ...] = ()

    def __post_init__(self):
        validate_config(self.cluster)
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        total = self.cluster.Z + self.spare_zones
        if self.latency.zones < total:
            raise ValueError(f"latency matrix covers {self.latency.zones} zones, need {total}")
        if not 1 <= self.client_node <= self.cluster.N:
            raise ValueError("client_node outside the zone")


@dataclass
class LatencyRecord:
    cmd_id: int
    zone: int
    objects: Tuple[int, ...]
    submit: int
    reply: int
    path: str
    stolen: bool
    ok: bool
    kind: str

    @property
    def latency(self) -> int:
        return self.reply - self.submit


@dataclass
class _Client:
    zone: int
    idx: int
    target: int
    pending: Dict[int, list] = field(default_factory=dict)  # id -> [cmd, first, attempt, refusals]


@dataclass
class SimResult:
    config: SimConfig
    trace: T.TraceWriter
    records: List[LatencyRecord]
    nodes: Dict[NodeId, Node]
    tag_counts: Dict[int, int]
    submitted: int
    end_time: int
    unanswered: List[int]


class Simulator:
    def __init__(self, config: SimConfig, seed: Optional[int] = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.rng = random.Random(f"net:{self.seed}")
        self.trace = T.TraceWriter(config.trace_skip)
        self.tag_counts: Dict[int, int] = {}
        self.queue: list = []
        self.seq = 0
        self.now = 0
        self.crashed: set = set()
        self.partitions: List[Tuple[frozenset, frozenset]] = []
        self.drop_p = 0.0
        self.drop_scope = "all"
        self.dup_p = 0.0
        self.records: List[LatencyRecord] = []
        self.submitted = 0
        self.clients: Dict[Tuple[int, int], _Client] = {}
        self.nodes = self._build_nodes()
        self.gen = RequestGenerator(config.workload, config.cluster, self.seed)
        self.end_workload = int(config.workload.duration * 1_000_000)
        self.end_time = self.end_workload + int(config.drain * 1_000_000)

    # -- setup ---------------------------------------------------------------

    def _build_nodes(self) -> Dict[NodeId, Node]:
        c = self.config
        cfg = c.cluster
        lat = c.latency
        zones = list(range(1, cfg.Z + c.spare_zones + 1))
        peers = [NodeId(z, i) for z in zones for i in range(1, cfg.N + 1)]
        nodes = {}
        leader = None
        if c.protocol == MULTIPAXOS:
            if c.leader is not None:
                leader = NodeId(*c.leader)
            else:
                rows = [[lat.one_way(a, b) for b in range(1, cfg.Z + 1)] for a in range(1, cfg.Z + 1)]
                leader = NodeId(central_zone(rows), c.client_node)
        pmap = None
        if c.protocol == KPAXOS:
            w = c.workload
            means = w.means or tuple(w.mean(z, cfg.Z) for z in cfg.zones)
            pmap = PartitionMap.from_means(w.K, means)
        for n in peers:
            kw = dict(zone_order=lat.zone_order(n.zone, zones), peers=peers,
                      p1_estimate=max(lat.rtt(n.zone, z) for z in zones),
                      seed=f"node:{self.seed}:{n.zone}:{n.index}")
            if c.protocol == WPAXOS:
                nodes[n] = Node(n, cfg, c.params, **kw)
            elif c.protocol == KPAXOS:
                node = make_kpaxos_node(n, cfg, pmap, c.params, **kw)
                if c.client_node != 1:
                    node.initial_owner = lambda o, p=pmap: (
                        None if p.owner(o) is None else NodeId(p.zone_of(o), c.client_node))
                nodes[n] = node
            else:
                nodes[n] = make_multipaxos_node(n, cfg, leader, c.params, **kw)
        return nodes

    # -- plumbing --------------------------------------------------------------

    def _push(self, t: int, ev) -> None:
        self.seq += 1
        heapq.heappush(self.queue, (t, self.seq, ev))

    def _record(self, rec: list) -> None:
        self.tag_counts[rec[0]] = self.tag_counts.get(rec[0], 0) + 1
        self.trace.add(rec)

    def _blocked(self, a: NodeId, b: NodeId) -> bool:
        for left, right in self.partitions:
            if (a.zone in left and b.zone in right) or (a.zone in right and b.zone in left):
                return True
        return False

    def _send(self, src: NodeId, dst: NodeId, msg) -> None:
        if T.SEND in self.trace.skip:
            self.tag_counts[T.SEND] = self.tag_counts.get(T.SEND, 0) + 1
        else:
            self._record([T.SEND, self.now, enc_node(src), enc_node(dst), encode_message(msg)])
        if dst not in self.nodes:
            self._record([T.DROP, self.now, enc_node(src), enc_node(dst), "unknown"])
            return
        if self._blocked(src, dst):
            self._record([T.DROP, self.now, enc_node(src), enc_node(dst), "partition"])
            return
        if src != dst and self.drop_p and (self.drop_scope == "all" or src.zone != dst.zone):
            if self.rng.random() < self.drop_p:
                self._record([T.DROP, self.now, enc_node(src), enc_node(dst), "loss"])
                return
        lat = self.config.latency
        self._push(self.now + deliver_latency(lat, src, dst, self.rng), ("deliver", src, dst, msg))
        if self.dup_p and self.rng.random() < self.dup_p:
            self._push(self.now + deliver_latency(lat, src, dst, self.rng), ("deliver", src, dst, msg))

    def _apply_output(self, node: NodeId, out) -> None:
        for rec in out.records:
            self._record([rec[0], self.now] + rec[1:])
        for dst, msg in out.sends:
            self._send(node, dst, msg)
        for delay, kind, key, token in out.timers:
            self._push(self.now + delay, ("timer", node, kind, key, token))
        for r in out.replies:
            self._to_client(node, r)

    # -- clients ---------------------------------------------------------------

    def _client(self, zone: int, idx: int) -> _Client:
        c = self.clients.get((zone, idx))
        if c is None:
            c = self.clients[(zone, idx)] = _Client(zone, idx, self.config.client_node)
        return c

    def _invoke(self, client: _Client, cmd: Command) -> None:
        self.submitted += 1
        client.pending[cmd.id] = [cmd, self.now, 0, 0]
        self._record([T.INVOKE, self.now, client.zone, client.idx, enc_command(cmd)])
        self._submit(client, cmd)

    def _submit(self, client: _Client, cmd: Command) -> None:
        entry = NodeId(client.zone, client.target)
        cmd = cmd.with_entry(entry)
        self._push(self.now + self.config.latency.intra_zone, ("request", entry, cmd))
        slot = client.pending[cmd.id]
        slot[2] += 1
        self._push(self.now + self.config.client_timeout, ("client_timeout", client.zone, client.idx, cmd.id, slot[2]))

    def _to_client(self, node: NodeId, r: Reply) -> None:
        zone, idx = r.origin
        if zone == 0:
            return  # internal command
        self._push(self.now + self.config.latency.intra_zone, ("reply", zone, idx, r))

    def _on_reply(self, zone: int, idx: int, r: Reply) -> None:
        client = self._client(zone, idx)
        slot = client.pending.pop(r.cmd_id, None)
        if slot is None:
            return
        cmd, first = slot[0], slot[1]
        self._record([T.REPLY, self.now, zone, idx, r.cmd_id, int(r.ok), list(r.result), r.path, int(r.stolen)])
        self.records.append(LatencyRecord(r.cmd_id, zone, cmd.objects, first, self.now, r.path,
                                          r.stolen, r.ok, cmd.kind))
        if self.config.workload.clients and self.now < self.end_workload:
            self._invoke(client, self.gen.command(zone, idx, self.now / 1_000_000))

    def _on_client_timeout(self, zone: int, idx: int, cmd_id: int, attempt: int,
                           failover: bool = False) -> None:
        client = self._client(zone, idx)
        slot = client.pending.get(cmd_id)
        if slot is None or slot[2] != attempt:
            return
        if failover:
            client.target = client.target % self.config.cluster.N + 1
        self._record([T.RETRY, self.now, zone, idx, cmd_id, client.target])
        self._submit(client, slot[0])

    # -- faults ------------------------------------------------------------------

    def _fault(self, f: FaultSpec) -> None:
        self._record([T.FAULT, self.now, f.kind, _plain(f.target), f.scope])
        if f.kind == CRASH_NODE:
            self.crashed.add(NodeId(*f.target))
        elif f.kind == CRASH_ZONE:
            self.crashed |= {n for n in self.nodes if n.zone == f.target}
        elif f.kind == PARTITION:
            a, b = f.target
            self.partitions.append((frozenset(a), frozenset(b)))
        elif f.kind == DROP_PROB:
            self.drop_p = float(f.target)
            self.drop_scope = f.scope
        elif f.kind == DUPLICATE_PROB:
            self.dup_p = float(f.target)
        elif f.kind == HEAL:
            self.partitions.clear()
            self.drop_p = 0.0
            self.dup_p = 0.0
        elif f.kind == RECONFIGURE:
            n = NodeId(*f.node)
            if n in self.nodes and n not in self.crashed:
                change = f.target
                if isinstance(change, (list, tuple)) and change[0] == "joint":
                    change = ("joint", ClusterConfig(*change[1]))
                self._apply_output(n, self.nodes[n].reconfigure(change))

    # -- main loop -----------------------------------------------------------------

    def _seed_events(self) -> None:
        c = self.config
        w = c.workload
        self._record([T.META, 0, {"protocol": c.protocol, "seed": self.seed,
                                  "Z": c.cluster.Z, "N": c.cluster.N, "F": c.cluster.F,
                                  "mode": c.cluster.mode, "policy": c.params.policy.kind,
                                  "skip": sorted(self.trace.skip)}])
        for f in sorted(c.faults, key=lambda f: f.at):
            self._push(f.at, ("fault", f))
        if w.clients:
            for z in issuing_zones(w, c.cluster):
                for i in range(1, w.clients + 1):
                    self._push(0, ("start_client", z, i))
        else:
            for t, z, cmd in make_schedule(w, c.cluster, self.seed):
                self._push(t, ("invoke", z, cmd))

    def run(self) -> SimResult:
        self._seed_events()
        while self.queue:
            t, _, ev = heapq.heappop(self.queue)
            if t > self.end_time:
                break
            self.now = t
            kind = ev[0]
            if kind == "deliver":
                _, src, dst, msg = ev
                if dst in self.crashed or self._blocked(src, dst):
                    continue
                self._record([T.DELIVER, t, enc_node(src), enc_node(dst), encode_message(msg)])
                self._apply_output(dst, self.nodes[dst].step(("msg", msg)))
            elif kind == "timer":
                _, n, tk, key, token = ev
                if n in self.crashed:
                    continue
                out = self.nodes[n].step(("timer", tk, key, token))
                if out.sends or out.records or out.timers or out.replies:
                    self._record([T.TIMER, t, enc_node(n), tk, key])
                self._apply_output(n, out)
            elif kind == "request":
                _, n, cmd = ev
                if n in self.crashed:
                    # connection refused: the client learns after a local round trip
                    self._push(t + self.config.latency.intra_zone, ("refused", cmd))
                    continue
                self._apply_output(n, self.nodes[n].step(("request", cmd)))
            elif kind == "invoke":
                _, z, cmd = ev
                self._invoke(self._client(z, 0), cmd)
            elif kind == "start_client":
                _, z, i = ev
                if t < self.end_workload:
                    self._invoke(self._client(z, i), self.gen.command(z, i, t / 1_000_000))
            elif kind == "reply":
                self._on_reply(*ev[1:])
            elif kind == "client_timeout":
                self._on_client_timeout(*ev[1:])
            elif kind == "refused":
                cmd = ev[1]
                z, i = cmd.origin
                client = self._client(z, i)
                slot = client.pending.get(cmd.id)
                if slot is not None:
                    slot[3] += 1
                    if slot[3] % self.config.cluster.N:
                        self._on_client_timeout(z, i, cmd.id, slot[2], failover=True)
                    else:
                        # every node refused: move on, but wait for the timeout
                        client.target = client.target % self.config.cluster.N + 1
            elif kind == "fault":
                self._fault(ev[1])
            else:
                raise AssertionError(kind)
        unanswered = sorted(cid for c in self.clients.values() for cid in c.pending)
        return SimResult(self.config, self.trace, self.records, self.nodes, self.tag_counts,
                         self.submitted, self.now, unanswered)


def _plain(x):
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, ClusterConfig):
        return [x.Z, x.N, x.f, x.F, x.mode]
    return x


def run(config: SimConfig, seed: Optional[int] = None) -> SimResult:
    return Simulator(config, seed).run()
