"""The WPaxos node: per-object Paxos with object stealing.

A node is a deterministic state machine. Every input (client request,
message delivery, timer expiry) goes through :meth:`Node.step`, which returns a
:class:`StepOutput` listing messages to send, timers to arm, client replies and
trace records. The node never reads a clock; delays are relative.

Each object has its own ballot, slot counter and log. A node that needs an
object it does not own runs phase-1 over a q1 with a higher ballot (stealing);
owners commit with phase-2 over a q2 in their own (and nearby) zones.
"""
from __future__ import annotations

import random
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

from . import trace as T
from .core import (
    CONFIG,
    CONFIG_OBJECT,
    DEFAULT_POOL,
    GET,
    PUT,
    TXN,
    Ballot,
    Command,
    CommittedOverwrite,
    Forward,
    ForwardNack,
    Handover,
    LogEntry,
    M1a,
    M1b,
    M2a,
    M2b,
    M3,
    Nack,
    ObjectState,
    Proposal,
    Reply,
    ballot_next,
    enc_ballot,
    enc_command,
    enc_node,
    enc_proposal,
    leader_of,
    noop,
    zero_ballot,
)
from .quorum import (
    GRID,
    SINGLE_STEP_CHANGES,
    ClusterConfig,
    ConfigError,
    FlexibleQuorums,
    JointQuorums,
    MajorityQuorums,
    NodeId,
    QuorumSystem,
    apply_change,
    validate_config,
)

IMMEDIATE = "immediate"
ADAPTIVE = "adaptive"

LOCAL_Q2 = "local_q2"
WAN_Q2 = "wan_q2"
FORWARDED = "forwarded"


@dataclass
class MigrationPolicy:
    kind: str = IMMEDIATE
    window: int = 100
    handover_threshold: float = 0.55
    min_samples: int = 10

    def __post_init__(self):
        if self.kind not in (IMMEDIATE, ADAPTIVE):
            raise ValueError(f"unknown migration policy {self.kind!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.5 < self.handover_threshold <= 1:
            raise ValueError("handover_threshold must be in (0.5, 1]")


@dataclass
class NodeParams:
    policy: MigrationPolicy = field(default_factory=MigrationPolicy)
    replication: Optional[int] = None  # RQ2 zone count; None means F+1
    pool: int = DEFAULT_POOL
    p1_timeout: int = 1_000_000
    p2_timeout: int = 500_000
    forward_timeout: Optional[int] = None  # None means twice the widest round trip
    # None derives base = 2 x phase-1 round trip estimate and cap = 8 x base
    backoff_base: Optional[int] = None
    backoff_factor: int = 2
    backoff_cap: Optional[int] = None
    max_forward: int = 2
    p1_resends: int = 2
    max_txn_attempts: int = 30
    # wait this long before stealing back, for a txn, an object another node
    # just took; None means the backoff base, 0 disables
    txn_holddown: Optional[int] = None
    steal: bool = True
    suppress_handover_in_txn: bool = True


@dataclass
class StepOutput:
    sends: List[Tuple[NodeId, object]] = field(default_factory=list)
    timers: List[Tuple[int, str, object, int]] = field(default_factory=list)
    replies: List[Reply] = field(default_factory=list)
    records: List[list] = field(default_factory=list)

    def send(self, dst: NodeId, msg) -> None:
        self.sends.append((dst, msg))

    def send_all(self, dsts, msg) -> None:
        for d in dsts:
            self.sends.append((d, msg))


@dataclass
class TxnInstance:
    cmd: Command
    keys: Tuple[int, ...]
    state: str = "stealing"  # stealing | proposing | committed
    failures: int = 0


class Node:
    """A WPaxos replica."""

    def __init__(
        self,
        node_id: NodeId,
        cfg: ClusterConfig,
        params: Optional[NodeParams] = None,
        *,
        zone_order: Optional[Sequence[int]] = None,
        peers: Optional[Sequence[NodeId]] = None,
        seed: int = 0,
        initial_owner: Optional[Callable[[int], Optional[NodeId]]] = None,
        quorum: Optional[QuorumSystem] = None,
        p1_estimate: int = 100_000,
    ):
        self.id = node_id
        self.cfg = validate_config(cfg)
        self.params = params or NodeParams()
        self.zone_order = list(zone_order or self._default_zone_order())
        if self.zone_order[0] != node_id.zone:
            raise ValueError("zone_order must start with the node's own zone")
        self.peers = list(peers or cfg.nodes())
        self.quorum = quorum or FlexibleQuorums(cfg)
        self.rng = random.Random(seed)
        self.initial_owner = initial_owner
        self.backoff_base = self.params.backoff_base or 2 * p1_estimate
        self.backoff_cap = self.params.backoff_cap or 8 * self.backoff_base
        self.forward_timeout = self.params.forward_timeout or 2 * p1_estimate
        hd = self.params.txn_holddown
        self.txn_holddown = self.backoff_base if hd is None else hd

        self.objects: Dict[int, ObjectState] = {}
        self.pending: Dict[int, deque] = defaultdict(deque)
        self.campaign: Dict[int, Ballot] = {}
        self.p1_resends: Dict[int, int] = {}
        self.q1_tallies: Dict[int, Dict[NodeId, M1b]] = {}
        self.q2_tallies: Dict[Tuple[int, int], Set[NodeId]] = {}
        self.stats: Dict[int, deque] = {}
        self.last_sender: Dict[Tuple[int, int], NodeId] = {}
        self.fail_count: Dict[int, int] = defaultdict(int)
        # set after a phase timeout: later campaigns/proposals target every zone
        self.wide_p1 = False
        self.wide_p2 = False
        self.designated: Set[int] = set()
        self.timer_tokens: Dict[Tuple[str, object], int] = {}
        self._token = 0
        self.fwd: Dict[int, List] = {}
        self.fwd_to: Dict[int, NodeId] = {}
        # leaders a forward timed out on; cleared once we hear from them
        self.suspected: Set[NodeId] = set()
        self.txns: Dict[int, TxnInstance] = {}
        self.waiting_txn: Dict[int, List[int]] = defaultdict(list)
        self.kv: Dict[int, object] = {}
        self.results: Dict[int, Tuple] = {}
        self.stolen_cmds: Set[int] = set()
        self.wan_cmds: Set[int] = set()
        self.aborted: Set[Tuple[int, Tuple]] = set()
        self.pending_config: Optional[ClusterConfig] = None
        self._internal_ids = 0

    # -- helpers -------------------------------------------------------------

    def _default_zone_order(self) -> List[int]:
        z = self.id.zone
        return [z] + [x for x in self.cfg.zones if x != z]

    def log_key(self, o: int) -> int:
        """Log that orders commands on ``o`` (identity: one log per object)."""
        return o

    def obj(self, o: int) -> ObjectState:
        st = self.objects.get(o)
        if st is None:
            owner = self.initial_owner(o) if self.initial_owner else None
            if owner is None:
                st = ObjectState(ballot=zero_ballot(self.id))
            else:
                st = ObjectState(ballot=Ballot(1, owner), owned=(owner == self.id))
            self.objects[o] = st
        return st

    def owns(self, o: int) -> bool:
        return self.obj(o).owned

    @property
    def own(self) -> Set[int]:
        return {o for o, st in self.objects.items() if st.owned}

    def _rec(self, out: StepOutput, tag: int, *fields) -> None:
        out.records.append([tag, enc_node(self.id), *fields])

    def _arm(self, out: StepOutput, delay: int, kind: str, key) -> None:
        self._token += 1
        self.timer_tokens[(kind, key)] = self._token
        out.timers.append((max(0, int(delay)), kind, key, self._token))

    def _armed(self, kind: str, key) -> bool:
        return (kind, key) in self.timer_tokens

    def _zones_in_cfg(self) -> List[int]:
        zs = set(self.cfg.zones)
        if isinstance(self.quorum, JointQuorums):
            zs |= set(self.quorum.old.zones) | set(self.quorum.new.zones)
        return [z for z in self.zone_order if z in zs]

    def _nodes_in_zones(self, zones) -> List[NodeId]:
        zs = set(zones)
        return [p for p in self.peers if p.zone in zs]

    def select_rq2(self, o: int) -> List[int]:
        """Replication zones for phase-2 of ``o``: the R nearest, own zone first."""
        cfg = self.cfg
        r = self.params.replication
        if self.cfg.mode == GRID:
            r = r or 1
            lo = 1
        else:
            r = cfg.F + 1 if r is None else r
            lo = cfg.F + 1
        if not lo <= r <= cfg.Z:
            raise ConfigError(f"replication factor R={r} outside {lo}..{cfg.Z}")
        return self._zones_in_cfg()[:r]

    def q1_targets(self, o: int) -> List[NodeId]:
        if isinstance(self.quorum, MajorityQuorums):
            return sorted(self.quorum.members)
        if self.wide_p1 or isinstance(self.quorum, JointQuorums):
            return self._nodes_in_zones(self._zones_in_cfg())
        return self._nodes_in_zones(self._zones_in_cfg()[: self.cfg.q1_zones])

    def q2_targets(self, o: int, wide: bool = False) -> List[NodeId]:
        if isinstance(self.quorum, MajorityQuorums):
            return sorted(self.quorum.members)
        if wide or self.wide_p2 or isinstance(self.quorum, JointQuorums):
            return self._nodes_in_zones(self._zones_in_cfg())
        return self._nodes_in_zones(self.select_rq2(o))

    def _valid_object(self, o: int, kind: str) -> bool:
        if kind == CONFIG:
            return o == CONFIG_OBJECT
        return 0 <= o < self.params.pool

    # -- dispatch --------------------------------------------------------------

    def step(self, event) -> StepOutput:
        """Process one event: ``("request", cmd)``, ``("msg", msg)`` or
        ``("timer", kind, key, token)``."""
        kind = event[0]
        if kind == "request":
            return self.on_client_request(event[1])
        if kind == "msg":
            return self.on_message(event[1])
        if kind == "timer":
            return self.on_timer(event[1], event[2], event[3])
        raise ValueError(f"unknown event {event!r}")

    def on_message(self, m) -> StepOutput:
        out = StepOutput()
        handler = _HANDLERS.get(type(m))
        if handler is None:
            raise TypeError(f"unexpected message {m!r}")
        if self.suspected:
            self.suspected.discard(m.n)
        handler(self, m, out)
        return out

    # -- client requests ---------------------------------------------------

    def on_client_request(self, cmd: Command, out: Optional[StepOutput] = None) -> StepOutput:
        out = out if out is not None else StepOutput()
        bad = [o for o in cmd.objects if not self._valid_object(o, cmd.kind)]
        if bad:
            self._reply(out, cmd, False, ("unknown object", bad[0]), path=LOCAL_Q2)
            return out
        if cmd.kind == TXN:
            self.submit_txn(cmd, out)
            return out
        self._route(self.log_key(cmd.objects[0]), cmd, out)
        return out

    def _route(self, k: int, cmd: Command, out: StepOutput) -> None:
        """Decide how this node, as the request's entry point, handles ``cmd``."""
        st = self.obj(k)
        if st.owned:
            self._serve(k, cmd, out)
            return
        if not self.params.steal:
            leader = leader_of(st.ballot)
            if leader != self.id:
                self._forward(cmd, leader, out)
            else:
                self.pending[k].append(cmd)
            return
        if k in self.campaign or k in self.designated:
            self.pending[k].append(cmd)
            return
        leader = leader_of(st.ballot)
        # a same-zone leader is only bypassed when clients fail over, so take
        # the object instead of forwarding to it
        if (
            self.params.policy.kind == ADAPTIVE
            and cmd.entry == self.id
            and st.ballot.counter > 0
            and leader.zone != self.id.zone
            and leader not in self.suspected
            and self.fwd.get(cmd.id, [None, 0])[1] <= self.params.max_forward
        ):
            self._forward(cmd, leader, out)
            return
        self.pending[k].append(cmd)
        if not self._armed("retry", k):
            self.p1a(k, out)

    def _serve(self, k: int, cmd: Command, out: StepOutput) -> None:
        if self.params.policy.kind == ADAPTIVE:
            self._count_request(k, cmd)
        self.propose(k, cmd, out)
        if self.params.policy.kind == ADAPTIVE:
            self.adaptive_tick(k, out)

    def _forward(self, cmd: Command, leader: NodeId, out: StepOutput) -> None:
        entry = self.fwd.setdefault(cmd.id, [cmd, 0])
        entry[0] = cmd
        self.fwd_to[cmd.id] = leader
        out.send(leader, Forward(self.id, cmd, entry[1]))
        self._rec(out, T.FORWARD, cmd.id, enc_node(leader))
        self._arm(out, self.forward_timeout, "fwd", cmd.id)

    def _drop_fwd(self, cmd_id: int, default=None):
        self.fwd_to.pop(cmd_id, None)
        return self.fwd.pop(cmd_id, default)

    def _bounce(self, cmd: Command, k: int, out: StepOutput) -> None:
        """Return a request we cannot serve to its entry node."""
        if cmd.entry is None or cmd.entry == self.id:
            self._route(k, cmd, out)
        else:
            out.send(cmd.entry, ForwardNack(self.id, cmd, self.obj(k).ballot))

    # -- phase 1 -----------------------------------------------------------

    def p1a(self, o: int, out: StepOutput) -> None:
        st = self.obj(o)
        if st.owned or o in self.campaign:
            return
        b = ballot_next(st.ballot, self.id)
        st.ballot = b
        self.campaign[o] = b
        self.q1_tallies[o] = {}
        self.p1_resends[o] = 0
        self.timer_tokens.pop(("retry", o), None)
        out.send_all(self.q1_targets(o), M1a(self.id, o, b, st.exec_watermark))
        self._rec(out, T.P1A, o, enc_ballot(b))
        self._arm(out, self.params.p1_timeout, "p1", o)

    def on_1a(self, m: M1a, out: StepOutput) -> None:
        st = self.obj(m.o)
        if m.b >= st.ballot:
            self._observe(m.o, m.b, out)
            rec = tuple((s, e.b, e.v, e.c) for s, e in st.entries_above(m.w))
            out.send(m.n, M1b(self.id, m.o, m.b, st.slot, rec))
        else:
            out.send(m.n, Nack(self.id, m.o, st.ballot, 1))

    def on_1b(self, m: M1b, out: StepOutput) -> None:
        if self.campaign.get(m.o) != m.b:
            return
        tally = self.q1_tallies[m.o]
        tally[m.n] = m
        if self.quorum.q1(tally.keys()):
            self._acquire(m.o, out)

    def _acquire(self, o: int, out: StepOutput) -> None:
        st = self.obj(o)
        b = self.campaign.pop(o)
        tally = self.q1_tallies.pop(o)
        self.timer_tokens.pop(("p1", o), None)
        st.owned = True
        self.fail_count[o] = 0
        self.designated.discard(o)
        self._rec(out, T.OWN, o, enc_ballot(b))

        wm = st.exec_watermark
        best: Dict[int, Tuple[Ballot, Proposal, bool]] = {}
        max_s = st.slot

        def merge(s, eb, ev, ec):
            cur = best.get(s)
            if ec:
                if cur is not None and cur[2] and cur[1] != ev:
                    self._rec(out, T.VIOLATION, f"recovery saw two committed values at {o}:{s}")
                best[s] = (eb, ev, True)
            elif cur is None or (not cur[2] and eb > cur[0]):
                best[s] = (eb, ev, False)

        for m in tally.values():
            max_s = max(max_s, m.s)
            for s, eb, ev, ec in m.recovery:
                if s > wm:
                    merge(s, eb, ev, ec)
        for s, e in st.entries_above(wm):
            merge(s, e.b, e.v, e.c)

        rq2 = self.q2_targets(o)
        for s in range(wm + 1, max_s + 1):
            e = st.log.get(s)
            if e is not None and e.c:
                continue
            got = best.get(s)
            if got is not None and got[2]:
                st.log[s] = LogEntry(got[0], got[1], True)
                self._rec(out, T.COMMIT, o, s, enc_ballot(got[0]), enc_proposal(got[1]))
                continue
            v = got[1] if got is not None else Proposal(noop(o), ((o, s),))
            st.log[s] = LogEntry(b, v, False)
            self.q2_tallies[(o, s)] = set()
            out.send_all(rq2, M2a(self.id, v, ((o, b),)))
        st.slot = max_s
        if any(not st.log[s].c for s in range(wm + 1, max_s + 1)):
            self._arm_p2(o, out)
        self._execute(o, out)

        queued = list(self.pending.pop(o, ()))
        for cmd in queued:
            self.stolen_cmds.add(cmd.id)
            if self.obj(o).owned:
                self._serve(o, cmd, out)
            else:
                self.pending[o].append(cmd)
        for tid in self.waiting_txn.pop(o, []):
            t = self.txns.get(tid)
            if t is not None:
                self.stolen_cmds.add(tid)
                self._advance_txn(t, out)

    def _observe(self, o: int, b: Ballot, out: StepOutput) -> None:
        """Learn a ballot for ``o``; a higher one ends our ownership/campaign."""
        st = self.obj(o)
        if b <= st.ballot:
            return
        st.ballot = b
        if self.txn_holddown and leader_of(b) != self.id:
            # jittered so two nodes swapping objects do not stay in lockstep
            self._arm(out, self.rng.randint(self.txn_holddown // 2, self.txn_holddown * 3 // 2), "hold", o)
        if st.owned and leader_of(b) != self.id:
            self._lose(o, out)
        camp = self.campaign.get(o)
        if camp is not None and camp < b:
            self._campaign_failed(o, out)

    def _lose(self, o: int, out: StepOutput) -> None:
        st = self.obj(o)
        st.owned = False
        self._rec(out, T.LOSE, o, enc_ballot(st.ballot))
        self.timer_tokens.pop(("p2", o), None)
        requeue = []
        for s, e in st.entries_above(st.exec_watermark):
            self.q2_tallies.pop((o, s), None)
            if e.c or leader_of(e.b) != self.id or e.v.cmd.is_noop:
                continue
            cmd = e.v.cmd
            if cmd.kind == TXN:
                t = self.txns.get(cmd.id)
                if t is not None and t.state == "proposing":
                    t.state = "stealing"
                continue
            if cmd.kind == CONFIG or cmd.id in self.results:
                continue
            requeue.append(cmd)
        pend = requeue + list(self.pending.pop(o, ()))
        self._reroute(o, pend, out)
        for tid, t in list(self.txns.items()):
            if o in t.keys and t.state == "stealing" and tid not in self.waiting_txn[o]:
                self.waiting_txn[o].append(tid)
        if self.waiting_txn.get(o):
            self.fail_count[o] += 1
            self._schedule_retry(o, out)

    def _reroute(self, o: int, cmds, out: StepOutput) -> None:
        seen = set()
        mine = []
        for cmd in cmds:
            if cmd.id in seen:
                continue
            seen.add(cmd.id)
            if cmd.entry is not None and cmd.entry != self.id:
                out.send(cmd.entry, ForwardNack(self.id, cmd, self.obj(o).ballot))
            else:
                mine.append(cmd)
        if not mine:
            return
        if self.params.policy.kind == ADAPTIVE or not self.params.steal:
            for cmd in mine:
                self._route(o, cmd, out)
        else:
            self.pending[o].extend(mine)
            self.fail_count[o] += 1
            self._schedule_retry(o, out)

    def _campaign_failed(self, o: int, out: StepOutput) -> None:
        self.campaign.pop(o, None)
        self.q1_tallies.pop(o, None)
        self.timer_tokens.pop(("p1", o), None)
        self.fail_count[o] += 1
        for tid in list(self.waiting_txn.get(o, [])):
            t = self.txns.get(tid)
            if t is None:
                continue
            t.failures += 1
            if t.failures > self.params.max_txn_attempts:
                self._abort_txn(t, "steal starvation", out)
        if self.params.policy.kind == ADAPTIVE and o not in self.designated and not self.waiting_txn.get(o):
            # a failed steal usually means someone else leads now: forward instead
            pend = list(self.pending.pop(o, ()))
            self._reroute_after_failure(o, pend, out)
            return
        if self.pending.get(o) or self.waiting_txn.get(o) or o in self.designated:
            self._schedule_retry(o, out)

    def _reroute_after_failure(self, o, pend, out):
        st = self.obj(o)
        for cmd in pend:
            if cmd.entry is not None and cmd.entry != self.id:
                out.send(cmd.entry, ForwardNack(self.id, cmd, st.ballot))
            elif st.ballot.counter > 0 and leader_of(st.ballot) != self.id:
                self._forward(cmd, leader_of(st.ballot), out)
            else:
                self.pending[o].append(cmd)
        if self.pending.get(o):
            self._schedule_retry(o, out)

    def _schedule_retry(self, o: int, out: StepOutput) -> None:
        if self._armed("retry", o) or o in self.campaign or self.obj(o).owned:
            return
        k = max(1, self.fail_count[o])
        ceiling = min(self.backoff_cap, self.backoff_base * self.params.backoff_factor ** (k - 1))
        self._arm(out, self.rng.randint(0, max(0, int(ceiling))), "retry", o)

    # -- phase 2 -------------------------------------------------------------

    def propose(self, k: int, cmd: Command, out: StepOutput) -> int:
        st = self.obj(k)
        st.slot += 1
        s = st.slot
        p = Proposal(cmd, ((k, s),))
        st.log[s] = LogEntry(st.ballot, p)
        self.q2_tallies[(k, s)] = set()
        out.send_all(self.q2_targets(k), M2a(self.id, p, ((k, st.ballot),)))
        self._arm_p2(k, out)
        return s

    def _arm_p2(self, k: int, out: StepOutput) -> None:
        if not self._armed("p2", k):
            self._arm(out, self.params.p2_timeout, "p2", k)

    def on_2a(self, m: M2a, out: StepOutput) -> None:
        stale = [(o, b) for o, b in m.ballots if b < self.obj(o).ballot]
        if stale:
            for o, _ in stale:
                st = self.obj(o)
                out.send(m.n, Nack(self.id, o, st.ballot, 2, m.v.slot_of(o)))
            return
        for o, b in m.ballots:
            self._observe(o, b, out)
            st = self.obj(o)
            s = m.v.slot_of(o)
            e = st.log.get(s)
            if e is None:
                st.log[s] = LogEntry(b, m.v)
            else:
                try:
                    e.accept(b, m.v)
                except CommittedOverwrite as exc:
                    self._rec(out, T.VIOLATION, f"2a on committed {o}:{s}: {exc}")
            if s > st.slot:
                st.slot = s
        out.send(m.n, M2b(self.id, m.votes))

    def on_2b(self, m: M2b, out: StepOutput) -> None:
        prop = None
        for o, b, s in m.votes:
            st = self.obj(o)
            e = st.log.get(s)
            if not st.owned or st.ballot != b or e is None or e.b != b or e.c:
                return
            tally = self.q2_tallies.get((o, s))
            if tally is None:
                return
            tally.add(m.n)
            prop = e.v
        if prop is None:
            return
        if all(self.quorum.q2(self.q2_tallies[(o, s)]) for o, _, s in m.votes):
            self._commit(prop, m.votes, out)

    def _commit(self, p: Proposal, votes, out: StepOutput) -> None:
        zones = set()
        for o, b, s in votes:
            e = self.obj(o).log[s]
            e.c = True
            zones |= {n.zone for n in self.q2_tallies.pop((o, s), ())}
            self._rec(out, T.COMMIT, o, s, enc_ballot(b), enc_proposal(p))
        if len(zones) > 1:
            self.wan_cmds.add(p.cmd.id)
        t = self.txns.get(p.cmd.id)
        if t is not None and t.state == "proposing" and len(votes) == len(p.placement):
            t.state = "committed"
        out.send_all([n for n in self.peers if n != self.id], M3(self.id, p, tuple(votes)))
        for o, _, _ in votes:
            self._execute(o, out)

    def on_3(self, m: M3, out: StepOutput) -> None:
        touched = []
        for o, b, s in m.votes:
            self._observe(o, b, out)
            st = self.obj(o)
            if s > st.slot:
                st.slot = s
            e = st.log.get(s)
            if e is not None and e.c:
                if e.v != m.v:
                    self._rec(out, T.VIOLATION, f"conflicting commit at {o}:{s}")
                continue
            st.log[s] = LogEntry(b, m.v, True)
            self.q2_tallies.pop((o, s), None)
            self._rec(out, T.COMMIT, o, s, enc_ballot(b), enc_proposal(m.v))
            touched.append(o)
        for o in touched:
            self._execute(o, out)

    def on_nack(self, m: Nack, out: StepOutput) -> None:
        self._rec(out, T.NACK, m.o, enc_ballot(m.b), m.phase)
        self._observe(m.o, m.b, out)

    # -- forwarding / handover -------------------------------------------------

    def on_forward(self, m: Forward, out: StepOutput) -> None:
        cmd = m.cmd
        if cmd.kind == TXN:
            self.submit_txn(cmd, out)
            return
        k = self.log_key(cmd.objects[0])
        st = self.obj(k)
        if st.owned:
            self._serve(k, cmd, out)
        elif k in self.campaign:
            self.pending[k].append(cmd)
        else:
            out.send(m.n, ForwardNack(self.id, cmd, st.ballot))

    def on_forward_nack(self, m: ForwardNack, out: StepOutput) -> None:
        cmd = m.cmd
        entry = self.fwd.get(cmd.id)
        k = self.log_key(cmd.objects[0])
        self._observe(k, m.b, out)
        if entry is None:
            entry = self.fwd.setdefault(cmd.id, [cmd, 0])
        entry[1] += 1
        self.timer_tokens.pop(("fwd", cmd.id), None)
        if cmd.kind == TXN:
            self._drop_fwd(cmd.id, None)
            self.submit_txn(cmd, out)
            return
        st = self.obj(k)
        if st.owned:
            self._drop_fwd(cmd.id, None)
            self._serve(k, cmd, out)
            return
        if not self.params.steal:
            self._forward(cmd, leader_of(st.ballot), out)
            return
        leader = leader_of(st.ballot)
        if entry[1] <= self.params.max_forward and st.ballot.counter > 0 and leader != self.id:
            self._forward(cmd, leader, out)
        else:
            self._drop_fwd(cmd.id, None)
            self.pending[k].append(cmd)
            if not self._armed("retry", k):
                self.p1a(k, out)

    def on_handover(self, m: Handover, out: StepOutput) -> None:
        self._observe(m.o, m.b, out)
        st = self.obj(m.o)
        if st.owned or m.o in self.campaign or not self.params.steal:
            return
        self.designated.add(m.o)
        self.p1a(m.o, out)

    def on_reply(self, m: Reply, out: StepOutput) -> None:
        if self._drop_fwd(m.cmd_id, None) is not None:
            self.timer_tokens.pop(("fwd", m.cmd_id), None)
        out.replies.append(m)

    def _count_request(self, k: int, cmd: Command) -> None:
        win = self.stats.get(k)
        if win is None:
            win = self.stats[k] = deque(maxlen=self.params.policy.window)
        zone = cmd.origin[0] if cmd.origin[0] else (cmd.entry.zone if cmd.entry else self.id.zone)
        win.append(zone)
        if cmd.entry is not None:
            self.last_sender[(k, zone)] = cmd.entry

    def adaptive_tick(self, o: int, out: StepOutput) -> Optional[int]:
        """Majority-zone policy: hand ``o`` to a remote zone issuing most of
        its recent requests. Returns the chosen zone, if any."""
        pol = self.params.policy
        if pol.kind != ADAPTIVE or not self.obj(o).owned:
            return None
        if self.params.suppress_handover_in_txn and any(o in t.keys for t in self.txns.values()):
            return None
        win = self.stats.get(o)
        if not win or len(win) < min(pol.min_samples, pol.window):
            return None
        counts: Dict[int, int] = {}
        for z in win:
            counts[z] = counts.get(z, 0) + 1
        zone, top = max(sorted(counts.items()), key=lambda kv: kv[1])
        if zone == self.id.zone or top / len(win) <= pol.handover_threshold:
            return None
        target = self.last_sender.get((o, zone), NodeId(zone, 1))
        out.send(target, Handover(self.id, o, self.obj(o).ballot))
        self._rec(out, T.HANDOVER, o, enc_node(target))
        win.clear()
        return zone

    # -- transactions -----------------------------------------------------------

    def submit_txn(self, cmd: Command, out: StepOutput) -> None:
        keys = tuple(sorted({self.log_key(o) for o in cmd.objects}))
        if cmd.id in self.txns:
            return
        t = TxnInstance(cmd, keys)
        self.txns[cmd.id] = t
        self._advance_txn(t, out)

    def _advance_txn(self, t: TxnInstance, out: StepOutput) -> None:
        if t.state != "stealing":
            return
        for k in t.keys:  # ascending object order avoids deadlock
            st = self.obj(k)
            if st.owned:
                continue
            if not self.params.steal:
                if len(t.keys) == 1:
                    self.txns.pop(t.cmd.id, None)
                    self._forward(t.cmd, leader_of(st.ballot), out)
                else:
                    self.txns.pop(t.cmd.id, None)
                    self._reply(out, t.cmd, False, ("unsupported",), path=LOCAL_Q2)
                return
            if t.cmd.id not in self.waiting_txn[k]:
                self.waiting_txn[k].append(t.cmd.id)
            if k not in self.campaign and not self._armed("retry", k) and not self._armed("hold", k):
                self.p1a(k, out)
            return
        self._propose_txn(t, out)

    def _propose_txn(self, t: TxnInstance, out: StepOutput) -> None:
        placement = []
        for k in t.keys:
            st = self.obj(k)
            st.slot += 1
            placement.append((k, st.slot))
        p = Proposal(t.cmd, tuple(placement))
        ballots = []
        for k, s in placement:
            st = self.obj(k)
            st.log[s] = LogEntry(st.ballot, p)
            self.q2_tallies[(k, s)] = set()
            ballots.append((k, st.ballot))
            self._arm_p2(k, out)
        t.state = "proposing"
        out.send_all(self.q2_targets(t.keys[0]), M2a(self.id, p, tuple(ballots)))

    def _abort_txn(self, t: TxnInstance, reason: str, out: StepOutput) -> None:
        self.txns.pop(t.cmd.id, None)
        for k in t.keys:
            lst = self.waiting_txn.get(k)
            if lst and t.cmd.id in lst:
                lst.remove(t.cmd.id)
        self._rec(out, T.ABORT, t.cmd.id, reason)
        self._reply(out, t.cmd, False, ("abort", reason), path=LOCAL_Q2)

    def can_execute(self, p: Proposal) -> bool:
        """True iff every slot below each placement of ``p`` is executed."""
        return all(self.obj(o).exec_watermark >= s - 1 for o, s in p.placement)

    def _txn_status(self, p: Proposal) -> str:
        if (p.cmd.id, p.placement) in self.aborted:
            return "abort"
        ready = True
        for o, s in p.placement:
            st = self.obj(o)
            e = st.log.get(s)
            if e is not None and e.c and e.v != p:
                return "abort"
            if st.exec_watermark >= s:
                return "abort"
            if e is None or not e.c or st.exec_watermark != s - 1:
                ready = False
        return "ready" if ready else "wait"

    # -- execution -------------------------------------------------------------

    def _execute(self, o: int, out: StepOutput) -> None:
        work = [o]
        stuck: Set[int] = set()
        while work:
            k = work.pop()
            st = self.obj(k)
            while True:
                s = st.exec_watermark + 1
                e = st.log.get(s)
                if e is None or not e.c:
                    break
                p = e.v
                if not p.is_txn:
                    e.x = True
                    st.exec_watermark = s
                    self._apply(p, e, out)
                    continue
                status = self._txn_status(p)
                if status == "wait":
                    stuck.add(k)
                    break
                if status == "abort":
                    e.x = True
                    st.exec_watermark = s
                    self._rec(out, T.EXEC, k, s, p.cmd.id, 0)
                    continue
                for o2, s2 in p.placement:
                    st2 = self.obj(o2)
                    st2.exec_watermark = s2
                    st2.log[s2].x = True
                    stuck.discard(o2)
                    if o2 != k:
                        work.append(o2)
                self._apply(p, e, out)
            if not work and stuck and self._resolve_deadlock(stuck, out):
                work.extend(sorted(stuck))
                stuck.clear()

    def _resolve_deadlock(self, stuck: Set[int], out: StepOutput) -> bool:
        """Break a cycle of committed transactions waiting on each other.

        Only sink components whose every wait edge is known are resolved, so
        every replica aborts the same transaction (the highest command id).
        """
        heads: Dict[Tuple[int, Tuple], Proposal] = {}
        for k in stuck:
            st = self.obj(k)
            e = st.log.get(st.exec_watermark + 1)
            if e is not None and e.c and e.v.is_txn:
                heads[(e.v.cmd.id, e.v.placement)] = e.v
        edges: Dict[Tuple, Optional[Set[Tuple]]] = {}
        for key, p in heads.items():
            outs: Optional[Set[Tuple]] = set()
            for o2, s2 in p.placement:
                st2 = self.obj(o2)
                if st2.exec_watermark == s2 - 1:
                    e2 = st2.log.get(s2)
                    if e2 is None or not e2.c:
                        outs = None
                        break
                    continue
                h = st2.log.get(st2.exec_watermark + 1)
                if h is None or not h.c or not h.v.is_txn:
                    outs = None
                    break
                hk = (h.v.cmd.id, h.v.placement)
                if hk not in heads:
                    outs = None
                    break
                outs.add(hk)
            edges[key] = outs
        known = {k: v for k, v in edges.items() if v is not None}
        resolved = False
        for comp in _sccs(known):
            if len(comp) == 1:
                (only,) = comp
                if only not in known.get(only, ()):
                    continue
            if not all(known[k] <= comp for k in comp):
                continue
            victim = max(comp)
            self.aborted.add(victim)
            self._rec(out, T.ABORT, victim[0], "collation cycle")
            resolved = True
        return resolved

    def _apply(self, p: Proposal, e: LogEntry, out: StepOutput) -> None:
        cmd = p.cmd
        if cmd.is_noop:
            for o, s in p.placement:
                self._rec(out, T.EXEC, o, s, 0, 0)
            return
        effective = cmd.id not in self.results
        if effective:
            result = self._apply_kv(cmd, out)
            self.results[cmd.id] = result
        else:
            result = self.results[cmd.id]
        for o, s in p.placement:
            self._rec(out, T.EXEC, o, s, cmd.id, int(effective))
        if cmd.kind == CONFIG:
            if effective and self.pending_config is not None and leader_of(e.b) == self.id:
                self._propose_final_config(out)
            return
        t = self.txns.get(cmd.id)
        if t is not None:
            self.txns.pop(cmd.id, None)
        first_o, first_s = p.placement[0]
        committer = leader_of(self.obj(first_o).log[first_s].b)
        if committer == self.id:
            self._reply(out, cmd, True, result)

    def _apply_kv(self, cmd: Command, out: StepOutput):
        if cmd.kind == GET:
            return (self.kv.get(cmd.objects[0]),)
        if cmd.kind == PUT:
            self.kv[cmd.objects[0]] = cmd.payload[0]
            return ()
        if cmd.kind == TXN:
            reads = tuple(self.kv.get(o) if v is None else None for o, v in zip(cmd.objects, cmd.payload))
            for o, v in zip(cmd.objects, cmd.payload):
                if v is not None:
                    self.kv[o] = v
            return reads
        if cmd.kind == CONFIG:
            self._apply_config(cmd, out)
            return ()
        raise ValueError(cmd.kind)

    def _reply(self, out: StepOutput, cmd: Command, ok: bool, result, path: Optional[str] = None) -> None:
        if cmd.entry is None:
            return
        if path is None:
            if cmd.entry != self.id:
                path = FORWARDED
            elif cmd.id in self.wan_cmds:
                path = WAN_Q2
            else:
                path = LOCAL_Q2
        r = Reply(self.id, cmd.id, ok, tuple(result), path, cmd.id in self.stolen_cmds, tuple(cmd.origin))
        if cmd.entry == self.id:
            self.on_reply(r, out)
        else:
            out.send(cmd.entry, r)

    # -- timers -----------------------------------------------------------------

    def on_timer(self, kind: str, key, token: int) -> StepOutput:
        out = StepOutput()
        if self.timer_tokens.get((kind, key)) != token:
            return out
        del self.timer_tokens[(kind, key)]
        if kind == "p1":
            if key in self.campaign and not self.obj(key).owned:
                self.wide_p1 = True
                self.p1_resends[key] = self.p1_resends.get(key, 0) + 1
                if self.p1_resends[key] <= self.params.p1_resends:
                    # same ballot again to whoever has not answered (1a is idempotent)
                    b = self.campaign[key]
                    got = self.q1_tallies[key]
                    msg = M1a(self.id, key, b, self.obj(key).exec_watermark)
                    out.send_all([n for n in self.q1_targets(key) if n not in got], msg)
                    self._arm(out, self.params.p1_timeout, "p1", key)
                else:
                    self._campaign_failed(key, out)
        elif kind == "retry":
            st = self.obj(key)
            if not st.owned and key not in self.campaign:
                if self.pending.get(key) or key in self.designated:
                    self.p1a(key, out)
                elif self.waiting_txn.get(key) and not self._armed("hold", key):
                    self.p1a(key, out)
            elif st.owned and self.pending.get(key):
                for cmd in list(self.pending.pop(key)):
                    self._serve(key, cmd, out)
        elif kind == "hold":
            st = self.obj(key)
            if not st.owned and key not in self.campaign and not self._armed("retry", key):
                if self.waiting_txn.get(key):
                    self.p1a(key, out)
        elif kind == "p2":
            self._retransmit(key, out)
        elif kind == "fwd":
            target = self.fwd_to.get(key)
            self._forward_failed(key, out)
            if target is not None and self.params.steal and target not in self.suspected:
                self.suspected.add(target)
                for cid in [c for c, t in self.fwd_to.items() if t == target]:
                    self.timer_tokens.pop(("fwd", cid), None)
                    self._forward_failed(cid, out)
        else:
            raise ValueError(f"unknown timer kind {kind!r}")
        return out

    def _forward_failed(self, cid: int, out: StepOutput) -> None:
        entry = self._drop_fwd(cid)
        if entry is None:
            return
        cmd = entry[0]
        k = self.log_key(cmd.objects[0])
        if self.obj(k).owned:
            self._serve(k, cmd, out)
        elif not self.params.steal:
            self.fwd[cid] = entry
            self._forward(cmd, leader_of(self.obj(k).ballot), out)
        elif cmd.kind == TXN:
            self.submit_txn(cmd, out)
        else:
            self.pending[k].append(cmd)
            if not self._armed("retry", k):
                self.p1a(k, out)

    def _retransmit(self, k: int, out: StepOutput) -> None:
        st = self.obj(k)
        if not st.owned:
            return
        again = False
        sent = set()
        for s, e in st.entries_above(st.exec_watermark):
            if e.c or e.b != st.ballot:
                continue
            again = True
            p = e.v
            key = (p.cmd.id, p.placement)
            if key in sent:
                continue
            sent.add(key)
            if p.is_txn and all(self.obj(o).owned and self.obj(o).log.get(s2) is not None
                                and self.obj(o).log[s2].b == self.obj(o).ballot for o, s2 in p.placement):
                ballots = tuple((o, self.obj(o).ballot) for o, _ in p.placement)
            else:
                ballots = ((k, st.ballot),)
            out.send_all(self.q2_targets(k, wide=True), M2a(self.id, p, ballots))
        if again:
            self.wide_p2 = True
            self._arm_p2(k, out)

    # -- reconfiguration ---------------------------------------------------------

    def _internal_id(self) -> int:
        self._internal_ids += 1
        return -((self.id.zone * 1000 + self.id.index) * 1_000_000 + self._internal_ids)

    def reconfigure(self, change) -> StepOutput:
        """Start a configuration change through the config log.

        ``change`` is one of the single-step names (``add_zone``,
        ``remove_zone``, ``add_row``, ``remove_row``) or ``("joint", cfg)``.
        """
        out = StepOutput()
        if isinstance(change, str):
            if change not in SINGLE_STEP_CHANGES:
                raise ConfigError(f"unknown change {change!r}")
            new = apply_change(self.cfg, change)
            payload = ("set",) + _cfg_tuple(new)
        else:
            tag, new = change
            if tag != "joint":
                raise ConfigError(f"unknown change {change!r}")
            validate_config(new)
            payload = ("joint",) + _cfg_tuple(new)
        cmd = Command(self._internal_id(), (CONFIG_OBJECT,), CONFIG, payload, (self.id.zone, 0), self.id)
        self._rec(out, T.CONFIG, "propose", list(payload))
        self._route(CONFIG_OBJECT, cmd, out)
        return out

    def _apply_config(self, cmd: Command, out: StepOutput) -> None:
        tag = cmd.payload[0]
        new = _cfg_from_tuple(cmd.payload[1:])
        if tag == "set":
            self.cfg = new
            self.quorum = FlexibleQuorums(new)
            self.pending_config = None
        elif tag == "joint":
            self.quorum = JointQuorums(self.cfg, new)
            self.pending_config = new
        self._rec(out, T.CONFIG, tag, self.quorum.describe())

    def _propose_final_config(self, out: StepOutput) -> None:
        new = self.pending_config
        cmd = Command(self._internal_id(), (CONFIG_OBJECT,), CONFIG, ("set",) + _cfg_tuple(new),
                      (self.id.zone, 0), self.id)
        self._route(CONFIG_OBJECT, cmd, out)


def _cfg_tuple(c: ClusterConfig):
    return (c.Z, c.N, c.f, c.F, c.mode)


def _cfg_from_tuple(t) -> ClusterConfig:
    return ClusterConfig(Z=t[0], N=t[1], f=t[2], F=t[3], mode=t[4])


def _sccs(graph: Dict) -> List[Set]:
    """Tarjan's strongly connected components over ``graph`` (dict of sets).

    Iterative, since collation chains on a single busy log run thousands deep.
    """
    index: Dict = {}
    low: Dict = {}
    on_stack: Set = set()
    stack: List = []
    comps: List[Set] = []

    for root in sorted(graph):
        if root in index:
            continue
        index[root] = low[root] = len(index)
        stack.append(root)
        on_stack.add(root)
        work = [(root, iter(sorted(graph.get(root, ()))))]
        while work:
            v, it = work[-1]
            for w in it:
                if w not in graph:
                    continue
                if w not in index:
                    index[w] = low[w] = len(index)
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(graph.get(w, ())))))
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            else:
                work.pop()
                if work:
                    u = work[-1][0]
                    low[u] = min(low[u], low[v])
                if low[v] == index[v]:
                    comp = set()
                    while True:
                        w = stack.pop()
                        on_stack.discard(w)
                        comp.add(w)
                        if w == v:
                            break
                    comps.append(comp)
    return comps


_HANDLERS = {
    M1a: Node.on_1a,
    M1b: Node.on_1b,
    M2a: Node.on_2a,
    M2b: Node.on_2b,
    M3: Node.on_3,
    Nack: Node.on_nack,
    Forward: Node.on_forward,
    ForwardNack: Node.on_forward_nack,
    Handover: Node.on_handover,
    Reply: Node.on_reply,
}
