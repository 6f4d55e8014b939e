"""Ballots, commands, per-object logs and the protocol message shapes.

Messages use a canonical wire form: a JSON array whose first element is an
integer type tag followed by the fields in declaration order. Nested values
(node ids, ballots, commands) are themselves flat arrays, so encoding is
stable across runs and platforms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

from .quorum import NodeId

MAX_COUNTER = 2**31 - 1
DEFAULT_POOL = 1000
CONFIG_OBJECT = -1

GET, PUT, TXN, CONFIG = "get", "put", "txn", "config"
KINDS = (GET, PUT, TXN, CONFIG)
_KIND_TAG = {k: i for i, k in enumerate(KINDS)}


class BallotOverflow(OverflowError):
    pass


class CommittedOverwrite(RuntimeError):
    """A write tried to change the ballot/value of a committed log entry."""


@dataclass(frozen=True, order=True)
class Ballot:
    counter: int
    leader: NodeId

    def __str__(self) -> str:
        return f"<{self.counter},{self.leader}>"


def zero_ballot(owner: NodeId) -> Ballot:
    return Ballot(0, owner)


def ballot_next(current: Ballot, self_id: NodeId) -> Ballot:
    if current.counter >= MAX_COUNTER:
        raise BallotOverflow(f"ballot counter exhausted at {current}")
    return Ballot(current.counter + 1, self_id)


def leader_of(b: Ballot) -> NodeId:
    return b.leader


@dataclass(frozen=True)
class Command:
    """A client request. ``payload`` holds one value per object: an int to
    write, or ``None`` to read (txn); puts carry one int, gets carry none."""

    id: int
    objects: Tuple[int, ...]
    kind: str
    payload: Tuple[Any, ...] = ()
    origin: Tuple[int, int] = (0, 0)
    # node the client handed the request to; replies are relayed through it
    entry: Optional[NodeId] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown command kind {self.kind!r}")
        if not self.objects:
            raise ValueError("command needs at least one object")
        if self.kind in (GET, PUT) and len(self.objects) != 1:
            raise ValueError(f"{self.kind} touches exactly one object")
        if self.kind == TXN:
            if any(b <= a for a, b in zip(self.objects, self.objects[1:])):
                raise ValueError("txn objects must be strictly increasing")
            if len(self.payload) != len(self.objects):
                raise ValueError("txn payload needs one entry per object")

    @property
    def is_noop(self) -> bool:
        return self.kind == PUT and self.payload == ()

    def with_entry(self, node: NodeId) -> "Command":
        return Command(self.id, self.objects, self.kind, self.payload, self.origin, node)


def noop(o: int) -> Command:
    return Command(0, (o,), PUT, ())


@dataclass(frozen=True)
class Proposal:
    """The value stored in a log slot: a command plus where it was placed.

    ``placement`` lists ``(object, slot)`` for every object of the command,
    sorted by object; single-object commands have one pair.
    """

    cmd: Command
    placement: Tuple[Tuple[int, int], ...]

    @property
    def is_txn(self) -> bool:
        return len(self.placement) > 1

    def slot_of(self, o: int) -> int:
        for obj, s in self.placement:
            if obj == o:
                return s
        raise KeyError(o)


@dataclass
class LogEntry:
    b: Ballot
    v: Proposal
    c: bool = False
    x: bool = False

    def accept(self, b: Ballot, v: Proposal) -> None:
        if self.c and v != self.v:
            raise CommittedOverwrite(f"slot committed with {self.v.cmd.id}, got {v.cmd.id}")
        if not self.c:
            self.b, self.v = b, v

    def commit(self, b: Ballot, v: Proposal) -> None:
        if self.c and v != self.v:
            raise CommittedOverwrite(f"slot committed with {self.v.cmd.id}, got {v.cmd.id}")
        if not self.c:
            self.b, self.v, self.c = b, v, True


@dataclass
class ObjectState:
    ballot: Ballot
    slot: int = 0
    owned: bool = False
    log: Dict[int, LogEntry] = field(default_factory=dict)
    exec_watermark: int = 0

    def entries_above(self, watermark: int) -> List[Tuple[int, LogEntry]]:
        return sorted((s, e) for s, e in self.log.items() if s > watermark)


# -- messages ----------------------------------------------------------------

Vote = Tuple[int, Ballot, int]  # (object, ballot, slot)


@dataclass(frozen=True)
class M1a:
    TAG = 1
    n: NodeId
    o: int
    b: Ballot
    w: int = 0  # sender's execution watermark; acceptors return entries above it


@dataclass(frozen=True)
class M1b:
    TAG = 2
    n: NodeId
    o: int
    b: Ballot
    s: int
    recovery: Tuple[Tuple[int, Ballot, Proposal, bool], ...] = ()


@dataclass(frozen=True)
class M2a:
    TAG = 3
    n: NodeId
    v: Proposal
    ballots: Tuple[Tuple[int, Ballot], ...]  # objects voted on by this message

    @property
    def votes(self) -> Tuple[Vote, ...]:
        return tuple((o, b, self.v.slot_of(o)) for o, b in self.ballots)


@dataclass(frozen=True)
class M2b:
    TAG = 4
    n: NodeId
    votes: Tuple[Vote, ...]


@dataclass(frozen=True)
class M3:
    TAG = 5
    n: NodeId
    v: Proposal
    votes: Tuple[Vote, ...]


@dataclass(frozen=True)
class Nack:
    """Rejection of a 1a/2a carrying the acceptor's higher ballot."""

    TAG = 6
    n: NodeId
    o: int
    b: Ballot
    phase: int
    s: int = 0


@dataclass(frozen=True)
class Forward:
    TAG = 7
    n: NodeId
    cmd: Command
    hops: int = 0


@dataclass(frozen=True)
class ForwardNack:
    TAG = 8
    n: NodeId
    cmd: Command
    b: Ballot


@dataclass(frozen=True)
class Handover:
    TAG = 9
    n: NodeId
    o: int
    b: Ballot


@dataclass(frozen=True)
class Reply:
    """Result for a client, relayed through the entry node."""

    TAG = 10
    n: NodeId
    cmd_id: int
    ok: bool
    result: Tuple[Any, ...] = ()
    path: str = ""
    stolen: bool = False
    origin: Tuple[int, int] = (0, 0)


MESSAGE_TYPES = (M1a, M1b, M2a, M2b, M3, Nack, Forward, ForwardNack, Handover, Reply)
_BY_TAG = {cls.TAG: cls for cls in MESSAGE_TYPES}


# -- canonical encoding --------------------------------------------------------

def enc_node(n: Optional[NodeId]):
    return None if n is None else [n.zone, n.index]


def dec_node(v) -> Optional[NodeId]:
    return None if v is None else NodeId(v[0], v[1])


def enc_ballot(b: Ballot):
    return [b.counter, b.leader.zone, b.leader.index]


def dec_ballot(v) -> Ballot:
    return Ballot(v[0], NodeId(v[1], v[2]))


def enc_command(c: Command):
    return [c.id, list(c.objects), _KIND_TAG[c.kind], list(c.payload), list(c.origin), enc_node(c.entry)]


def dec_command(v) -> Command:
    return Command(v[0], tuple(v[1]), KINDS[v[2]], tuple(v[3]), tuple(v[4]), dec_node(v[5]))


def enc_proposal(p: Proposal):
    return [enc_command(p.cmd), [list(x) for x in p.placement]]


def dec_proposal(v) -> Proposal:
    return Proposal(dec_command(v[0]), tuple((a, b) for a, b in v[1]))


def _enc_vote(vt: Vote):
    return [vt[0], enc_ballot(vt[1]), vt[2]]


def _dec_vote(v) -> Vote:
    return (v[0], dec_ballot(v[1]), v[2])


def encode_message(m) -> list:
    t = type(m)
    if t is M1a:
        return [1, enc_node(m.n), m.o, enc_ballot(m.b), m.w]
    if t is M1b:
        rec = [[s, enc_ballot(b), enc_proposal(p), int(c)] for s, b, p, c in m.recovery]
        return [2, enc_node(m.n), m.o, enc_ballot(m.b), m.s, rec]
    if t is M2a:
        return [3, enc_node(m.n), enc_proposal(m.v), [[o, enc_ballot(b)] for o, b in m.ballots]]
    if t is M2b:
        return [4, enc_node(m.n), [_enc_vote(v) for v in m.votes]]
    if t is M3:
        return [5, enc_node(m.n), enc_proposal(m.v), [_enc_vote(v) for v in m.votes]]
    if t is Nack:
        return [6, enc_node(m.n), m.o, enc_ballot(m.b), m.phase, m.s]
    if t is Forward:
        return [7, enc_node(m.n), enc_command(m.cmd), m.hops]
    if t is ForwardNack:
        return [8, enc_node(m.n), enc_command(m.cmd), enc_ballot(m.b)]
    if t is Handover:
        return [9, enc_node(m.n), m.o, enc_ballot(m.b)]
    if t is Reply:
        return [10, enc_node(m.n), m.cmd_id, int(m.ok), list(m.result), m.path, int(m.stolen), list(m.origin)]
    raise TypeError(f"not a protocol message: {m!r}")


def decode_message(v: list):
    tag = v[0]
    if tag == 1:
        return M1a(dec_node(v[1]), v[2], dec_ballot(v[3]), v[4])
    if tag == 2:
        rec = tuple((s, dec_ballot(b), dec_proposal(p), bool(c)) for s, b, p, c in v[5])
        return M1b(dec_node(v[1]), v[2], dec_ballot(v[3]), v[4], rec)
    if tag == 3:
        return M2a(dec_node(v[1]), dec_proposal(v[2]), tuple((o, dec_ballot(b)) for o, b in v[3]))
    if tag == 4:
        return M2b(dec_node(v[1]), tuple(_dec_vote(x) for x in v[2]))
    if tag == 5:
        return M3(dec_node(v[1]), dec_proposal(v[2]), tuple(_dec_vote(x) for x in v[3]))
    if tag == 6:
        return Nack(dec_node(v[1]), v[2], dec_ballot(v[3]), v[4], v[5])
    if tag == 7:
        return Forward(dec_node(v[1]), dec_command(v[2]), v[3])
    if tag == 8:
        return ForwardNack(dec_node(v[1]), dec_command(v[2]), dec_ballot(v[3]))
    if tag == 9:
        return Handover(dec_node(v[1]), v[2], dec_ballot(v[3]))
    if tag == 10:
        return Reply(dec_node(v[1]), v[2], bool(v[3]), tuple(v[4]), v[5], bool(v[6]), tuple(v[7]))
    raise ValueError(f"unknown message tag {tag}")


def dumps(obj) -> bytes:
    """Canonical compact JSON bytes."""
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True).encode()


def message_bytes(m) -> bytes:
    return dumps(encode_message(m))


def message_fields(m) -> List[str]:
    return [f.name for f in fields(m)]
