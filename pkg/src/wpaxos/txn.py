"""Multi-object commands: collation of per-object logs and history checks.

The node side (ordered stealing, combined accept, execution rule) lives in
:mod:`wpaxos.node`; this module holds the pieces that reason about committed
histories from the outside.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .node import TxnInstance, _sccs  # noqa: F401  (re-exported)

Placement = Tuple[Tuple[int, int], ...]


def can_execute(watermarks: Mapping[int, int], placement: Placement) -> bool:
    """True iff every slot below each placement has been executed."""
    return all(watermarks.get(o, 0) >= s - 1 for o, s in placement)


@dataclass
class CollationGraph:
    """Commands as vertices; an edge a -> b when both use some object and a
    sits in a lower slot of it."""

    placements: Dict[int, Placement] = field(default_factory=dict)

    def add(self, cmd_id: int, placement: Placement) -> None:
        self.placements[cmd_id] = tuple(placement)

    def edges(self) -> Set[Tuple[int, int]]:
        by_obj: Dict[int, List[Tuple[int, int]]] = {}
        for cid, pl in self.placements.items():
            for o, s in pl:
                by_obj.setdefault(o, []).append((s, cid))
        out = set()
        for seq in by_obj.values():
            seq.sort()
            for (s1, a), (s2, b) in zip(seq, seq[1:]):
                if a != b:
                    out.add((a, b))
        return out

    def adjacency(self) -> Dict[int, Set[int]]:
        adj: Dict[int, Set[int]] = {c: set() for c in self.placements}
        for a, b in self.edges():
            adj[a].add(b)
        return adj

    def find_cycle(self) -> Optional[List[int]]:
        adj = self.adjacency()
        for comp in _sccs(adj):
            if len(comp) > 1:
                return sorted(comp)
            (v,) = comp
            if v in adj[v]:
                return [v]
        return None

    def is_acyclic(self) -> bool:
        return self.find_cycle() is None

    def topological_order(self, priority: Optional[Mapping[int, object]] = None) -> List[int]:
        """Kahn's algorithm; among ready commands the smallest
        ``(priority, id)`` goes first."""
        adj = self.adjacency()
        key = (lambda v: (priority[v], v)) if priority else (lambda v: (0, v))
        indeg = {v: 0 for v in adj}
        for a in adj:
            for b in adj[a]:
                indeg[b] += 1
        ready = [(key(v), v) for v, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        out = []
        while ready:
            _, v = heapq.heappop(ready)
            out.append(v)
            for b in adj[v]:
                indeg[b] -= 1
                if indeg[b] == 0:
                    heapq.heappush(ready, (key(b), b))
        if len(out) != len(adj):
            raise ValueError("collation graph has a cycle")
        return out


@dataclass(frozen=True)
class TxnOp:
    """One client-visible command in a history. ``writes`` maps object to the
    written value; ``reads`` maps object to the value returned (only for
    completed operations). ``reply`` is None when the client never heard back."""

    id: int
    invoke: int
    reply: Optional[int]
    writes: Tuple[Tuple[int, object], ...] = ()
    reads: Tuple[Tuple[int, object], ...] = ()


@dataclass
class Verdict:
    ok: bool
    order: Optional[List[int]] = None
    reason: str = ""


def _replay(order: Sequence[TxnOp]) -> Optional[str]:
    state: Dict[int, object] = {}
    for op in order:
        for o, v in op.reads:
            if state.get(o) != v:
                return f"op {op.id} read {v!r} from object {o}, serial state has {state.get(o)!r}"
        for o, v in op.writes:
            state[o] = v
    return None


def legal_serial_order(order: Sequence[TxnOp]) -> Optional[str]:
    """Reason ``order`` is not a valid strict serialization, or None."""
    for a, b in itertools.combinations(order, 2):
        if b.reply is not None and b.reply < a.invoke:
            return f"op {b.id} finished before op {a.id} started but is ordered after it"
    return _replay(order)


def check_strict_serializability(ops: Sequence[TxnOp], collation: Optional[CollationGraph] = None,
                                 limit: int = 8, priority: Optional[Mapping[int, object]] = None) -> Verdict:
    """Brute force: is there a total order of ``ops`` that respects real time,
    collation edges (if given), and register semantics?

    When a collation graph is given, its own topological order (ties broken by
    ``priority``, e.g. first execution time) must also be a valid witness.
    """
    ops = list(ops)
    if len(ops) > limit:
        raise ValueError(f"brute-force check limited to {limit} operations")
    by_id = {op.id: op for op in ops}
    edges = set()
    if collation is not None:
        edges = {(a, b) for a, b in collation.edges() if a in by_id and b in by_id}
        try:
            topo = [by_id[c] for c in collation.topological_order(priority) if c in by_id]
        except ValueError:
            return Verdict(False, None, f"collation cycle {collation.find_cycle()}")
        why = legal_serial_order(topo)
        if why is not None:
            return Verdict(False, [o.id for o in topo], "collation order is not a witness: " + why)
    for perm in itertools.permutations(ops):
        pos = {op.id: i for i, op in enumerate(perm)}
        if any(pos[a] > pos[b] for a, b in edges):
            continue
        if legal_serial_order(perm) is None:
            return Verdict(True, [op.id for op in perm])
    return Verdict(False, None, "no total order satisfies real time and read values")


def deadlock_free(waits: Mapping[int, Iterable[int]]) -> bool:
    """True iff the wait-for graph has no cycle."""
    adj = {k: set(v) for k, v in waits.items()}
    for comp in _sccs(adj):
        if len(comp) > 1:
            return False
        (v,) = comp
        if v in adj.get(v, ()):
            return False
    return True
