"""Offline checks over a run's trace records.

Every check reads only the canonical records (commits, executions, client
invocations and replies), so it can run on a trace file from disk.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .. import trace as T
from ..core import KINDS, dec_command
from ..txn import CollationGraph, TxnOp, check_strict_serializability

BRUTE_FORCE_OPS = 8
SERIALIZABILITY_TXNS = 6


@dataclass
class CheckReport:
    results: Dict[str, Tuple[bool, str]] = field(default_factory=dict)
    skipped: Dict[str, str] = field(default_factory=dict)

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.results[name] = (ok, detail)

    def skip(self, name: str, why: str) -> None:
        self.skipped[name] = why

    @property
    def ok(self) -> bool:
        return all(ok for ok, _ in self.results.values())

    def failures(self) -> Dict[str, str]:
        return {k: d for k, (ok, d) in self.results.items() if not ok}

    def as_dict(self) -> dict:
        d = {k: {"ok": ok, "detail": d} for k, (ok, d) in self.results.items()}
        d.update({k: {"ok": None, "detail": why} for k, why in self.skipped.items()})
        return d


@dataclass
class History:
    commits: Dict[Tuple[int, int], list] = field(default_factory=dict)
    conflicts: List[str] = field(default_factory=list)
    execs: Dict[Tuple[tuple, int], List[Tuple[int, int, int]]] = field(default_factory=dict)
    first_exec: Dict[int, int] = field(default_factory=dict)
    invokes: Dict[int, Tuple[int, object]] = field(default_factory=dict)
    replies: Dict[int, Tuple[int, bool, list]] = field(default_factory=dict)
    violations: List[str] = field(default_factory=list)
    missing: Set[int] = field(default_factory=set)  # record tags the trace left out


def load_history(records: Iterable[list]) -> History:
    h = History()
    for r in records:
        tag = r[0]
        if tag == T.COMMIT:
            _, _, node, o, s, b, prop = r
            key = (o, s)
            old = h.commits.get(key)
            if old is None:
                h.commits[key] = prop
            elif old != prop:
                h.conflicts.append(f"object {o} slot {s}: {_short(old)} vs {_short(prop)} (node {node})")
        elif tag == T.EXEC:
            _, _, node, o, s, cid, eff = r
            h.execs.setdefault((tuple(node), o), []).append((s, cid, eff))
            if eff == 1:
                h.first_exec.setdefault(cid, r[1])
        elif tag == T.INVOKE:
            cmd = dec_command(r[4])
            h.invokes.setdefault(cmd.id, (r[1], cmd))
        elif tag == T.REPLY:
            h.replies.setdefault(r[4], (r[1], bool(r[5]), r[6]))
        elif tag == T.VIOLATION:
            h.violations.append(f"node {r[2]}: {r[3]}")
        elif tag == T.META:
            h.missing.update(r[2].get("skip", ()))
    return h


def _short(prop) -> str:
    return f"cmd {prop[0][0]}@{prop[1]}"


def check_consistency(h: History) -> Tuple[bool, str]:
    errs = h.conflicts + h.violations
    return (not errs, "; ".join(errs[:5]))


def check_stability(h: History) -> Tuple[bool, str]:
    """Per node and object, executions are gap-free and in slot order, and all
    nodes executed the same thing at each slot (so every node's sequence is a
    prefix of one common sequence)."""
    agreed: Dict[Tuple[int, int], Tuple[int, int]] = {}
    for (node, o), seq in h.execs.items():
        prev = 0
        for s, cid, eff in seq:
            if s != prev + 1:
                return False, f"node {node} object {o}: executed slot {s} after {prev}"
            prev = s
            got = agreed.setdefault((o, s), (cid, eff))
            if got != (cid, eff):
                return False, f"object {o} slot {s}: executed {got} and {(cid, eff)}"
            prop = h.commits.get((o, s))
            if prop is not None and prop[0][0] != cid:
                return False, f"object {o} slot {s}: executed cmd {cid}, committed {prop[0][0]}"
    return True, ""


def check_nontriviality(h: History) -> Tuple[bool, str]:
    for (o, s), prop in h.commits.items():
        cid = prop[0][0]
        if cid > 0 and cid not in h.invokes:
            return False, f"object {o} slot {s}: committed cmd {cid} never submitted"
    return True, ""


# -- linearizability -----------------------------------------------------------

INF = float("inf")


@dataclass(frozen=True)
class RegOp:
    id: int
    invoke: int
    reply: float  # INF when pending
    write: bool
    value: object


def effective_order(h: History) -> Dict[int, List[int]]:
    """Per object, ids of commands that took effect, in slot order."""
    out: Dict[int, Dict[int, int]] = {}
    for (_node, o), seq in h.execs.items():
        d = out.setdefault(o, {})
        for s, cid, eff in seq:
            if eff == 1:
                d[s] = cid
    return {o: [d[s] for s in sorted(d)] for o, d in out.items()}


def register_ops(h: History) -> Dict[int, List[RegOp]]:
    executed = {cid for ids in effective_order(h).values() for cid in ids}
    per_obj: Dict[int, List[RegOp]] = {}
    for cid, (t0, cmd) in h.invokes.items():
        rep = h.replies.get(cid)
        if rep is not None and not rep[1]:
            continue
        done = rep is not None
        if not done and cid not in executed:
            continue
        t1 = rep[0] if done else INF
        result = rep[2] if done else None
        if cmd.kind == "put":
            per_obj.setdefault(cmd.objects[0], []).append(RegOp(cid, t0, t1, True, cmd.payload[0]))
        elif cmd.kind == "get":
            if done:
                per_obj.setdefault(cmd.objects[0], []).append(RegOp(cid, t0, t1, False, result[0]))
        elif cmd.kind == "txn":
            for i, (o, v) in enumerate(zip(cmd.objects, cmd.payload)):
                if v is not None:
                    per_obj.setdefault(o, []).append(RegOp(cid, t0, t1, True, v))
                elif done:
                    per_obj.setdefault(o, []).append(RegOp(cid, t0, t1, False, result[i]))
    return per_obj


def linearizable(ops: Sequence[RegOp], init=None) -> Optional[List[int]]:
    """Brute-force search for a legal linearization of register ops.

    Returns the order found, or None. Pending writes may take effect at any
    point after their invocation, or never.
    """
    ops = list(ops)
    n = len(ops)
    seen = set()

    def go(done: int, value, order):
        if all(done >> i & 1 or ops[i].reply == INF for i in range(n)):
            return list(order)
        key = (done, value)
        if key in seen:
            return None
        seen.add(key)
        frontier = min(ops[i].reply for i in range(n) if not done >> i & 1)
        for i in range(n):
            if done >> i & 1:
                continue
            op = ops[i]
            if op.invoke > frontier:
                continue
            if op.write:
                nv = op.value
            elif op.value == value:
                nv = value
            else:
                continue
            order.append(op.id)
            got = go(done | 1 << i, nv, order)
            order.pop()
            if got is not None:
                return got
        return None

    return go(0, init, [])


def witness_linearizable(ops: Sequence[RegOp], order: Sequence[int], init=None) -> Optional[str]:
    """Check the execution order is itself a legal linearization."""
    by_id = {op.id: op for op in ops}
    value = init
    latest_invoke = -1
    placed = set()
    for cid in order:
        op = by_id.get(cid)
        if op is None:
            continue
        placed.add(cid)
        if op.reply < latest_invoke:
            return f"op {cid} completed before an earlier-ordered op started"
        latest_invoke = max(latest_invoke, op.invoke)
        if op.write:
            value = op.value
        elif op.value != value:
            return f"op {cid} read {op.value!r}, expected {value!r}"
    for op in ops:
        if op.id not in placed and not op.write:
            return f"read {op.id} answered but never executed"
    return None


def check_linearizability(h: History, limit: int = BRUTE_FORCE_OPS) -> Tuple[bool, str, int]:
    """Per-object check. Returns (ok, detail, objects checked by brute force)."""
    orders = effective_order(h)
    brute = 0
    for o, ops in sorted(register_ops(h).items()):
        if len(ops) <= limit:
            brute += 1
            if linearizable(ops) is None:
                return False, f"object {o}: no linearization of {[op.id for op in ops]}", brute
        else:
            why = witness_linearizable(ops, orders.get(o, []))
            if why is not None:
                return False, f"object {o}: {why}", brute
    return True, "", brute


# -- transactions ------------------------------------------------------------------

def collation_graph(h: History) -> CollationGraph:
    g = CollationGraph()
    seen = set()
    for (o, s), cid in _effective_slots(h).items():
        prop = h.commits.get((o, s))
        if prop is None or cid in seen:
            continue
        seen.add(cid)
        g.add(cid, tuple((a, b) for a, b in prop[1]))
    return g


def _effective_slots(h: History) -> Dict[Tuple[int, int], int]:
    out = {}
    for (_node, o), seq in h.execs.items():
        for s, cid, eff in seq:
            if eff == 1:
                out[(o, s)] = cid
    return dict(sorted(out.items()))


def txn_ops(h: History) -> List[TxnOp]:
    executed = set(_effective_slots(h).values())
    ops = []
    for cid, (t0, cmd) in sorted(h.invokes.items()):
        rep = h.replies.get(cid)
        if rep is not None and not rep[1]:
            continue
        if cid not in executed:
            if rep is not None and cmd.kind != "get":
                ops.append(None)  # replied ok but never executed: impossible
            continue
        writes, reads = [], []
        if cmd.kind == "put":
            writes.append((cmd.objects[0], cmd.payload[0]))
        elif cmd.kind == "get":
            if rep is not None:
                reads.append((cmd.objects[0], rep[2][0]))
        else:
            for i, (o, v) in enumerate(zip(cmd.objects, cmd.payload)):
                if v is not None:
                    writes.append((o, v))
                elif rep is not None:
                    reads.append((o, rep[2][i]))
        ops.append(TxnOp(cid, t0, rep[0] if rep else None, tuple(writes), tuple(reads)))
    return ops


def check_transactions(h: History, limit: int = SERIALIZABILITY_TXNS) -> Tuple[bool, str, bool]:
    """Collation acyclicity always; brute-force strict serializability when the
    history is small. Returns (ok, detail, brute_forced)."""
    g = collation_graph(h)
    cyc = g.find_cycle()
    if cyc is not None:
        return False, f"collation cycle among {cyc}", False
    ops = txn_ops(h)
    if any(op is None for op in ops):
        return False, "a command was acknowledged but never executed", False
    if len(ops) > limit:
        return True, "", False
    prio = {c: h.first_exec.get(c, 0) for c in g.placements}
    v = check_strict_serializability(ops, g, limit=max(limit, len(ops)), priority=prio)
    return v.ok, v.reason, True


def check_run(records: Iterable[list], lin_limit: int = BRUTE_FORCE_OPS,
              txn_limit: int = SERIALIZABILITY_TXNS) -> CheckReport:
    h = load_history(records)
    rep = CheckReport()
    checks = (
        ("consistency", (T.COMMIT,), lambda: check_consistency(h)),
        ("stability", (T.EXEC,), lambda: check_stability(h)),
        ("nontriviality", (T.COMMIT,), lambda: check_nontriviality(h)),
        ("linearizability", (T.EXEC,), lambda: check_linearizability(h, lin_limit)[:2]),
        ("transactions", (T.COMMIT, T.EXEC), lambda: check_transactions(h, txn_limit)[:2]),
    )
    for name, needs, fn in checks:
        gone = [T.TAG_NAMES[t] for t in needs if t in h.missing]
        if gone:
            rep.skip(name, f"trace omits {'/'.join(gone)} records")
        else:
            rep.add(name, *fn())
    return rep


def check_trace_file(path) -> CheckReport:
    return check_run(T.read_trace(path))
