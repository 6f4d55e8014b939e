"""Comparison protocols built on the same node state machine.

KPaxos: every object is permanently led by a fixed node of its home zone;
nobody steals, other zones forward. MultiPaxos: one global log led by one node,
majority quorums over every node.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

from .core import CONFIG_OBJECT, Ballot
from .node import Node, NodeParams
from .quorum import ClusterConfig, MajorityQuorums, NodeId


@dataclass(frozen=True)
class PartitionMap:
    assignment: Tuple[int, ...]  # object id -> home zone

    @classmethod
    def from_means(cls, K: int, means: Sequence[float]) -> "PartitionMap":
        """Each object goes to the zone whose mean is nearest (ties: lower zone)."""
        return cls(tuple(min(range(len(means)), key=lambda i: (abs(means[i] - o), i)) + 1
                         for o in range(K)))

    @classmethod
    def blocks(cls, K: int, Z: int) -> "PartitionMap":
        return cls(tuple(min(Z, o * Z // K + 1) for o in range(K)))

    def zone_of(self, o: int) -> int:
        return self.assignment[o]

    def owner(self, o: int) -> Optional[NodeId]:
        if o < 0 or o >= len(self.assignment):
            return None
        return NodeId(self.assignment[o], 1)


def make_kpaxos_node(node_id: NodeId, cfg: ClusterConfig, pmap: PartitionMap,
                     params: Optional[NodeParams] = None, **kw) -> Node:
    params = replace(params or NodeParams(), steal=False)
    return Node(node_id, cfg, params, initial_owner=pmap.owner, **kw)


def kpaxos_step(node: Node, event):
    return node.step(event)


class MultiPaxosNode(Node):
    """All objects share log 0; the leader holds it from the start."""

    def log_key(self, o: int) -> int:
        return 0 if o != CONFIG_OBJECT else o


def central_zone(latency_rows: Sequence[Sequence[float]]) -> int:
    """Zone with the smallest worst-case, then total, one-way latency."""
    best = min(range(len(latency_rows)), key=lambda i: (max(latency_rows[i]), sum(latency_rows[i]), i))
    return best + 1


def make_multipaxos_node(node_id: NodeId, cfg: ClusterConfig, leader: NodeId,
                         params: Optional[NodeParams] = None, **kw) -> Node:
    params = replace(params or NodeParams(), steal=False)
    owner = lambda o: leader if o == 0 else None
    return MultiPaxosNode(node_id, cfg, params, initial_owner=owner,
                          quorum=MajorityQuorums(cfg.nodes()), **kw)


def multipaxos_step(node: Node, event):
    return node.step(event)
