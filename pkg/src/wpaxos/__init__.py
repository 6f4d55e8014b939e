"""Multi-leader Paxos over a zone grid with per-object stealing."""
from .core import Ballot, Command, ballot_next, leader_of
from .node import MigrationPolicy, Node, NodeParams
from .quorum import ClusterConfig, NodeId, check_intersection, is_q1_satisfied, is_q2_satisfied
from .simnet import FaultSpec, LatencyModel, SimConfig, aws_5region, run
from .workload import WorkloadSpec, locality

__all__ = [
    "Ballot", "Command", "ballot_next", "leader_of",
    "MigrationPolicy", "Node", "NodeParams",
    "ClusterConfig", "NodeId", "check_intersection", "is_q1_satisfied", "is_q2_satisfied",
    "FaultSpec", "LatencyModel", "SimConfig", "aws_5region", "run",
    "WorkloadSpec", "locality",
]
