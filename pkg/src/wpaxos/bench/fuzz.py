"""Randomized fault-injected runs for the safety checkers.

Each seed picks a fault schedule (message loss, duplication, partitions and
crashes kept within the f/F envelope) and a small, contended workload.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import List, Optional

from .. import trace as T
from ..node import MigrationPolicy, NodeParams
from ..quorum import ClusterConfig
from ..simnet import FaultSpec, SimConfig, aws_5region, run
from ..workload import WorkloadSpec
from .check import CheckReport, check_run

MESSAGE_TAGS = (T.SEND, T.DELIVER, T.DROP, T.TIMER)


def random_faults(r: random.Random, cfg: ClusterConfig, horizon: int) -> List[FaultSpec]:
    faults = []
    if r.random() < 0.7:
        faults.append(FaultSpec("drop_prob", 0, r.uniform(0, 0.1), r.choice(["all", "wan"])))
    if r.random() < 0.5:
        faults.append(FaultSpec("duplicate_prob", 0, r.uniform(0, 0.1)))
    if r.random() < 0.2:
        zs = list(cfg.zones)
        r.shuffle(zs)
        cut = r.randint(1, len(zs) - 1)
        faults.append(FaultSpec("partition", r.randint(0, horizon), (sorted(zs[:cut]), sorted(zs[cut:]))))
    dead_zones = set()
    if cfg.F and r.random() < 0.5:
        dead_zones = set(r.sample(list(cfg.zones), r.randint(1, cfg.F)))
        for z in sorted(dead_zones):
            faults.append(FaultSpec("crash_zone", r.randint(0, horizon), z))
    # at most f crashed nodes in each surviving zone
    for z in r.sample([z for z in cfg.zones if z not in dead_zones], r.randint(0, 3)):
        for i in r.sample(range(1, cfg.N + 1), r.randint(1, cfg.f)):
            faults.append(FaultSpec("crash_node", r.randint(0, horizon), (z, i)))
    if r.random() < 0.4:
        faults.append(FaultSpec("heal", r.randint(horizon // 2, horizon)))
    return sorted(faults, key=lambda f: (f.at, f.kind))


def random_config(seed: int, *, txn_ratio: float = 0.0, objects: Optional[int] = None,
                  rate: Optional[float] = None, duration: float = 2.0) -> SimConfig:
    """A 5x3 cluster under random faults with a contended uniform workload."""
    r = random.Random(f"fuzz:{seed}")
    cfg = ClusterConfig(5, 3, 1, r.choice([0, 1]))
    horizon = int(duration * 1_000_000)
    policy = r.choice(["immediate", "adaptive"])
    w = WorkloadSpec(
        K=objects or r.choice([3, 5, 10]),
        distribution="uniform",
        rate=rate if rate is not None else r.choice([5, 10, 20]),
        duration=duration,
        write_ratio=r.choice([0.5, 1.0]),
        txn_ratio=txn_ratio,
        txn_size=2,
    )
    params = NodeParams(
        policy=MigrationPolicy(policy, window=10, min_samples=3),
        p1_timeout=600_000,
        p2_timeout=400_000,
    )
    return SimConfig(cluster=cfg, params=params, latency=aws_5region(0.2), workload=w,
                     faults=tuple(random_faults(r, cfg, horizon)), seed=seed,
                     trace_skip=MESSAGE_TAGS, drain=8.0, client_timeout=3_000_000)


@dataclass
class FuzzOutcome:
    seed: int
    report: CheckReport
    records: list
    submitted: int
    unanswered: int


def fuzz_one(seed: int, **kw) -> FuzzOutcome:
    res = run(random_config(seed, **kw))
    recs = list(T.iter_records(res.trace.getvalue()))
    return FuzzOutcome(seed, check_run(recs), recs, res.submitted, len(res.unanswered))
