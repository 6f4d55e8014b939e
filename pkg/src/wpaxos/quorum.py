"""Cluster topology and the WPaxos / grid quorum families.

Nodes are laid out on a grid: one column per zone, ``N`` nodes per zone.
A phase-1 quorum (q1) takes ``f+1`` nodes from each of ``Z-F`` zones and a
phase-2 quorum (q2) takes ``f+1`` nodes from each of ``F+1`` zones. Grid mode
uses the rigid layout instead: q1 is one node in every zone, q2 is a full zone.

Acknowledgment sets are plain frozensets of :class:`NodeId`; a set satisfies a
family when it contains some minimal quorum of that family.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import FrozenSet, Iterable, Iterator, List, Sequence

WPAXOS = "wpaxos"
GRID = "grid"
MAJORITY = "majority"

ENUM_MAX_ZONES = 5
ENUM_MAX_NODES = 3


class ConfigError(ValueError):
    """Raised for cluster configurations that break a topology invariant."""


@dataclass(frozen=True, order=True)
class NodeId:
    zone: int
    index: int

    def __str__(self) -> str:
        return f"{self.zone}.{self.index}"


AckSet = FrozenSet[NodeId]


@dataclass(frozen=True)
class ClusterConfig:
    Z: int
    N: int
    f: int = 1
    F: int = 0
    mode: str = WPAXOS

    @property
    def zones(self) -> range:
        return range(1, self.Z + 1)

    def nodes(self) -> List[NodeId]:
        return [NodeId(z, i) for z in self.zones for i in range(1, self.N + 1)]

    def zone_nodes(self, zone: int) -> List[NodeId]:
        return [NodeId(zone, i) for i in range(1, self.N + 1)]

    def contains(self, n: NodeId) -> bool:
        return 1 <= n.zone <= self.Z and 1 <= n.index <= self.N

    @property
    def q1_zones(self) -> int:
        """Zones a minimal q1 spans."""
        if self.mode == GRID:
            return self.Z
        return self.Z - self.F

    @property
    def q2_zones(self) -> int:
        if self.mode == GRID:
            return 1
        return self.F + 1

    @property
    def per_zone_q1(self) -> int:
        return 1 if self.mode == GRID else self.f + 1

    @property
    def per_zone_q2(self) -> int:
        return self.N if self.mode == GRID else self.f + 1

    def q1_size(self) -> int:
        return self.q1_zones * self.per_zone_q1

    def q2_size(self) -> int:
        return self.q2_zones * self.per_zone_q2


def config_errors(cfg: ClusterConfig) -> List[str]:
    errs = []
    if cfg.mode not in (WPAXOS, GRID):
        errs.append(f"unknown quorum mode {cfg.mode!r}")
    if cfg.Z < 1:
        errs.append(f"Z={cfg.Z} must be >= 1")
    if cfg.N < 1:
        errs.append(f"N={cfg.N} must be >= 1")
    if cfg.mode == WPAXOS:
        if cfg.f < 0:
            errs.append(f"f={cfg.f} must be >= 0")
        if cfg.N != 2 * cfg.f + 1:
            errs.append(f"N={cfg.N} != 2f+1={2 * cfg.f + 1}")
        if not 0 <= cfg.F <= cfg.Z - 1:
            errs.append(f"F={cfg.F} outside 0..Z-1={cfg.Z - 1}")
    return errs


def validate_config(cfg: ClusterConfig) -> ClusterConfig:
    errs = config_errors(cfg)
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg


def _zone_counts(acks: Iterable[NodeId], cfg: ClusterConfig) -> dict:
    counts: dict = {}
    for n in acks:
        if cfg.contains(n):
            counts[n.zone] = counts.get(n.zone, 0) + 1
    return counts


def _full_zones(acks: Iterable[NodeId], cfg: ClusterConfig, per_zone: int) -> int:
    return sum(1 for c in _zone_counts(acks, cfg).values() if c >= per_zone)


def is_q1_satisfied(acks: Iterable[NodeId], cfg: ClusterConfig) -> bool:
    return _full_zones(acks, cfg, cfg.per_zone_q1) >= cfg.q1_zones


def is_q2_satisfied(acks: Iterable[NodeId], cfg: ClusterConfig) -> bool:
    return _full_zones(acks, cfg, cfg.per_zone_q2) >= cfg.q2_zones


def is_satisfied(acks: Iterable[NodeId], cfg: ClusterConfig, phase: int) -> bool:
    if phase == 1:
        return is_q1_satisfied(acks, cfg)
    if phase == 2:
        return is_q2_satisfied(acks, cfg)
    raise ValueError(f"phase must be 1 or 2, got {phase}")


def validate_acks(acks: Iterable[NodeId], cfg: ClusterConfig) -> AckSet:
    members = frozenset(acks)
    bad = sorted(n for n in members if not cfg.contains(n))
    if bad:
        raise ConfigError(f"ack members outside the cluster: {bad}")
    return members


def _check_guard(cfg: ClusterConfig) -> None:
    if cfg.Z > ENUM_MAX_ZONES or cfg.N > ENUM_MAX_NODES:
        raise ConfigError(
            f"enumeration limited to Z<={ENUM_MAX_ZONES}, N<={ENUM_MAX_NODES}; "
            f"got Z={cfg.Z}, N={cfg.N}"
        )


def enumerate_quorums(cfg: ClusterConfig, phase: int) -> FrozenSet[AckSet]:
    """All minimal quorums of the requested phase."""
    validate_config(cfg)
    _check_guard(cfg)
    if phase == 1:
        n_zones, per_zone = cfg.q1_zones, cfg.per_zone_q1
    elif phase == 2:
        n_zones, per_zone = cfg.q2_zones, cfg.per_zone_q2
    else:
        raise ValueError(f"phase must be 1 or 2, got {phase}")
    out = set()
    for zones in itertools.combinations(cfg.zones, n_zones):
        per_zone_choices = [
            list(itertools.combinations(cfg.zone_nodes(z), per_zone)) for z in zones
        ]
        for pick in itertools.product(*per_zone_choices):
            out.add(frozenset(itertools.chain.from_iterable(pick)))
    return frozenset(out)


def count_quorums(cfg: ClusterConfig, phase: int) -> int:
    """Closed-form size of :func:`enumerate_quorums` (no size guard)."""
    validate_config(cfg)
    if phase == 1:
        n_zones, per_zone = cfg.q1_zones, cfg.per_zone_q1
    else:
        n_zones, per_zone = cfg.q2_zones, cfg.per_zone_q2
    return math.comb(cfg.Z, n_zones) * math.comb(cfg.N, per_zone) ** n_zones


def _bitmask(q: Iterable[NodeId], cfg: ClusterConfig) -> int:
    m = 0
    for n in q:
        m |= 1 << ((n.zone - 1) * cfg.N + (n.index - 1))
    return m


def check_intersection(cfg: ClusterConfig, other: ClusterConfig | None = None) -> bool:
    """Exhaustively verify every q1 meets every q2.

    With ``other`` given, q1s come from ``cfg`` and q2s from ``other`` (both
    must share the same node grid width ``N``).
    """
    q2_cfg = other or cfg
    if q2_cfg.N != cfg.N:
        raise ConfigError("cross-config intersection needs equal N")
    q1s = [_bitmask(q, cfg) for q in enumerate_quorums(cfg, 1)]
    q2s = [_bitmask(q, q2_cfg) for q in enumerate_quorums(q2_cfg, 2)]
    return all(a & b for a in q1s for b in q2s)


def intersection_counterexample(cfg: ClusterConfig, other: ClusterConfig | None = None):
    q2_cfg = other or cfg
    for a in enumerate_quorums(cfg, 1):
        for b in enumerate_quorums(q2_cfg, 2):
            if not a & b:
                return sorted(a), sorted(b)
    return None


class QuorumSystem:
    """Quorum predicate used by a running node."""

    def q1(self, acks: Iterable[NodeId]) -> bool:
        raise NotImplementedError

    def q2(self, acks: Iterable[NodeId]) -> bool:
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__


class FlexibleQuorums(QuorumSystem):
    def __init__(self, cfg: ClusterConfig):
        self.cfg = validate_config(cfg)

    def q1(self, acks):
        return is_q1_satisfied(acks, self.cfg)

    def q2(self, acks):
        return is_q2_satisfied(acks, self.cfg)

    def describe(self):
        c = self.cfg
        return f"{c.mode}(Z={c.Z},N={c.N},f={c.f},F={c.F})"


class JointQuorums(QuorumSystem):
    """Transitional quorums: every check must pass under both configurations."""

    def __init__(self, old: ClusterConfig, new: ClusterConfig):
        self.old = validate_config(old)
        self.new = validate_config(new)

    def q1(self, acks):
        acks = frozenset(acks)
        return is_q1_satisfied(acks, self.old) and is_q1_satisfied(acks, self.new)

    def q2(self, acks):
        acks = frozenset(acks)
        return is_q2_satisfied(acks, self.old) and is_q2_satisfied(acks, self.new)

    def describe(self):
        return f"joint({FlexibleQuorums(self.old).describe()},{FlexibleQuorums(self.new).describe()})"


class MajorityQuorums(QuorumSystem):
    """Classic majority over an explicit member list (single-leader baseline)."""

    def __init__(self, members: Sequence[NodeId]):
        self.members = frozenset(members)
        self.size = len(self.members) // 2 + 1

    def q1(self, acks):
        return len(self.members.intersection(acks)) >= self.size

    def q2(self, acks):
        return self.q1(acks)

    def describe(self):
        return f"majority({self.size}/{len(self.members)})"


# -- reconfiguration ---------------------------------------------------------

ADD_ZONE = "add_zone"
REMOVE_ZONE = "remove_zone"
ADD_ROW = "add_row"
REMOVE_ROW = "remove_row"
SINGLE_STEP_CHANGES = (ADD_ZONE, REMOVE_ZONE, ADD_ROW, REMOVE_ROW)


def apply_change(cfg: ClusterConfig, change: str) -> ClusterConfig:
    """Target configuration of a single-step change; zones/rows are added or
    removed at the high end of the grid."""
    if change == ADD_ZONE:
        new = replace(cfg, Z=cfg.Z + 1)
    elif change == REMOVE_ZONE:
        new = replace(cfg, Z=cfg.Z - 1)
    elif change == ADD_ROW:
        new = replace(cfg, N=cfg.N + 1)
    elif change == REMOVE_ROW:
        new = replace(cfg, N=cfg.N - 1)
    else:
        raise ConfigError(f"unknown configuration change {change!r}")
    errs = config_errors(new)
    if errs:
        raise ConfigError(f"{change} on {cfg} is invalid: " + "; ".join(errs))
    return new


def joint_equals_new(old: ClusterConfig, new: ClusterConfig, phase: int) -> bool:
    """True when every minimal quorum of ``new`` already satisfies ``old`` for
    ``phase``, i.e. the combined old+new rule collapses to the new rule.

    Members outside the old grid are ignored by the old predicate.
    """
    return all(is_satisfied(q, old, phase) for q in enumerate_quorums(new, phase))


def quorum_summary(cfg: ClusterConfig) -> dict:
    validate_config(cfg)
    out = {
        "Z": cfg.Z,
        "N": cfg.N,
        "f": cfg.f,
        "F": cfg.F,
        "mode": cfg.mode,
        "q1_zones": cfg.q1_zones,
        "q2_zones": cfg.q2_zones,
        "q1_size": cfg.q1_size(),
        "q2_size": cfg.q2_size(),
        "q1_count": count_quorums(cfg, 1),
        "q2_count": count_quorums(cfg, 2),
    }
    try:
        _check_guard(cfg)
    except ConfigError:
        out["intersection"] = None
    else:
        out["intersection"] = check_intersection(cfg)
    return out


def iter_valid_configs(max_z: int, n: int = 3, f: int = 1) -> Iterator[ClusterConfig]:
    for z in range(1, max_z + 1):
        for big_f in range(0, z):
            yield ClusterConfig(Z=z, N=n, f=f, F=big_f)
