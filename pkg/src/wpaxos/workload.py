"""Locality-parameterized request generation.

Each zone picks objects from its own normal distribution over a shared pool of
``K`` objects. Zones whose means sit far apart (relative to ``sigma``) rarely
touch the same objects, which is what "locality" measures.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .core import DEFAULT_POOL, GET, PUT, TXN, Command
from .quorum import ClusterConfig

NORMAL = "normal"
UNIFORM = "uniform"

_STD = NormalDist()


@dataclass
class WorkloadSpec:
    K: int = DEFAULT_POOL
    means: Tuple[float, ...] = ()  # one per zone; empty means evenly spaced
    sigma: float = 50.0
    rate: float = 100.0  # requests/s per zone (open loop)
    clients: int = 0  # clients per zone; > 0 switches to closed loop
    write_ratio: float = 1.0
    duration: float = 10.0  # seconds
    shift_rate: float = 0.0  # objects/s drift of every mean
    shift_start: float = 0.0  # seconds before the drift begins
    distribution: str = NORMAL
    txn_ratio: float = 0.0
    txn_size: int = 2
    zones: Tuple[int, ...] = ()  # zones issuing requests; empty means all

    def __post_init__(self):
        self.means = tuple(float(m) for m in self.means)
        self.zones = tuple(self.zones)
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.shift_start < 0:
            raise ValueError("shift_start must be >= 0")
        if self.rate < 0 or self.clients < 0:
            raise ValueError("rate and clients must be >= 0")
        if not 0 <= self.write_ratio <= 1 or not 0 <= self.txn_ratio <= 1:
            raise ValueError("ratios must be in [0, 1]")
        if self.distribution not in (NORMAL, UNIFORM):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.txn_ratio > 0 and not 2 <= self.txn_size <= self.K:
            raise ValueError("txn_size must be in 2..K")

    def mean(self, zone: int, Z: Optional[int] = None) -> float:
        if self.means:
            return self.means[(zone - 1) % len(self.means)]
        Z = Z or 1
        return self.K * (zone - 0.5) / Z


def sample_object(spec: WorkloadSpec, zone: int, time: float, rng: random.Random, Z: Optional[int] = None) -> int:
    """Draw an object id for a request issued from ``zone`` at ``time`` seconds."""
    if spec.distribution == UNIFORM:
        return rng.randrange(spec.K)
    mu = spec.mean(zone, Z)
    if spec.shift_rate:
        mu = (mu + spec.shift_rate * max(0.0, time - spec.shift_start)) % spec.K
    x = round(rng.gauss(mu, spec.sigma))
    return min(max(x, 0), spec.K - 1)


def locality(spec: WorkloadSpec, zone_a: int, zone_b: int, Z: Optional[int] = None,
             sigma_b: Optional[float] = None) -> float:
    """1 minus the overlap of the two zones' selection densities."""
    if sigma_b is not None and sigma_b != spec.sigma:
        raise ValueError("locality needs a shared sigma")
    return locality_of_means(spec.mean(zone_a, Z), spec.mean(zone_b, Z), spec.sigma)


def locality_of_means(mu_a: float, mu_b: float, sigma: float) -> float:
    lo, hi = sorted((mu_a, mu_b))
    mid = (lo + hi) / 2
    return _STD.cdf((mid - lo) / sigma) - _STD.cdf((mid - hi) / sigma)


def spacing_for_locality(target: float, sigma: float) -> float:
    """Distance between two means that gives locality ``target``."""
    if not 0 <= target < 1:
        raise ValueError("target locality must be in [0, 1)")
    return 2 * sigma * _STD.inv_cdf((1 + target) / 2)


def means_for_locality(target: float, sigma: float, Z: int, K: int = DEFAULT_POOL) -> Tuple[float, ...]:
    """Evenly spaced per-zone means, centred in the pool, with adjacent-pair
    locality ``target``."""
    d = spacing_for_locality(target, sigma)
    span = d * (Z - 1)
    start = (K - 1 - span) / 2
    if start < 0:
        raise ValueError(f"pool of {K} objects too small for locality {target} with sigma {sigma}")
    return tuple(start + i * d for i in range(Z))


def locality_matrix(spec: WorkloadSpec, Z: int) -> List[List[float]]:
    return [[locality(spec, a, b, Z) for b in range(1, Z + 1)] for a in range(1, Z + 1)]


def min_adjacent_locality(spec: WorkloadSpec, Z: int) -> float:
    order = sorted(range(1, Z + 1), key=lambda z: spec.mean(z, Z))
    return min((locality(spec, a, b, Z) for a, b in zip(order, order[1:])), default=1.0)


def empirical_locality(samples_a: Sequence[int], samples_b: Sequence[int], K: int) -> float:
    """1 minus the overlap of two empirical histograms."""
    ha = [0] * K
    hb = [0] * K
    for x in samples_a:
        ha[x] += 1
    for x in samples_b:
        hb[x] += 1
    na, nb = len(samples_a), len(samples_b)
    return 1 - sum(min(a / na, b / nb) for a, b in zip(ha, hb))


class RequestGenerator:
    """Builds commands with unique ids; write values equal the command id."""

    def __init__(self, spec: WorkloadSpec, cfg: ClusterConfig, seed: int = 0):
        self.spec = spec
        self.Z = cfg.Z
        self.rng = random.Random(f"workload:{seed}")
        self.next_id = 1

    def command(self, zone: int, client: int, time: float) -> Command:
        spec = self.spec
        rng = self.rng
        cid = self.next_id
        self.next_id += 1
        if spec.txn_ratio and rng.random() < spec.txn_ratio:
            objs = set()
            while len(objs) < spec.txn_size:
                objs.add(sample_object(spec, zone, time, rng, self.Z))
            objs = tuple(sorted(objs))
            payload = tuple(cid if rng.random() < spec.write_ratio else None for _ in objs)
            return Command(cid, objs, TXN, payload, (zone, client))
        o = sample_object(spec, zone, time, rng, self.Z)
        if rng.random() < spec.write_ratio:
            return Command(cid, (o,), PUT, (cid,), (zone, client))
        return Command(cid, (o,), GET, (), (zone, client))


def issuing_zones(spec: WorkloadSpec, cfg: ClusterConfig) -> List[int]:
    return list(spec.zones) if spec.zones else list(cfg.zones)


def make_schedule(spec: WorkloadSpec, cfg: ClusterConfig, seed: int = 0) -> Iterator[Tuple[int, int, Command]]:
    """Open-loop stream of ``(time_us, zone, cmd)`` with Poisson arrivals per
    zone, merged in time order."""
    if spec.rate <= 0:
        return iter(())
    gen = RequestGenerator(spec, cfg, seed)
    arrivals = random.Random(f"arrivals:{seed}")
    end = int(spec.duration * 1_000_000)
    events = []
    for z in issuing_zones(spec, cfg):
        t = 0.0
        while True:
            t += arrivals.expovariate(spec.rate)
            tu = int(t * 1_000_000)
            if tu >= end:
                break
            events.append((tu, z))
    events.sort()
    return ((t, z, gen.command(z, 0, t / 1_000_000)) for t, z in events)


def histogram(samples: Sequence[int], K: int) -> Dict[int, int]:
    out: Dict[int, int] = {}
    for x in samples:
        out[x] = out.get(x, 0) + 1
    return dict(sorted(out.items()))


def truncated_mass(spec: WorkloadSpec, zone: int, Z: Optional[int] = None) -> List[float]:
    """Probability of each object under round-then-clamp sampling."""
    mu, s = spec.mean(zone, Z), spec.sigma
    cdf = lambda x: _STD.cdf((x - mu) / s)
    out = []
    for k in range(spec.K):
        lo = -math.inf if k == 0 else k - 0.5
        hi = math.inf if k == spec.K - 1 else k + 0.5
        out.append((1.0 if hi == math.inf else cdf(hi)) - (0.0 if lo == -math.inf else cdf(lo)))
    return out
