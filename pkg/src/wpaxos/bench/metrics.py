"""Reductions from raw latency records to summaries.

Percentiles use nearest rank over the full record set.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

from .. import trace as T
from ..simnet import LatencyRecord

PATHS = ("local_q2", "wan_q2", "forwarded")


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile; ``q`` in (0, 100]."""
    if not values:
        return math.nan
    if not 0 < q <= 100:
        raise ValueError("q must be in (0, 100]")
    v = sorted(values)
    k = max(1, math.ceil(q / 100 * len(v)))
    return v[k - 1]


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else math.nan


@dataclass
class LatencyStats:
    count: int
    mean: float
    median: float
    p95: float
    p99: float

    @classmethod
    def of(cls, ms: Sequence[float]) -> "LatencyStats":
        return cls(len(ms), _mean(ms), percentile(ms, 50), percentile(ms, 95), percentile(ms, 99))


@dataclass
class Summary:
    window: tuple
    replies: int
    throughput: float  # replies per second within the window
    overall: LatencyStats
    per_zone: Dict[int, LatencyStats]
    cdf: List[tuple]  # (latency ms, cumulative fraction)
    path_fraction: Dict[str, float]
    stolen_fraction: float
    aborted: int
    steals: int
    p1_attempts: int
    p1_per_steal: float
    p1_per_commit: float
    series: List[tuple] = field(default_factory=list)  # (second, mean ms, count)

    @property
    def local_fraction(self) -> float:
        return self.path_fraction.get("local_q2", 0.0)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["local_fraction"] = self.local_fraction
        return d


def in_window(records: Iterable[LatencyRecord], start: int = 0, end: Optional[int] = None) -> List[LatencyRecord]:
    return [r for r in records if r.submit >= start and (end is None or r.submit < end)]


def per_second(records: Iterable[LatencyRecord], end: Optional[int] = None) -> List[tuple]:
    """Mean latency (ms) of requests submitted in each virtual second."""
    buckets: Dict[int, List[float]] = {}
    for r in records:
        if not r.ok:
            continue
        buckets.setdefault(r.submit // 1_000_000, []).append(r.latency / 1000)
    last = max(buckets, default=-1) if end is None else end // 1_000_000 - 1
    return [(s, _mean(buckets.get(s, [])), len(buckets.get(s, []))) for s in range(0, last + 1)]


def cdf_points(ms: Sequence[float], points: int = 100) -> List[tuple]:
    if not ms:
        return []
    v = sorted(ms)
    n = len(v)
    out = []
    for i in range(1, points + 1):
        k = max(1, math.ceil(i / points * n))
        out.append((v[k - 1], k / n))
    return out


def summarize(records: Sequence[LatencyRecord], tag_counts: Optional[Dict[int, int]] = None,
              start: int = 0, end: Optional[int] = None) -> Summary:
    win = in_window(records, start, end)
    ok = [r for r in win if r.ok]
    ms = [r.latency / 1000 for r in ok]
    zones = sorted({r.zone for r in ok})
    per_zone = {z: LatencyStats.of([r.latency / 1000 for r in ok if r.zone == z]) for z in zones}
    n = len(ok)
    paths = {p: (sum(1 for r in ok if r.path == p) / n if n else 0.0) for p in PATHS}
    tc = tag_counts or {}
    p1 = tc.get(T.P1A, 0)
    steals = tc.get(T.OWN, 0)
    total_ok = sum(1 for r in records if r.ok)
    if end is None:
        end_s = (max((r.submit for r in win), default=start) + 1)
    else:
        end_s = end
    span = max(1e-9, (end_s - start) / 1_000_000)
    return Summary(
        window=(start, end),
        replies=n,
        throughput=n / span,
        overall=LatencyStats.of(ms),
        per_zone=per_zone,
        cdf=cdf_points(ms),
        path_fraction=paths,
        stolen_fraction=(sum(1 for r in ok if r.stolen) / n if n else 0.0),
        aborted=sum(1 for r in win if not r.ok),
        steals=steals,
        p1_attempts=p1,
        p1_per_steal=(p1 / steals if steals else math.nan),
        p1_per_commit=(p1 / total_ok if total_ok else math.nan),
        series=per_second(records, end),
    )


CSV_FIELDS = ("cmd_id", "zone", "objects", "submit", "reply", "latency", "path", "stolen", "ok", "kind")


def write_records_csv(records: Iterable[LatencyRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.cmd_id, r.zone, " ".join(map(str, r.objects)), r.submit, r.reply,
                        r.latency, r.path, int(r.stolen), int(r.ok), r.kind])


def read_records_csv(path) -> List[LatencyRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(LatencyRecord(
                int(row["cmd_id"]), int(row["zone"]), tuple(int(x) for x in row["objects"].split()),
                int(row["submit"]), int(row["reply"]), row["path"], bool(int(row["stolen"])),
                bool(int(row["ok"])), row["kind"],
            ))
    return out
