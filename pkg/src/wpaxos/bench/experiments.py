"""Experiment runner: drives the simulator per variant and writes artifacts."""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .. import trace as T
from ..node import Node, NodeParams
from ..quorum import GRID, ClusterConfig, NodeId
from ..simnet import LatencyModel, SimConfig, SimResult, aws_5region, deliver_latency, run
from .config import Experiment, load_experiment
from .metrics import Summary, summarize, write_records_csv

US = 1_000_000


@dataclass
class VariantResult:
    name: str
    result: SimResult
    summary: Summary
    files: Dict[str, str] = field(default_factory=dict)

    @property
    def trace(self) -> T.TraceWriter:
        return self.result.trace

    @property
    def records(self):
        return self.result.records


def _window(exp: Experiment, sim: SimConfig):
    m = exp.metrics
    start = int(float(m.get("warmup", 0.0)) * US)
    end = m.get("end")
    end = int(float(end) * US) if end is not None else int(sim.workload.duration * US)
    return start, end


def run_variant(exp: Experiment, name: str, seed: Optional[int] = None) -> VariantResult:
    v = next(x for x in exp.variants if x.name == name)
    res = run(v.sim, seed)
    start, end = _window(exp, v.sim)
    return VariantResult(name, res, summarize(res.records, res.tag_counts, start, end))


def window_summaries(exp: Experiment, vr: VariantResult) -> Dict[str, Summary]:
    """Extra ``[metrics] windows = [[name, start, end], ...]`` in seconds."""
    out = {}
    for name, a, b in exp.metrics.get("windows", []):
        out[name] = summarize(vr.records, vr.result.tag_counts, int(a * US), int(b * US))
    return out


@dataclass
class ExperimentResult:
    name: str
    variants: Dict[str, VariantResult]
    quorum_latency: list = field(default_factory=list)

    def __getitem__(self, name: str) -> VariantResult:
        return self.variants[name]


def probe_rows(exp: Experiment) -> list:
    ql = exp.raw.get("quorum_latency")
    if ql is None:
        return []
    modes = {n: QUORUM_MODES[n] for n in ql.get("modes", list(QUORUM_MODES))}
    return quorum_latency_experiment(modes, exp.latency, int(ql.get("probes", 200)),
                                     int(exp.raw.get("seed", 0)))


def run_experiment(exp: Experiment, outdir=None, seed: Optional[int] = None,
                   write_trace: bool = True) -> ExperimentResult:
    """Run every variant. With ``outdir``, write per variant a records CSV, a
    trace file and a summary JSON, plus ``summary.json`` for the experiment."""
    out: Dict[str, VariantResult] = {}
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
    combined = {"experiment": exp.name, "description": exp.description, "variants": {}}
    for v in exp.variants:
        vr = run_variant(exp, v.name, seed)
        out[v.name] = vr
        doc = {
            "summary": vr.summary.as_dict(),
            "windows": {k: s.as_dict() for k, s in window_summaries(exp, vr).items()},
            "trace_digest": vr.trace.digest(),
            "submitted": vr.result.submitted,
            "unanswered": len(vr.result.unanswered),
            "tag_counts": {T.TAG_NAMES.get(k, str(k)): n for k, n in sorted(vr.result.tag_counts.items())},
        }
        combined["variants"][v.name] = doc
        if outdir is not None:
            base = outdir / v.name
            write_records_csv(vr.records, f"{base}.records.csv")
            vr.files["records"] = f"{base}.records.csv"
            if write_trace:
                vr.trace.write(f"{base}.trace")
                vr.files["trace"] = f"{base}.trace"
            with open(f"{base}.summary.json", "w") as fh:
                json.dump(_clean(doc), fh, indent=2, sort_keys=True)
            vr.files["summary"] = f"{base}.summary.json"
    rows = probe_rows(exp)
    if rows:
        combined["quorum_latency"] = [r.as_dict() for r in rows]
    if outdir is not None:
        with open(outdir / "summary.json", "w") as fh:
            json.dump(_clean(combined), fh, indent=2, sort_keys=True)
    return ExperimentResult(exp.name, out, rows)


def _clean(x):
    """JSON has no NaN; write null instead."""
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


# -- quorum latency -------------------------------------------------------------

QUORUM_MODES = {
    "grid": ClusterConfig(5, 3, 1, 0, GRID),
    "wpaxos_F0": ClusterConfig(5, 3, 1, 0),
    "wpaxos_F1": ClusterConfig(5, 3, 1, 1),
}


@dataclass
class QuorumLatency:
    mode: str
    phase1: float  # mean ms over all probes
    phase2: float
    per_zone: Dict[int, tuple]  # zone -> (phase-1 mean, phase-2 mean)

    def as_dict(self) -> dict:
        return {"mode": self.mode, "phase1": self.phase1, "phase2": self.phase2,
                "per_zone": {str(z): list(v) for z, v in self.per_zone.items()}}


def probe(node: Node, targets: Sequence[NodeId], satisfied, latency: LatencyModel,
          rng: random.Random) -> int:
    """Microseconds until the acks from ``targets`` satisfy the quorum predicate,
    with every request and ack drawn from the latency model."""
    arrivals = sorted(
        (deliver_latency(latency, node.id, t, rng) + deliver_latency(latency, t, node.id, rng), t)
        for t in targets
    )
    acked = []
    for when, t in arrivals:
        acked.append(t)
        if satisfied(acked):
            return when
    raise ValueError("targets cannot form a quorum")


def quorum_latency_experiment(modes: Optional[Dict[str, ClusterConfig]] = None,
                              latency: Optional[LatencyModel] = None, probes: int = 200,
                              seed: int = 0, params: Optional[NodeParams] = None) -> List[QuorumLatency]:
    """Batches of phase-1 and phase-2 probes from one node in every zone.

    Targets are the ones the node itself would contact (its phase-1 zones and
    replication set), so the numbers reflect the protocol's choices, not just
    the quorum shapes.
    """
    modes = modes or QUORUM_MODES
    latency = latency or aws_5region(0.1)
    params = params or NodeParams()
    out = []
    for name, cfg in modes.items():
        rng = random.Random(f"qlat:{seed}:{name}")
        zones = list(cfg.zones)
        peers = cfg.nodes()
        per_zone = {}
        all1, all2 = [], []
        for z in zones:
            n = Node(NodeId(z, 1), cfg, params, zone_order=latency.zone_order(z, zones), peers=peers,
                     seed=f"qlat:{seed}:{z}")
            p1 = [probe(n, n.q1_targets(0), n.quorum.q1, latency, rng) / 1000 for _ in range(probes)]
            p2 = [probe(n, n.q2_targets(0), n.quorum.q2, latency, rng) / 1000 for _ in range(probes)]
            per_zone[z] = (sum(p1) / probes, sum(p2) / probes)
            all1 += p1
            all2 += p2
        out.append(QuorumLatency(name, sum(all1) / len(all1), sum(all2) / len(all2), per_zone))
    return out


def run_named(name_or_path: str, outdir=None, seed: Optional[int] = None,
              overrides: Optional[List[str]] = None) -> ExperimentResult:
    return run_experiment(load_experiment(name_or_path, overrides, seed), outdir, seed)
