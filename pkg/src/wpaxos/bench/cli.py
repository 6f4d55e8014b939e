"""Command line: ``wpaxos run|check|quorum-calc|workload-stats``."""
from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

from ..quorum import quorum_summary
from ..workload import empirical_locality, locality_matrix, sample_object
from . import config as C
from .check import check_trace_file
from .experiments import QUORUM_MODES, probe_rows, run_experiment


def _fmt(x, nd=2):
    return "nan" if x != x else f"{x:.{nd}f}"


def cmd_run(args) -> int:
    exp = C.load_experiment(args.config, args.set, args.seed)
    if args.variant:
        keep = set(args.variant)
        exp.variants = [v for v in exp.variants if v.name in keep]
        if not exp.variants:
            print(f"no variant named {', '.join(sorted(keep))}", file=sys.stderr)
            return 2
    out = Path(args.out) / exp.name if args.out else None
    results = run_experiment(exp, out, write_trace=not args.no_trace)
    for name, vr in results.variants.items():
        s = vr.summary
        print(f"{name}: replies={s.replies} mean={_fmt(s.overall.mean)}ms median={_fmt(s.overall.median)}ms "
              f"p95={_fmt(s.overall.p95)}ms local={_fmt(s.local_fraction, 3)} steals={s.steals} "
              f"p1/commit={_fmt(s.p1_per_commit, 3)} unanswered={len(vr.result.unanswered)} "
              f"trace={vr.trace.digest()[:16]}")
    for r in results.quorum_latency:
        print(f"{r.mode}: phase1={r.phase1:.2f}ms phase2={r.phase2:.2f}ms")
    if out is not None:
        print(f"wrote {out}")
    return 0


def cmd_check(args) -> int:
    rep = check_trace_file(args.trace)
    for name, (ok, detail) in rep.results.items():
        print(f"{name}: {'ok' if ok else 'FAIL'}{'  ' + detail if detail else ''}")
    for name, why in rep.skipped.items():
        print(f"{name}: skipped  {why}")
    if args.json:
        print(json.dumps(rep.as_dict(), indent=2))
    return 0 if rep.ok else 1


def cmd_quorum_calc(args) -> int:
    d = C.apply_overrides(C.load_dict(C.resolve(args.config)), args.set)
    exp = C.experiment_from_dict(d)
    clusters = [v.sim.cluster for v in exp.variants]
    if not clusters and "quorum_latency" in d:
        clusters = [QUORUM_MODES[n] for n in d["quorum_latency"].get("modes", list(QUORUM_MODES))]
    seen = set()
    for cfg in clusters:
        if cfg in seen:
            continue
        seen.add(cfg)
        print(json.dumps(quorum_summary(cfg), sort_keys=True))
    if "quorum_latency" in d or args.latency:
        if exp.latency is None:
            exp.latency = exp.variants[0].sim.latency
        exp.raw.setdefault("quorum_latency", {})
        rows = probe_rows(exp)
        for r in rows:
            print(f"{r.mode}: phase1={r.phase1:.2f}ms phase2={r.phase2:.2f}ms")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            with open(Path(args.out) / f"{exp.name}.quorum_latency.json", "w") as fh:
                json.dump([r.as_dict() for r in rows], fh, indent=2)
    return 0


def cmd_workload_stats(args) -> int:
    exp = C.load_experiment(args.config, args.set, args.seed)
    sim = exp.variants[0].sim
    w, Z = sim.workload, sim.cluster.Z
    means = [w.mean(z, Z) for z in sim.cluster.zones]
    print("means: " + " ".join(f"{m:.1f}" for m in means))
    print(f"sigma={w.sigma} K={w.K} distribution={w.distribution} shift_rate={w.shift_rate}")
    print("locality matrix (analytic):")
    for row in locality_matrix(w, Z):
        print("  " + " ".join(f"{x:.3f}" for x in row))
    rng = random.Random(f"workload-stats:{sim.seed}")
    samples = {z: [sample_object(w, z, 0.0, rng, Z) for _ in range(args.samples)] for z in sim.cluster.zones}
    print(f"locality of adjacent zones (empirical, {args.samples} samples each):")
    for a in range(1, Z):
        print(f"  {a}-{a + 1}: {empirical_locality(samples[a], samples[a + 1], w.K):.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wpaxos", description="WPaxos simulator and experiment runner")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("config", help="config file, or the name of a bundled config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. workload.rate=50")
        sp.add_argument("--seed", type=int, default=None)

    r = sub.add_parser("run", help="run an experiment")
    common(r)
    r.add_argument("--out", default=None, help="output directory")
    r.add_argument("--variant", action="append", default=[], help="only run this variant")
    r.add_argument("--no-trace", action="store_true", help="skip writing trace files")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("check", help="run the safety checkers over a trace file")
    c.add_argument("trace")
    c.add_argument("--json", action="store_true")
    c.set_defaults(fn=cmd_check)

    q = sub.add_parser("quorum-calc", help="quorum sizes, counts, intersection and probe latency")
    common(q)
    q.add_argument("--latency", action="store_true", help="also run the probe latency experiment")
    q.add_argument("--out", default=None)
    q.set_defaults(fn=cmd_quorum_calc)

    w = sub.add_parser("workload-stats", help="locality of a config's workload")
    common(w)
    w.add_argument("--samples", type=int, default=20000)
    w.set_defaults(fn=cmd_workload_stats)

    sub.add_parser("list", help="list bundled configs").set_defaults(
        fn=lambda a: print("\n".join(C.bundled_names())) or 0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (C.ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
