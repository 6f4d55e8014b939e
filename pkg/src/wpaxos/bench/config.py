"""TOML experiment configs.

A config file describes one experiment: a base simulation plus optional
``[[variants]]`` tables whose keys override the base (dotted keys such as
``params.policy`` work). Times are in seconds in the file and converted to
microseconds here.

Example::

    name = "locality90"
    seed = 1
    [cluster]
    zones = 5
    F = 0
    [workload]
    locality = 0.9
    [[variants]]
    name = "wpaxos"
    protocol = "wpaxos"
"""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .. import trace as T
from ..node import MigrationPolicy, NodeParams
from ..quorum import ClusterConfig
from ..simnet import FaultSpec, SimConfig, latency_preset
from ..workload import WorkloadSpec, means_for_locality

US = 1_000_000

TOP_KEYS = {"name", "description", "protocol", "seed", "drain", "client_timeout", "client_node",
            "spare_zones", "leader", "trace_skip", "cluster", "latency", "params", "workload",
            "faults", "metrics", "variants", "quorum_latency", "check"}
CLUSTER_KEYS = {"zones", "nodes", "f", "F", "mode"}
LATENCY_KEYS = {"preset", "jitter"}
PARAM_KEYS = {"policy", "window", "handover_threshold", "min_samples", "replication", "steal",
              "p1_timeout", "p2_timeout", "forward_timeout", "backoff_base", "backoff_factor",
              "backoff_cap", "max_forward", "p1_resends", "max_txn_attempts", "suppress_handover_in_txn"}
PARAM_TIMES = {"p1_timeout", "p2_timeout", "forward_timeout", "backoff_base", "backoff_cap"}
WORKLOAD_KEYS = {"K", "means", "locality", "sigma", "rate", "clients", "write_ratio", "duration",
                 "shift_rate", "shift_start", "distribution", "txn_ratio", "txn_size", "zones"}
FAULT_KEYS = {"kind", "at", "target", "scope", "node"}
METRIC_KEYS = {"warmup", "end", "windows"}

TAGS_BY_NAME = {v: k for k, v in T.TAG_NAMES.items()}


class ConfigError(ValueError):
    pass


@dataclass
class Variant:
    name: str
    sim: SimConfig
    raw: dict


@dataclass
class Experiment:
    name: str
    description: str
    variants: List[Variant]
    metrics: Dict[str, Any] = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    latency: Any = None  # latency model for probe experiments

    @property
    def warmup(self) -> float:
        return float(self.metrics.get("warmup", 0.0))


def _check_keys(table: dict, allowed: set, where: str) -> None:
    extra = set(table) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(extra))}")


def _us(x) -> Optional[int]:
    return None if x is None else int(round(float(x) * US))


def _tags(names) -> Tuple[int, ...]:
    out = []
    for n in names or ():
        if isinstance(n, int):
            out.append(n)
        elif n in TAGS_BY_NAME:
            out.append(TAGS_BY_NAME[n])
        else:
            raise ConfigError(f"unknown trace tag {n!r}")
    return tuple(sorted(set(out)))


def _tuple(x):
    return tuple(_tuple(v) for v in x) if isinstance(x, list) else x


def build_sim(d: dict) -> SimConfig:
    """Turn one flattened (base + variant) config table into a SimConfig."""
    _check_keys(d, TOP_KEYS, "config")
    c = dict(d.get("cluster", {}))
    _check_keys(c, CLUSTER_KEYS, "[cluster]")
    cluster = ClusterConfig(c.get("zones", 5), c.get("nodes", 3), c.get("f", 1), c.get("F", 0),
                            c.get("mode", "wpaxos"))

    lat = dict(d.get("latency", {}))
    _check_keys(lat, LATENCY_KEYS, "[latency]")
    spare = int(d.get("spare_zones", 0))
    latency = latency_preset(lat.get("preset", "aws-5region"), float(lat.get("jitter", 0.0)),
                             zones=cluster.Z + spare)

    p = dict(d.get("params", {}))
    _check_keys(p, PARAM_KEYS, "[params]")
    policy = MigrationPolicy(p.pop("policy", "immediate"), p.pop("window", 100),
                             p.pop("handover_threshold", 0.55), p.pop("min_samples", 10))
    for k in PARAM_TIMES & set(p):
        p[k] = _us(p[k])

    w = dict(d.get("workload", {}))
    _check_keys(w, WORKLOAD_KEYS, "[workload]")
    target = w.pop("locality", None)
    if target is not None:
        if "means" in w:
            raise ConfigError("give either workload.locality or workload.means, not both")
        w["means"] = means_for_locality(float(target), float(w.get("sigma", 50.0)), cluster.Z,
                                        int(w.get("K", 1000)))
    workload = WorkloadSpec(**{k: _tuple(v) for k, v in w.items()})
    params = NodeParams(policy=policy, pool=workload.K, **p)

    faults = []
    for f in d.get("faults", []):
        _check_keys(f, FAULT_KEYS, "[[faults]]")
        faults.append(FaultSpec(f["kind"], _us(f["at"]), _tuple(f.get("target")), f.get("scope", "all"),
                                tuple(f.get("node", (1, 1)))))

    leader = d.get("leader")
    return SimConfig(
        cluster=cluster,
        protocol=d.get("protocol", "wpaxos"),
        params=params,
        latency=latency,
        workload=workload,
        faults=tuple(faults),
        seed=int(d.get("seed", 0)),
        drain=float(d.get("drain", 5.0)),
        client_timeout=_us(d.get("client_timeout", 2.0)),
        client_node=int(d.get("client_node", 1)),
        spare_zones=spare,
        leader=tuple(leader) if leader else None,
        trace_skip=_tags(d.get("trace_skip")),
    )


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"{dotted}: {k} is not a table")
    d[keys[-1]] = value


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k == "name":
            continue
        if "." in k:
            set_path(out, k, copy.deepcopy(v))
        elif isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    """Parse an override value as TOML; bare words fall back to strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(d: dict, overrides: List[str]) -> dict:
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_path(d, k.strip(), parse_value(v.strip()))
    return d


def experiment_from_dict(d: dict, seed: Optional[int] = None) -> Experiment:
    d = copy.deepcopy(d)
    if seed is not None:
        d["seed"] = seed
    variants_raw = d.pop("variants", None)
    if variants_raw is None:
        # a probe-only config runs no simulation
        variants_raw = [] if "quorum_latency" in d else [{"name": d.get("protocol", "wpaxos")}]
    metrics = d.get("metrics", {})
    _check_keys(metrics, METRIC_KEYS, "[metrics]")
    _check_keys(d.get("quorum_latency", {}), {"modes", "probes"}, "[quorum_latency]")
    variants = []
    names = set()
    for v in variants_raw:
        name = v.get("name")
        if not name or name in names:
            raise ConfigError(f"variants need distinct names, got {name!r}")
        names.add(name)
        flat = merge(d, v)
        variants.append(Variant(name, build_sim(flat), flat))
    exp = Experiment(d.get("name", "experiment"), d.get("description", ""), variants, metrics, d)
    exp.latency = build_sim(d).latency if "quorum_latency" in d else None
    return exp


def load_dict(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def bundled_names() -> List[str]:
    root = resources.files("wpaxos.bench") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def resolve(path_or_name: str) -> Path:
    """A file path, or the name of a bundled config."""
    p = Path(path_or_name)
    if p.exists():
        return p
    name = path_or_name[:-5] if path_or_name.endswith(".toml") else path_or_name
    if name in bundled_names():
        return Path(str(resources.files("wpaxos.bench") / "configs" / f"{name}.toml"))
    raise ConfigError(f"no config file or bundled config named {path_or_name!r}")


def load_experiment(path_or_name: str, overrides: Optional[List[str]] = None,
                    seed: Optional[int] = None) -> Experiment:
    d = apply_overrides(load_dict(resolve(path_or_name)), overrides or [])
    return experiment_from_dict(d, seed)
