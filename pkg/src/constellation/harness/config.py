"""Experiment configuration files.

Same key-value-with-sections format as topology files; an experiment file
may reference a separate topology file (``topology = path``) or carry the
topology sections inline.

    [experiment]
    kind = convergence-fuzz        ; leaked-packets | coalescing |
                                   ; scale-out | scale-in
    instances = 3
    seed = 7
    duration_ms = 1000
    out = runs/fuzz7

    [workload]
    flows_per_sec = 2000
    packets_per_flow = 3
    packet_size = 128
    flood_port = 443
    threshold_mbits = 8
    ops_per_instance = 1000
    object_kind = all

    [replication]
    coalescing = on
    send_interval_us = 200
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..replication import ReplicationConfig
from ..simnet import Topology, load_topology, topology_from_parser
from ..types import ConfigError

EXPERIMENT_KINDS = ("convergence-fuzz", "leaked-packets", "coalescing",
                    "scale-out", "scale-in")


@dataclass
class WorkloadConfig:
    flows_per_sec: int = 2000
    packets_per_flow: int = 3
    packet_size: int = 128
    flood_port: int = 443
    threshold_mbits: float = 8.0
    ops_per_instance: int = 1000
    object_kind: str = "all"

    def validate(self) -> None:
        if self.flows_per_sec <= 0 or self.packets_per_flow <= 0:
            raise ConfigError("workload rates must be > 0")
        if self.packet_size < 40:
            raise ConfigError("packet_size must cover headers (>= 40)")
        if self.threshold_mbits <= 0:
            raise ConfigError("threshold_mbits must be > 0")
        if self.ops_per_instance <= 0:
            raise ConfigError("ops_per_instance must be > 0")


@dataclass
class ExperimentConfig:
    kind: str
    instances: int
    seed: int
    duration_us: int
    out_dir: Path
    topology: Topology
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    replication: ReplicationConfig = field(default_factory=ReplicationConfig)
    bucket_us: int = 10_000

    def validate(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r} "
                              f"(expected one of {', '.join(EXPERIMENT_KINDS)})")
        if self.instances < 1:
            raise ConfigError("instances must be >= 1")
        if self.duration_us <= 0:
            raise ConfigError("duration must be > 0")
        if self.topology.instances < self.instances:
            raise ConfigError("topology covers fewer instances than the experiment")
        self.workload.validate()


def _get(parser, section, key, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        if cast is bool:
            if raw.lower() in ("on", "true", "1", "yes"):
                return True
            if raw.lower() in ("off", "false", "0", "no"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc


def load_experiment(path, seed_override: Optional[int] = None,
                    out_override: Optional[str] = None,
                    coalescing_override: Optional[bool] = None) -> ExperimentConfig:
    path = Path(path)
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    if not parser.has_section("experiment"):
        raise ConfigError("config is missing the [experiment] section")

    if parser.has_option("experiment", "topology"):
        topo_path = Path(parser.get("experiment", "topology"))
        if not topo_path.is_absolute():
            topo_path = path.parent / topo_path
        topology = load_topology(topo_path)
    elif parser.has_section("instances"):
        topology = topology_from_parser(parser)
    else:
        count = _get(parser, "experiment", "instances", int, 2)
        topology = Topology(instances=count)

    seed = _get(parser, "experiment", "seed", int, topology.seed)
    if seed_override is not None:
        seed = seed_override
    topology.seed = seed

    out = _get(parser, "experiment", "out", str, "runs/out")
    if out_override is not None:
        out = out_override

    workload = WorkloadConfig(
        flows_per_sec=_get(parser, "workload", "flows_per_sec", int, 2000),
        packets_per_flow=_get(parser, "workload", "packets_per_flow", int, 3),
        packet_size=_get(parser, "workload", "packet_size", int, 128),
        flood_port=_get(parser, "workload", "flood_port", int, 443),
        threshold_mbits=_get(parser, "workload", "threshold_mbits", float, 8.0),
        ops_per_instance=_get(parser, "workload", "ops_per_instance", int, 1000),
        object_kind=_get(parser, "workload", "object_kind", str, "all"),
    )

    repl = ReplicationConfig(
        send_interval_us=_get(parser, "replication", "send_interval_us", int, 200),
        keepalive_interval_us=_get(parser, "replication", "keepalive_interval_us",
                                   int, 100_000),
        max_lookahead=_get(parser, "replication", "max_lookahead", int, 1024),
        coalescing_enabled=_get(parser, "replication", "coalescing", bool, True),
    )
    if coalescing_override is not None:
        repl.coalescing_enabled = coalescing_override

    cfg = ExperimentConfig(
        kind=_get(parser, "experiment", "kind", str, "convergence-fuzz"),
        instances=_get(parser, "experiment", "instances", int, topology.instances),
        seed=seed,
        duration_us=int(_get(parser, "experiment", "duration_ms", float, 1000.0) * 1000),
        out_dir=Path(out),
        topology=topology,
        workload=workload,
        replication=repl,
        bucket_us=int(_get(parser, "experiment", "bucket_ms", float, 10.0) * 1000),
    )
    cfg.validate()
    return cfg
