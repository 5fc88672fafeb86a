"""Deterministic discrete-event WAN.

Virtual time is integer microseconds. Message delivery between an ordered
instance pair draws from that pair's own seeded PRNG (loss, jitter,
duplication), so editing the topology or adding instances never perturbs
another pair's randomness. Events are processed in nondecreasing time with
ties broken by (destination, insertion order), which makes a run a pure
function of (topology, seed, workload).

An optional token-bucket style rate limit per pair models a congested
path: messages queue behind each other and delivery delay grows with
backlog, which is what round-trip-time based congestion detection keys on.
"""

from __future__ import annotations

import configparser
import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .types import ConfigError, InstanceId

EVENT_MESSAGE = 0
EVENT_TASK = 1
EVENT_TIMER = 2


@dataclass
class Topology:
    instances: int
    latency_us: dict[tuple[int, int], int] = field(default_factory=dict)
    loss: dict[tuple[int, int], float] = field(default_factory=dict)
    duplication: dict[tuple[int, int], float] = field(default_factory=dict)
    jitter_us: dict[tuple[int, int], int] = field(default_factory=dict)
    rate_limit: dict[tuple[int, int], int] = field(default_factory=dict)  # bytes/sec, 0 = off
    default_latency_us: int = 5000
    default_loss: float = 0.0
    default_duplication: float = 0.0
    default_jitter_us: int = 0
    default_rate_limit: int = 0
    seed: int = 0

    def pair_latency(self, src: int, dst: int) -> int:
        return self.latency_us.get((src, dst), self.default_latency_us)

    def pair_loss(self, src: int, dst: int) -> float:
        return self.loss.get((src, dst), self.default_loss)

    def pair_duplication(self, src: int, dst: int) -> float:
        return self.duplication.get((src, dst), self.default_duplication)

    def pair_jitter(self, src: int, dst: int) -> int:
        return self.jitter_us.get((src, dst), self.default_jitter_us)

    def pair_rate_limit(self, src: int, dst: int) -> int:
        return self.rate_limit.get((src, dst), self.default_rate_limit)

    def validate(self) -> None:
        if self.instances < 1:
            raise ConfigError("topology needs at least one instance")
        for table, lo, hi in ((self.loss, 0.0, 1.0), (self.duplication, 0.0, 1.0)):
            for pair, p in table.items():
                if not lo <= p <= hi:
                    raise ConfigError(f"probability {p} for pair {pair} out of [0,1]")
        if not 0.0 <= self.default_loss <= 1.0 or not 0.0 <= self.default_duplication <= 1.0:
            raise ConfigError("default probabilities must lie in [0,1]")
        if any(v < 0 for v in self.latency_us.values()) or self.default_latency_us < 0:
            raise ConfigError("latencies must be >= 0")


def _parse_pair_section(section, scale: float = 1.0):
    default = None
    pairs = {}
    for key, raw in section.items():
        value = float(raw) * scale
        if key == "default":
            default = value
        else:
            try:
                src, dst = key.replace("->", " ").split()
                pairs[(int(src), int(dst))] = value
            except ValueError as exc:
                raise ConfigError(f"bad pair key {key!r}") from exc
    return default, pairs


def load_topology(path) -> Topology:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read topology file {path}")
    return topology_from_parser(parser)


def topology_from_parser(parser: configparser.ConfigParser) -> Topology:
    """Build a topology from sections: instances, latency_ms, loss,
    duplication, jitter_ms, rate_limit, seed."""
    try:
        count = parser.getint("instances", "count")
    except (configparser.Error, ValueError) as exc:
        raise ConfigError(f"missing or bad [instances] count: {exc}") from exc
    topo = Topology(instances=count)
    try:
        if parser.has_section("latency_ms"):
            default, pairs = _parse_pair_section(parser["latency_ms"], 1000.0)
            if default is not None:
                topo.default_latency_us = int(default)
            topo.latency_us = {k: int(v) for k, v in pairs.items()}
        if parser.has_section("loss"):
            default, pairs = _parse_pair_section(parser["loss"])
            if default is not None:
                topo.default_loss = default
            topo.loss = pairs
        if parser.has_section("duplication"):
            default, pairs = _parse_pair_section(parser["duplication"])
            if default is not None:
                topo.default_duplication = default
            topo.duplication = pairs
        if parser.has_section("jitter_ms"):
            default, pairs = _parse_pair_section(parser["jitter_ms"], 1000.0)
            if default is not None:
                topo.default_jitter_us = int(default)
            topo.jitter_us = {k: int(v) for k, v in pairs.items()}
        if parser.has_section("rate_limit"):
            default, pairs = _parse_pair_section(parser["rate_limit"])
            if default is not None:
                topo.default_rate_limit = int(default)
            topo.rate_limit = {k: int(v) for k, v in pairs.items()}
        if parser.has_section("seed"):
            topo.seed = parser.getint("seed", "value")
    except ValueError as exc:
        raise ConfigError(f"bad topology value: {exc}") from exc
    topo.validate()
    return topo


@dataclass
class PairStats:
    sent_messages: int = 0
    sent_bytes: int = 0
    delivered_messages: int = 0
    delivered_bytes: int = 0
    dropped_messages: int = 0
    duplicated_messages: int = 0
    latency_sum_us: int = 0
    latency_max_us: int = 0


class Simulator:
    def __init__(self, topology: Topology):
        self.topology = topology
        self.now = 0
        self._heap: list = []
        self._counter = 0
        self._receivers: dict[InstanceId, Callable] = {}
        self._pair_rng: dict[tuple[int, int], random.Random] = {}
        self._pair_busy_until: dict[tuple[int, int], int] = {}
        self._blocking_events = 0
        self.pair_stats: dict[tuple[int, int], PairStats] = {}
        self.diagnostics: dict[str, int] = {}

    # -- wiring ------------------------------------------------------------

    def attach(self, instance_id: InstanceId, on_datagram: Callable) -> None:
        self._receivers[instance_id] = on_datagram

    def detach(self, instance_id: InstanceId) -> None:
        self._receivers.pop(instance_id, None)

    def attached(self) -> list[InstanceId]:
        return sorted(self._receivers)

    def _rng(self, src: int, dst: int) -> random.Random:
        rng = self._pair_rng.get((src, dst))
        if rng is None:
            rng = random.Random(f"{self.topology.seed}:{src}:{dst}")
            self._pair_rng[(src, dst)] = rng
        return rng

    def _stats(self, src: int, dst: int) -> PairStats:
        stats = self.pair_stats.get((src, dst))
        if stats is None:
            stats = PairStats()
            self.pair_stats[(src, dst)] = stats
        return stats

    def set_latency(self, src: int, dst: int, latency_us: int) -> None:
        """Scripted latency change (congestion injection)."""
        self.topology.latency_us[(src, dst)] = latency_us

    def set_loss(self, src: int, dst: int, probability: float) -> None:
        """Scripted loss change (e.g. a congested-but-reliable phase)."""
        self.topology.loss[(src, dst)] = probability

    # -- scheduling --------------------------------------------------------

    def _push(self, at: int, dst: int, kind: int, blocking: bool, payload) -> None:
        self._counter += 1
        if blocking:
            self._blocking_events += 1
        heapq.heappush(self._heap, (at, dst, self._counter, kind, blocking, payload))

    def call_at(self, at: int, fn: Callable, *, owner: InstanceId = 0,
                timer: bool = False) -> None:
        """Schedule a callback. Timers never block quiescence; tasks do."""
        kind = EVENT_TIMER if timer else EVENT_TASK
        self._push(max(at, self.now), owner, kind, not timer, fn)

    # -- transmission ------------------------------------------------------

    def _transmit(self, src: int, dst: int, payload: bytes, blocking: bool) -> None:
        topo = self.topology
        rng = self._rng(src, dst)
        stats = self._stats(src, dst)
        stats.sent_messages += 1
        stats.sent_bytes += len(payload)
        depart = self.now
        rate = topo.pair_rate_limit(src, dst)
        if rate > 0:
            busy = self._pair_busy_until.get((src, dst), 0)
            start = max(depart, busy)
            tx_us = (len(payload) * 1_000_000) // rate
            depart = start + tx_us
            self._pair_busy_until[(src, dst)] = depart
        copies = 1
        if rng.random() < topo.pair_loss(src, dst):
            copies = 0
        if copies and rng.random() < topo.pair_duplication(src, dst):
            copies = 2
            stats.duplicated_messages += 1
        if copies == 0:
            stats.dropped_messages += 1
            # burn a jitter draw so loss does not shift later draws
            _ = rng.random()
            return
        base = topo.pair_latency(src, dst)
        jitter_bound = topo.pair_jitter(src, dst)
        for _ in range(copies):
            jitter = rng.randint(-jitter_bound, jitter_bound) if jitter_bound else 0
            deliver_at = max(depart + max(base + jitter, 0), self.now)
            self._push(deliver_at, dst, EVENT_MESSAGE, blocking,
                       (src, payload, self.now))

    def multicast(self, src: InstanceId, payload: bytes,
                  quiescence_relevant: bool = True) -> None:
        """Deliver to every attached instance except the sender,
        independently applying each pair's loss/jitter/duplication."""
        for dst in self.attached():
            if dst != src:
                self._transmit(src, dst, payload, quiescence_relevant)

    def unicast(self, src: InstanceId, dst: InstanceId, payload: bytes,
                quiescence_relevant: bool = True) -> None:
        if dst in self._receivers:
            self._transmit(src, dst, payload, quiescence_relevant)

    # -- event loop --------------------------------------------------------

    def _dispatch(self, event) -> None:
        at, dst, _, kind, blocking, payload = event
        if blocking:
            self._blocking_events -= 1
        self.now = at
        if kind == EVENT_MESSAGE:
            src, data, sent_at = payload
            receiver = self._receivers.get(dst)
            if receiver is None:
                self.diagnostics["undeliverable"] = \
                    self.diagnostics.get("undeliverable", 0) + 1
                return
            stats = self._stats(src, dst)
            stats.delivered_messages += 1
            stats.delivered_bytes += len(data)
            delay = at - sent_at
            stats.latency_sum_us += delay
            stats.latency_max_us = max(stats.latency_max_us, delay)
            receiver(src, data, at)
        else:
            payload()

    def run_until(self, t: int) -> None:
        while self._heap and self._heap[0][0] <= t:
            self._dispatch(heapq.heappop(self._heap))
        self.now = max(self.now, t)

    def run_to_quiescence(self, max_t: int,
                          drained: Optional[Callable[[], bool]] = None) -> bool:
        """Process events until nothing quiescence-relevant remains in
        flight and ``drained()`` reports all replication work settled, or
        ``max_t`` is reached. Returns True when quiescence was reached."""
        while self._heap and self._heap[0][0] <= max_t:
            if self._blocking_events == 0 and (drained is None or drained()):
                return True
            self._dispatch(heapq.heappop(self._heap))
        if self._blocking_events == 0 and (drained is None or drained()):
            return True
        return False

    def pending_events(self) -> int:
        return len(self._heap)

    def total_sent_bytes(self) -> int:
        return sum(s.sent_bytes for s in self.pair_stats.values())

    def total_delivered_bytes(self) -> int:
        return sum(s.delivered_bytes for s in self.pair_stats.values())
