"""Deterministic traffic generation.

Generators pace themselves on the virtual clock (rate-derived inter-arrival
plus seeded jitter) and feed packets to whichever instance they are
currently assigned to, so the orchestrator-driven reroutes of scaling
events are just assignment changes.
"""

from __future__ import annotations

import random
from typing import Callable, Optional

from ..middleboxes.packet import DIR_IN, DIR_OUT, Packet
from ..types import FlowKey


class FlowGenerator:
    """Opens new flows at a fixed rate; each flow emits a burst of outbound
    packets (and optionally a later inbound response through a different
    instance, exercising asymmetric routing)."""

    def __init__(self, sim, name: int, seed: int, rate_per_sec: int,
                 packets_per_flow: int, packet_size: int,
                 target: Callable[[], Optional[object]],
                 response_target: Optional[Callable[[], Optional[object]]] = None,
                 stop_at: Optional[int] = None):
        self.sim = sim
        self.rng = random.Random(f"flowgen:{seed}:{name}")
        self.name = name
        self.rate = rate_per_sec
        self.packets_per_flow = packets_per_flow
        self.packet_size = packet_size
        self.target = target
        self.response_target = response_target
        self.stop_at = stop_at
        self.flows_opened = 0

    def start(self, at: int) -> None:
        self.sim.call_at(at, self._next_flow, owner=0)

    def _gap_us(self) -> int:
        base = 1_000_000 // self.rate
        return max(1, base + self.rng.randint(-base // 4, base // 4))

    def _next_flow(self) -> None:
        now = self.sim.now
        if self.stop_at is not None and now >= self.stop_at:
            return
        key = FlowKey(self.rng.randrange(2**32), self.rng.randrange(2**32),
                      self.rng.randrange(1024, 2**16), self.rng.randrange(1, 2**16),
                      6)
        self.flows_opened += 1
        for i in range(self.packets_per_flow):
            self.sim.call_at(now + i * 50, self._deliver(key, DIR_OUT), owner=0)
        if self.response_target is not None:
            self.sim.call_at(now + 2_000, self._deliver_response(key), owner=0)
        self.sim.call_at(now + self._gap_us(), self._next_flow, owner=0)

    def _deliver(self, key: FlowKey, direction: int):
        def run():
            instance = self.target()
            if instance is not None:
                instance.process_packet(Packet(key, self.packet_size, direction,
                                               self.sim.now))
        return run

    def _deliver_response(self, key: FlowKey):
        def run():
            instance = self.response_target()
            if instance is not None:
                instance.process_packet(Packet(key.reversed(), self.packet_size,
                                               DIR_IN, self.sim.now))
        return run


class FloodGenerator:
    """Constant-rate packets to one destination port (the IDPS flood)."""

    def __init__(self, sim, name: int, seed: int, rate_per_sec: int,
                 packet_size: int, dst_port: int,
                 target: Callable[[], Optional[object]],
                 stop_at: Optional[int] = None,
                 on_packet: Optional[Callable] = None):
        self.sim = sim
        self.rng = random.Random(f"flood:{seed}:{name}")
        self.rate = rate_per_sec
        self.packet_size = packet_size
        self.dst_port = dst_port
        self.target = target
        self.stop_at = stop_at
        self.on_packet = on_packet
        self.sent = 0

    def start(self, at: int) -> None:
        self.sim.call_at(at, self._next, owner=0)

    def _next(self) -> None:
        now = self.sim.now
        if self.stop_at is not None and now >= self.stop_at:
            return
        key = FlowKey(self.rng.randrange(2**32), 0x0B000001,
                      self.rng.randrange(1024, 2**16), self.dst_port, 17)
        instance = self.target()
        if instance is not None:
            pkt = Packet(key, self.packet_size, DIR_OUT, now)
            self.sent += 1
            if self.on_packet is not None:
                self.on_packet(instance, pkt)
            instance.process_packet(pkt)
        base = 1_000_000 // self.rate
        gap = max(1, base + self.rng.randint(-base // 5, base // 5))
        self.sim.call_at(now + gap, self._next, owner=0)
