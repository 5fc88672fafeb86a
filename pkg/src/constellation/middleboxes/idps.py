"""Port-scan/flood detection and mitigation.

Per-destination-port traffic volume is tracked in bits; once an instance's
local view of a port's volume reaches the threshold it adds the port to a
replicated blocked set and drops its subsequent traffic. Counting uses
exact per-port counters when the port space is small (a counter vector) or
a count-min sketch for large spaces (which also exercises the
ordered-delivery path).

Asynchrony means an instance's view lags its peers by the state-channel
delay, so packets keep passing briefly after the aggregate volume has
crossed the threshold; the harness counts those as leaked against a
centralized replay.
"""

from __future__ import annotations

from ..objects import CounterVector, CountMinSketch, ORSet
from .packet import DROPPED, Middlebox, Packet, PASSED, Verdict

MODE_EXACT = "exact"
MODE_SKETCH = "sketch"


class Idps(Middlebox):
    def __init__(self, instance, counters_id: int, blocked_id: int,
                 threshold_bits: int, mode: str = MODE_EXACT,
                 port_space: int = 65536, sketch_k: int = 4,
                 sketch_n: int = 2048):
        super().__init__(instance)
        self.threshold_bits = threshold_bits
        self.mode = mode
        if mode == MODE_EXACT:
            self.counters = CounterVector(counters_id, port_space)
        elif mode == MODE_SKETCH:
            self.counters = CountMinSketch(counters_id, k=sketch_k, n=sketch_n)
        else:
            raise ValueError(f"unknown idps mode {mode!r}")
        self.blocked = ORSet(blocked_id, instance.instance_id)
        instance.register(self.counters)
        instance.register(self.blocked)

    def _port_volume(self, port: int) -> int:
        if self.mode == MODE_EXACT:
            return self.counters.value(port)
        return self.counters.value(port.to_bytes(2, "big"))

    def _count(self, port: int, bits: int) -> None:
        if self.mode == MODE_EXACT:
            self.counters.update(port, bits)
        else:
            self.counters.count(port.to_bytes(2, "big"), bits)

    def is_blocked(self, port: int) -> bool:
        return self.blocked.contains(port.to_bytes(2, "big"))

    def handle(self, pkt: Packet, now: int) -> Verdict:
        port = pkt.key.dst_port
        if self.is_blocked(port):
            return DROPPED
        self._count(port, pkt.length * 8)
        if self._port_volume(port) >= self.threshold_bits:
            self.blocked.add(port.to_bytes(2, "big"))
        return PASSED
