"""Synthetic packet model and the middlebox verdict stream."""

from __future__ import annotations

from dataclasses import dataclass

from ..types import FlowKey

DIR_OUT = 0  # inside -> outside
DIR_IN = 1   # outside -> inside

MIN_PACKET = 40  # headers


@dataclass(frozen=True)
class Packet:
    key: FlowKey
    length: int = 64
    direction: int = DIR_OUT
    arrival: int = 0

    def __post_init__(self):
        if self.length < MIN_PACKET:
            raise ValueError(f"packet shorter than headers ({self.length})")


@dataclass(frozen=True)
class Verdict:
    action: str               # passed | dropped | translated | reset
    port: int | None = None   # translated public port, when applicable

    def __str__(self) -> str:
        if self.action == "translated":
            return f"translated:{self.port}"
        return self.action


PASSED = Verdict("passed")
DROPPED = Verdict("dropped")
RESET = Verdict("reset")


class Middlebox:
    """Base: processes packets against replicated objects and records one
    verdict line per packet (virtual_time, instance, flow, verdict)."""

    def __init__(self, instance):
        self.instance = instance
        self.verdicts: list[tuple[int, int, str, str]] = []

    def log_verdict(self, now: int, pkt: Packet, verdict: Verdict) -> None:
        self.verdicts.append((now, self.instance.instance_id,
                              str(pkt.key), str(verdict)))

    def process(self, pkt: Packet, now: int) -> Verdict:
        verdict = self.handle(pkt, now)
        self.log_verdict(now, pkt, verdict)
        return verdict

    def handle(self, pkt: Packet, now: int) -> Verdict:
        raise NotImplementedError
