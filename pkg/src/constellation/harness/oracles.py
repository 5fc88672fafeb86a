"""Independent oracles the experiments are judged against.

The sequential oracle replays every locally recorded operation, from all
instances, onto a fresh object graph in one deterministic order. Since the
replicas were driven through batching, coalescing, loss, reordering and
duplication while the oracle saw none of it, agreement between the two is
the convergence verdict.

The centralized replay is the idealized single-box filter the leaked-packet
metric is defined against: it sees the aggregate packet trace with no
replication delay and blocks at the exact threshold-crossing instant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from ..types import InstanceId, ObjectId, Operation


@dataclass(frozen=True)
class TraceOp:
    time: int
    instance: InstanceId
    index: int
    object_id: ObjectId
    op: Operation


class OpTrace:
    """Global capture of locally recorded operations, in recording order."""

    def __init__(self):
        self.ops: list[TraceOp] = []

    def hook(self, instance: InstanceId, object_id: ObjectId, op: Operation,
             now: int) -> None:
        self.ops.append(TraceOp(now, instance, len(self.ops), object_id, op))

    def replay(self, objects: dict[ObjectId, object]) -> None:
        """Apply every traced operation once, ordered by (time, instance,
        recording index), onto the given fresh object graph."""
        for item in sorted(self.ops, key=lambda t: (t.time, t.instance, t.index)):
            obj = objects.get(item.object_id)
            if obj is not None:
                obj.apply(item.op)

    def count_for(self, instance: InstanceId) -> int:
        return sum(1 for t in self.ops if t.instance == instance)


@dataclass
class CentralizedVerdict:
    t_star: Optional[int]                  # aggregate threshold-crossing instant
    leaked: dict[InstanceId, int]          # simulated-style leak per instance
    expected: dict[InstanceId, float]      # replay expectation per instance


def centralized_idps_replay(arrivals: list[tuple[int, InstanceId, int]],
                            threshold_bits: int,
                            one_way_delay_us: int) -> CentralizedVerdict:
    """Replay the aggregate packet trace through the centralized filter and
    through an idealized distributed deployment whose only imperfection is
    the state-channel delay.

    ``arrivals`` rows are (arrival_us, instance, packet_bits) for one
    flooded port, already merged across instances.

    The idealized instance mirrors the real packet path: a packet already
    visible as blocked (locally, or at a peer at least one delay earlier)
    is dropped before counting; otherwise it is counted, and the packet
    whose count reaches the threshold still passes but blocks everything
    after it. Remote packet volume becomes visible one delay after its
    arrival. Expected leak per instance is its packets passed strictly
    after the centralized crossing instant.
    """
    trace = sorted(arrivals, key=lambda r: (r[0], r[1]))
    cumulative = 0
    t_star = None
    for at, _, bits in trace:
        cumulative += bits
        if cumulative >= threshold_bits:
            t_star = at
            break
    instances = sorted({inst for _, inst, _ in trace})
    if t_star is None:
        return CentralizedVerdict(None, {i: 0 for i in instances},
                                  {i: 0.0 for i in instances})

    def replay_instance(inst: InstanceId,
                        peer_blocks: dict[InstanceId, Optional[int]]
                        ) -> tuple[Optional[int], int]:
        """Walk the instance's packet path; returns (instant its own
        blocked entry appears, packets passed after t_star)."""
        remote = sorted((at + one_way_delay_us, bits)
                        for at, src, bits in trace if src != inst)
        visible_peer = min((b + one_way_delay_us
                            for j, b in peer_blocks.items()
                            if j != inst and b is not None), default=None)
        view = 0
        r_idx = 0
        leaked = 0
        for at, src, bits in trace:
            if src != inst:
                continue
            if visible_peer is not None and visible_peer <= at:
                return visible_peer, leaked  # dropped before counting
            while r_idx < len(remote) and remote[r_idx][0] <= at:
                view += remote[r_idx][1]
                r_idx += 1
            view += bits
            passed_after = at > t_star
            if view >= threshold_bits:
                if passed_after:
                    leaked += 1  # the crossing packet itself still passes
                return at, leaked
            if passed_after:
                leaked += 1
        return None, leaked

    blocks: dict[InstanceId, Optional[int]] = {i: None for i in instances}
    expected: dict[InstanceId, float] = {}
    # two rounds reach the fixed point: blocks only move earlier when a
    # peer's earlier block becomes visible
    for _ in range(2):
        next_blocks = {}
        for inst in instances:
            when, leaked = replay_instance(inst, blocks)
            next_blocks[inst] = when
            expected[inst] = float(leaked)
        blocks = next_blocks
    return CentralizedVerdict(t_star, {}, expected)


def leaked_after(verdicts: Iterable[tuple[int, InstanceId, str, str]],
                 t_star: Optional[int]) -> dict[InstanceId, int]:
    """Count packets each instance passed strictly after the centralized
    crossing instant."""
    leaked: dict[InstanceId, int] = {}
    for at, inst, _flow, verdict in verdicts:
        leaked.setdefault(inst, 0)
        if t_star is not None and verdict == "passed" and at > t_star:
            leaked[inst] += 1
    return leaked
