"""Cluster membership: views, state snapshots, and the orchestrator.

Scaling events are driven by a logically centralized orchestrator (one
event in flight at a time) but take effect through the data path: a joiner
multicasts ``join`` until every existing instance has confirmed it (by
carrying the joiner in its advertised acknowledgement vectors), copies a
snapshot from one donor, replays what it buffered meanwhile, and only then
receives traffic. A leaver drains its log, multicasts ``leave`` until every
peer acknowledged, and is then reclaimed.

A snapshot is a single consistent cut of the donor: every object's state
plus that object's acknowledgement vector, tagged with the view epoch.
Instance identifiers of departed members may be reused; the snapshot's
acknowledgement vector tells the recycled instance where its sequence
numbers must resume so peers keep deduplicating correctly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .types import InstanceId, ObjectId, SnapshotError

JOIN_RETRY_US = 10_000
SNAP_RETRY_US = 10_000
LEAVE_RETRY_US = 10_000
DRAIN_CHECK_US = 1_000
JOIN_BUFFER_CAP = 2**16
SNAP_CHUNK_PAYLOAD = 1024
SNAP_PAUSE_US_PER_KB = 10


@dataclass
class MembershipView:
    active: set[InstanceId] = field(default_factory=set)
    joining: set[InstanceId] = field(default_factory=set)
    epoch: int = 0

    def known(self, instance: InstanceId) -> bool:
        return instance in self.active or instance in self.joining

    def start_join(self, instance: InstanceId) -> bool:
        if self.known(instance):
            return False
        self.joining.add(instance)
        self.epoch += 1
        return True

    def activate(self, instance: InstanceId) -> bool:
        if instance in self.active:
            return False
        self.joining.discard(instance)
        self.active.add(instance)
        self.epoch += 1
        return True

    def remove(self, instance: InstanceId) -> bool:
        if not self.known(instance):
            return False
        self.active.discard(instance)
        self.joining.discard(instance)
        self.epoch += 1
        return True

    def as_tuple(self) -> tuple:
        return (tuple(sorted(self.active)), tuple(sorted(self.joining)), self.epoch)


@dataclass
class ObjectSnapshot:
    object_id: ObjectId
    config_digest: bytes
    state: bytes
    # Per origin: highest contiguous applied seq plus any sequence numbers
    # applied out of order above it. The contiguous value alone would let a
    # retransmission re-apply an out-of-order record already reflected in
    # the state.
    acks: dict[InstanceId, int]
    extras: dict[InstanceId, tuple[int, ...]] = field(default_factory=dict)


@dataclass
class Snapshot:
    epoch: int
    objects: list[ObjectSnapshot]

    def encode(self) -> bytes:
        parts = [struct.pack(">QI", self.epoch, len(self.objects))]
        for snap in self.objects:
            parts.append(struct.pack(">IHIH",
                                     snap.object_id, len(snap.config_digest),
                                     len(snap.state), len(snap.acks)))
            parts.append(snap.config_digest)
            parts.append(snap.state)
            for instance in sorted(snap.acks):
                extras = sorted(snap.extras.get(instance, ()))
                parts.append(struct.pack(">HQH", instance,
                                         snap.acks[instance], len(extras)))
                parts += [struct.pack(">Q", s) for s in extras]
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "Snapshot":
        try:
            epoch, count = struct.unpack_from(">QI", data, 0)
            offset = 12
            objects = []
            for _ in range(count):
                object_id, digest_len, state_len, ack_count = \
                    struct.unpack_from(">IHIH", data, offset)
                offset += 12
                digest = data[offset:offset + digest_len]
                offset += digest_len
                state = data[offset:offset + state_len]
                offset += state_len
                if len(digest) != digest_len or len(state) != state_len:
                    raise SnapshotError("truncated snapshot")
                acks: dict[InstanceId, int] = {}
                extras: dict[InstanceId, tuple[int, ...]] = {}
                for _ in range(ack_count):
                    instance, seq, n_extra = struct.unpack_from(">HQH", data, offset)
                    offset += 12
                    acks[instance] = seq
                    if n_extra:
                        extras[instance] = struct.unpack_from(f">{n_extra}Q", data, offset)
                        offset += 8 * n_extra
                objects.append(ObjectSnapshot(object_id, digest, state, acks, extras))
            if offset != len(data):
                raise SnapshotError("trailing bytes in snapshot")
            return cls(epoch, objects)
        except struct.error as exc:
            raise SnapshotError(f"bad snapshot: {exc}") from exc


class Orchestrator:
    """Fault-tolerant control plane stand-in: assigns unique identifiers,
    serializes scaling events, and relays view activations out of band."""

    def __init__(self):
        self.instances: dict[InstanceId, object] = {}
        self.view = MembershipView()
        self.departed: list[InstanceId] = []
        self._next_id = 1
        self.event_in_progress: Optional[str] = None
        self.join_errors: list[str] = []
        self.event_log: list[tuple] = []
        self.on_join_complete = None
        self.on_leave_complete = None

    def allocate_id(self, recycle: bool = False) -> InstanceId:
        """New unique identifier, optionally reusing a departed one."""
        if recycle and self.departed:
            return self.departed.pop(0)
        instance_id = self._next_id
        self._next_id += 1
        return instance_id

    def register_initial(self, instance) -> None:
        self.instances[instance.instance_id] = instance
        self.view.active.add(instance.instance_id)

    def idle(self) -> bool:
        return self.event_in_progress is None

    # -- scale-out ---------------------------------------------------------

    def scale_out(self, joiner, donor_id: InstanceId) -> None:
        """Step 1 of the join: deploy the (already constructed) instance
        and let it announce itself. Completion arrives via join_complete."""
        assert self.event_in_progress is None, "membership events are serialized"
        self.event_in_progress = f"join:{joiner.instance_id}"
        self.instances[joiner.instance_id] = joiner
        bootstrap_epoch = self.view.epoch
        self.view.start_join(joiner.instance_id)
        joiner.begin_join(donor_id, set(self.view.active), bootstrap_epoch)

    def join_complete(self, joiner_id: InstanceId, now: int) -> None:
        self.view.activate(joiner_id)
        for instance in self.instances.values():
            if instance.alive:
                instance.activate_member(joiner_id)
        self.event_in_progress = None
        self.event_log.append(("join", joiner_id, now))
        if self.on_join_complete is not None:
            self.on_join_complete(joiner_id, now)

    def join_failed(self, joiner_id: InstanceId, reason: str) -> None:
        self.join_errors.append(f"{joiner_id}: {reason}")
        self.view.remove(joiner_id)
        self.instances.pop(joiner_id, None)
        self.event_in_progress = None

    # -- scale-in ----------------------------------------------------------

    def scale_in(self, victim_id: InstanceId) -> None:
        assert self.event_in_progress is None, "membership events are serialized"
        self.event_in_progress = f"leave:{victim_id}"
        self.instances[victim_id].begin_leave()

    def leave_complete(self, victim_id: InstanceId, now: int) -> None:
        self.view.remove(victim_id)
        victim = self.instances.pop(victim_id, None)
        if victim is not None:
            victim.reclaim()
        self.departed.append(victim_id)
        self.event_in_progress = None
        self.event_log.append(("leave", victim_id, now))
        if self.on_leave_complete is not None:
            self.on_leave_complete(victim_id, now)
