"""One middlebox instance: objects + log store + replication + membership.

The instance owns a single periodic tick that runs the send cycle
(retransmissions, pending acknowledgements, round-robin data, keep-alives)
and reacts to incoming datagrams inline. Local packet processing and remote
record application interleave only at event boundaries, so every object
sees one logical mutator.

A joining instance starts in buffering mode: incoming records are tracked
for acknowledgement purposes and stashed, the snapshot is pulled from the
donor in chunks, and the stash is replayed through the normal application
path afterwards (per-origin sequence tracking makes the replay skip
anything the snapshot already covered).
"""

from __future__ import annotations

from typing import Callable, Optional

from . import membership as mb
from .log_store import LogStore
from .membership import MembershipView, ObjectSnapshot, Snapshot
from .objects.base import StateObject
from .replication import RecvTracker, ReplicationConfig, ReplicationEngine
from .simnet import Simulator
from .types import InstanceId, ObjectId, ProtocolError, SnapshotError
from .wire import (FLAG_JOIN, FLAG_KEEPALIVE, FLAG_LEAVE, FLAG_SNAP_CHUNK,
                   FLAG_SNAP_REQ, StateMessage)

PENDING_UNKNOWN_CAP = 256


def snapshot_pause_us(blob_bytes: int) -> int:
    """Virtual cost of the atomic in-process state copy."""
    return max(1, (blob_bytes * mb.SNAP_PAUSE_US_PER_KB) // 1024)


class Instance:
    def __init__(self, instance_id: InstanceId, sim: Simulator,
                 config: Optional[ReplicationConfig] = None,
                 orchestrator=None):
        self.instance_id = instance_id
        self.sim = sim
        self.config = config or ReplicationConfig()
        self.orchestrator = orchestrator
        self.store = LogStore()
        self.engine = ReplicationEngine(instance_id, self.store, self.config)
        self.view = MembershipView()
        self.departed: set[InstanceId] = set()
        self.alive = True
        self.middlebox = None
        self.diagnostics: dict[str, int] = {}
        self.paused_until = 0
        self.pause_windows: list[tuple[int, int]] = []
        self.op_trace_hook: Optional[Callable] = None

        # joiner state
        self.buffering = False
        self._join_donor: Optional[InstanceId] = None
        self._join_expect: set[InstanceId] = set()
        self._join_confirmed: set[InstanceId] = set()
        self._join_acking = False
        self._stash: list[tuple[InstanceId, ObjectId, object]] = []
        self._stash_messages = 0
        self._snap_parts: dict[int, bytes] = {}
        self._snap_total: Optional[int] = None
        self._snap_requested = False
        self.join_finished_at: Optional[int] = None

        # leaver state
        self.leaving = False
        self._leave_expect: set[InstanceId] = set()
        self._leave_acked: set[InstanceId] = set()
        self._leave_announced = False

        # donor state: one prepared snapshot per joiner
        self._served_snapshots: dict[InstanceId, bytes] = {}

        self._pending_unknown: list[tuple[InstanceId, bytes]] = []
        sim.attach(instance_id, self.on_datagram)

    def diag(self, name: str) -> None:
        self.diagnostics[name] = self.diagnostics.get(name, 0) + 1

    # -- setup ---------------------------------------------------------------

    def register(self, obj: StateObject) -> None:
        self.engine.register(obj)
        if self.op_trace_hook is not None:
            self._wrap_trace(obj)

    def _wrap_trace(self, obj: StateObject) -> None:
        inner = obj._recorder

        def traced(op, _oid=obj.object_id):
            self.op_trace_hook(self.instance_id, _oid, op, self.sim.now)
            inner(op)

        obj.bind(traced)

    def set_trace_hook(self, hook: Callable) -> None:
        """Capture every locally recorded operation (for oracle replays)."""
        self.op_trace_hook = hook
        for obj in self.engine.objects.values():
            self._wrap_trace(obj)

    def bootstrap_view(self, active: set[InstanceId], epoch: int = 0) -> None:
        self.view = MembershipView(active=set(active), epoch=epoch)
        for peer in active:
            if peer != self.instance_id:
                self.engine.add_peer(peer)

    def set_middlebox(self, middlebox) -> None:
        self.middlebox = middlebox

    def start(self, first_tick: Optional[int] = None) -> None:
        at = self.sim.now + self.config.send_interval_us if first_tick is None else first_tick
        self.sim.call_at(at, self._tick, owner=self.instance_id, timer=True)

    # -- periodic work ---------------------------------------------------------

    def _tick(self) -> None:
        if not self.alive:
            return
        now = self.sim.now
        if now >= self.paused_until:
            for msg in self.engine.send_cycle(now):
                self._transmit(msg)
            self._membership_retries(now)
        self.sim.call_at(now + self.config.send_interval_us, self._tick,
                         owner=self.instance_id, timer=True)

    def _transmit(self, msg: StateMessage) -> None:
        self.sim.multicast(self.instance_id, msg.encode(),
                           quiescence_relevant=msg.quiescence_relevant())

    def _unicast(self, dst: InstanceId, msg: StateMessage) -> None:
        self.sim.unicast(self.instance_id, dst, msg.encode(),
                         quiescence_relevant=msg.quiescence_relevant())

    # -- packet path -------------------------------------------------------------

    def process_packet(self, pkt):
        """Run one packet through the attached middlebox; deferred while the
        instance is paused for a snapshot copy."""
        if not self.alive or self.middlebox is None:
            self.diag("packets_while_down")
            return None
        now = self.sim.now
        if now < self.paused_until:
            self.sim.call_at(self.paused_until, lambda: self.process_packet(pkt),
                             owner=self.instance_id)
            return None
        return self.middlebox.process(pkt, now)

    # -- receive path --------------------------------------------------------------

    def on_datagram(self, src: InstanceId, data: bytes, now: int) -> None:
        if not self.alive:
            return
        if now < self.paused_until:
            self.sim.call_at(self.paused_until,
                             lambda: self.on_datagram(src, data, self.paused_until),
                             owner=self.instance_id)
            return
        try:
            msg = StateMessage.decode(data)
        except ProtocolError:
            self.diag("protocol_errors")
            return
        self._handle_message(msg, now)

    def _handle_message(self, msg: StateMessage, now: int) -> None:
        sender = msg.sender
        if msg.flags & FLAG_JOIN:
            self._on_join(sender)
            return
        if msg.flags & FLAG_LEAVE:
            if msg.flags & FLAG_KEEPALIVE:
                self._on_leave_ack(sender)
            else:
                self._on_leave(sender, now)
            return
        if not self.view.known(sender):
            if sender in self.departed:
                self.diag("dropped_departed_sender")
            elif len(self._pending_unknown) >= PENDING_UNKNOWN_CAP:
                self.diag("dropped_unknown_sender")
            else:
                self._pending_unknown.append((sender, msg.encode()))
            return
        if msg.flags & FLAG_SNAP_REQ:
            self._serve_snapshot(sender, msg.snap_offset, now)
            return
        if msg.flags & FLAG_SNAP_CHUNK:
            self._on_snap_chunk(msg, now)
            return
        if self.buffering:
            self._buffer_message(msg, now)
            return
        if self.join_finished_at is None and self._join_donor is not None:
            self._note_confirmations(msg)
        for reply in self.engine.on_message(msg, now):
            self._transmit(reply)

    def _drain_pending_unknown(self) -> None:
        pending, self._pending_unknown = self._pending_unknown, []
        for sender, data in pending:
            if self.view.known(sender):
                self.on_datagram(sender, data, self.sim.now)
            elif sender in self.departed:
                self.diag("dropped_departed_sender")
            else:
                self._pending_unknown.append((sender, data))

    # -- membership: peer side --------------------------------------------------

    def _on_join(self, joiner: InstanceId) -> None:
        if joiner == self.instance_id or joiner in self.view.active:
            return
        if self.view.start_join(joiner):
            self.departed.discard(joiner)
            self.engine.add_peer(joiner)
            self._drain_pending_unknown()
        # confirmation rides the acknowledgement vectors of state messages;
        # nudge every group so an idle channel still confirms quickly
        for object_id in self.engine.objects:
            self.engine._ack_pending.add(object_id)

    def _on_leave(self, leaver: InstanceId, now: int) -> None:
        if self.view.known(leaver):
            self.view.remove(leaver)
            self.departed.add(leaver)
            self.engine.remove_peer(leaver)
        ack = StateMessage(sender=self.instance_id, object_id=0,
                           flags=FLAG_LEAVE | FLAG_KEEPALIVE, send_timestamp=now)
        self._unicast(leaver, ack)

    def activate_member(self, joiner: InstanceId) -> None:
        """Orchestrator notification: the joiner finished catching up."""
        if self.instance_id == joiner:
            self.view.activate(joiner)
            return
        self.view.activate(joiner)
        self.engine.add_peer(joiner)

    # -- membership: joiner side ----------------------------------------------------

    def begin_join(self, donor: InstanceId, existing: set[InstanceId],
                   bootstrap_epoch: int) -> None:
        self.buffering = True
        self._join_donor = donor
        self._join_expect = set(existing)
        self.view = MembershipView(active=set(existing), epoch=bootstrap_epoch)
        self.view.start_join(self.instance_id)
        for peer in existing:
            self.engine.add_peer(peer)
        self._send_join()
        self.start()

    def _send_join(self) -> None:
        msg = StateMessage(sender=self.instance_id, object_id=0,
                           flags=FLAG_JOIN, send_timestamp=self.sim.now)
        self._transmit(msg)

    def _membership_retries(self, now: int) -> None:
        if self._join_donor is not None and self.join_finished_at is None:
            if self._join_confirmed < self._join_expect:
                if now % mb.JOIN_RETRY_US < self.config.send_interval_us:
                    self._send_join()
            elif self._snap_total is None:
                if not self._snap_requested or now % mb.SNAP_RETRY_US < self.config.send_interval_us:
                    self._request_snapshot(0)
            else:
                missing = self._first_missing_offset()
                if missing is not None and now % mb.SNAP_RETRY_US < self.config.send_interval_us:
                    self._request_snapshot(missing)
        if self.leaving and self._leave_announced:
            expect = self._leave_expect - self._leave_acked
            if expect and now % mb.LEAVE_RETRY_US < self.config.send_interval_us:
                self._send_leave()

    def _note_confirmations(self, msg: StateMessage) -> None:
        if self.instance_id in msg.acks and msg.sender in self._join_expect:
            self._join_confirmed.add(msg.sender)

    def _buffer_message(self, msg: StateMessage, now: int) -> None:
        self._note_confirmations(msg)
        if msg.records:
            if self._stash_messages >= mb.JOIN_BUFFER_CAP:
                self._abort_join("join buffer overflow")
                return
            self._stash_messages += 1
            for record in msg.records:
                tracker = self.engine._tracker(msg.object_id, msg.sender)
                if not tracker.covered(record.first_seq, record.seq):
                    tracker.mark(record.first_seq, record.seq)
                    self._stash.append((msg.sender, msg.object_id, record))
            if self._join_acking or self._join_confirmed >= self._join_expect:
                self._join_acking = True
                self.engine._ack_pending.add(msg.object_id)

    def _request_snapshot(self, offset: int) -> None:
        if self._join_donor is None:
            return
        self._snap_requested = True
        msg = StateMessage(sender=self.instance_id, object_id=0,
                           flags=FLAG_SNAP_REQ, snap_offset=offset,
                           send_timestamp=self.sim.now)
        self._unicast(self._join_donor, msg)

    def _first_missing_offset(self) -> Optional[int]:
        assert self._snap_total is not None
        covered = 0
        for offset in sorted(self._snap_parts):
            if offset > covered:
                return covered
            covered = max(covered, offset + len(self._snap_parts[offset]))
        return None if covered >= self._snap_total else covered

    def _on_snap_chunk(self, msg: StateMessage, now: int) -> None:
        if not self.buffering or msg.sender != self._join_donor:
            return
        self._snap_total = msg.snap_total
        self._snap_parts.setdefault(msg.snap_offset, msg.snap_payload)
        if self._first_missing_offset() is None:
            blob = b"".join(part for _, part in sorted(self._snap_parts.items()))
            blob = blob[:self._snap_total]
            try:
                self._finish_join(Snapshot.decode(blob), now)
            except SnapshotError as exc:
                self._abort_join(str(exc))

    def _finish_join(self, snapshot: Snapshot, now: int) -> None:
        engine = self.engine
        snap_acks: dict[tuple[ObjectId, InstanceId], tuple[int, tuple[int, ...]]] = {}
        for osnap in snapshot.objects:
            obj = engine.objects.get(osnap.object_id)
            if obj is None:
                self._abort_join(f"snapshot for unregistered object {osnap.object_id}")
                return
            if obj.config_digest() != osnap.config_digest:
                self._abort_join(f"configuration mismatch for object {osnap.object_id}")
                return
            obj.restore(osnap.state)
            for origin, acked in osnap.acks.items():
                if origin == self.instance_id:
                    # recycled identifier: our sequence numbers resume where
                    # the departed instance's stream ended
                    log = self.store.log(osnap.object_id)
                    log.next_seq = acked + 1
                    log.min_acked = acked
                    engine._last_sent_seq[osnap.object_id] = acked
                else:
                    snap_acks[(osnap.object_id, origin)] = \
                        (acked, osnap.extras.get(origin, ()))
        # During buffering the trackers counted *received* records; reset
        # them to the snapshot cut and let the replay re-mark what it applies.
        for key in set(engine.recv) | set(snap_acks):
            acked, extras = snap_acks.get(key, (0, ()))
            tracker = RecvTracker(acked)
            tracker.extra = set(extras)
            engine.recv[key] = tracker
        self.buffering = False
        stash, self._stash = self._stash, []
        stash.sort(key=lambda item: (item[0], item[1], item[2].seq))
        for origin, object_id, record in stash:
            # normal application path: snapshot-covered records fall out as
            # duplicates, gaps wait in the reorder buffer for retransmission
            engine._apply_records(object_id, origin, [record])
        self.join_finished_at = now
        if self.orchestrator is not None:
            self.orchestrator.join_complete(self.instance_id, now)

    def _abort_join(self, reason: str) -> None:
        self.buffering = False
        self.alive = False
        self.sim.detach(self.instance_id)
        if self.orchestrator is not None:
            self.orchestrator.join_failed(self.instance_id, reason)

    # -- membership: donor side -----------------------------------------------------

    def _serve_snapshot(self, requester: InstanceId, offset: int, now: int) -> None:
        # One consistent cut per joiner: retried requests re-serve the same
        # blob, otherwise chunks from different cuts could be mixed.
        blob = self._served_snapshots.get(requester)
        if blob is None:
            blob = self._take_snapshot(now)
            self._served_snapshots[requester] = blob
        chunk = mb.SNAP_CHUNK_PAYLOAD
        position = offset
        while position < len(blob):
            payload = blob[position:position + chunk]
            msg = StateMessage(sender=self.instance_id, object_id=0,
                               flags=FLAG_SNAP_CHUNK, snap_offset=position,
                               snap_total=len(blob), snap_payload=payload,
                               send_timestamp=now)
            self._unicast(requester, msg)
            position += chunk

    def _take_snapshot(self, now: int) -> bytes:
        """Atomic in-process copy of every object plus its acknowledgement
        vector; the data path pauses for a window proportional to the copy."""
        # Ship everything not yet transmitted so no later coalesced run can
        # straddle the cut: the snapshot covers these records' effects, and
        # a run crossing the boundary would half-overlap what the snapshot
        # already told the joiner it has.
        for object_id in self.engine.objects:
            for msg in self.engine._emit_unsent(object_id, now, force_flush=True):
                self._transmit(msg)
        objects = []
        for object_id in sorted(self.engine.objects):
            obj = self.engine.objects[object_id]
            extras = {}
            for origin in self.engine.peers:
                tracker = self.engine.recv.get((object_id, origin))
                if tracker is not None and tracker.extra:
                    extras[origin] = tuple(sorted(tracker.extra))
            objects.append(ObjectSnapshot(object_id, obj.config_digest(),
                                          obj.snapshot(),
                                          self.engine.ack_vector(object_id),
                                          extras))
        blob = Snapshot(self.view.epoch, objects).encode()
        pause = snapshot_pause_us(len(blob))
        self.paused_until = max(self.paused_until, now + pause)
        self.pause_windows.append((now, pause, len(blob)))
        return blob

    # -- membership: leaver side ------------------------------------------------------

    def begin_leave(self) -> None:
        self.leaving = True
        grace = max(int(2 * self.engine._max_ewma_us()), 2 * self.config.rto_floor_us)
        self.sim.call_at(self.sim.now + grace, self._drain_then_leave,
                         owner=self.instance_id)

    def _drain_then_leave(self) -> None:
        if not self.alive:
            return
        if self.engine.store.all_drained():
            self._leave_expect = {p for p in self.view.active if p != self.instance_id}
            self._leave_announced = True
            if not self._leave_expect:
                self._leave_done()
                return
            self._send_leave()
        else:
            self.sim.call_at(self.sim.now + mb.DRAIN_CHECK_US,
                             self._drain_then_leave, owner=self.instance_id)

    def _send_leave(self) -> None:
        msg = StateMessage(sender=self.instance_id, object_id=0,
                           flags=FLAG_LEAVE, send_timestamp=self.sim.now)
        self._transmit(msg)

    def _on_leave_ack(self, peer: InstanceId) -> None:
        if not self.leaving:
            return
        self._leave_acked.add(peer)
        if self._leave_expect and self._leave_expect <= self._leave_acked:
            self._leave_done()

    def _leave_done(self) -> None:
        if self.orchestrator is not None:
            self.orchestrator.leave_complete(self.instance_id, self.sim.now)
        else:
            self.reclaim()

    def reclaim(self) -> None:
        self.alive = False
        self.sim.detach(self.instance_id)

    # -- quiescence --------------------------------------------------------------------

    def query_digest(self) -> bytes:
        """All registered objects' query digests, in object-id order."""
        return b"|".join(self.engine.objects[oid].query_digest()
                         for oid in sorted(self.engine.objects))

    def drained(self) -> bool:
        if not self.alive:
            return True
        if self.buffering or self._pending_unknown:
            return False
        if self.leaving and self._leave_expect - self._leave_acked:
            return False
        return self.engine.drained()
