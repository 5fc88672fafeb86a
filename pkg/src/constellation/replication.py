"""Reliable multicast of log records between instances.

The engine owns the or-else of asynchronous replication: a send side that
round-robins over object queues, batches outstanding records into
datagram-sized state messages, and retransmits unacknowledged ones; and a
receive side that applies records exactly once per origin (in sequence
order for kinds that require it), maintains per-object acknowledgement
vectors, and prunes the local log up to the smallest peer acknowledgement.

Round-trip times are measured from acknowledgements of our own records.
When a peer's smoothed RTT exceeds its observed minimum by a set factor the
peer is congested, and the sender switches to coalescing: it holds back
unsent records up to an adaptive lookahead window, merges each run into a
single equivalent record, and ships that instead. An acknowledgement that
arrives before the window fills flushes the held run immediately and halves
the window; the window doubles while the smoothed RTT keeps rising.

Records are only ever coalesced before their first transmission, so every
sequence number belongs to exactly one wire record forever. Receivers can
therefore deduplicate coalesced spans exactly: a span is either fully new
or fully seen.
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .log_store import LogRecord, LogStore
from .objects.base import StateObject
from .types import InstanceId, ObjectId
from .wire import (FLAG_COALESCED, FLAG_KEEPALIVE, MAX_DATAGRAM, StateMessage,
                   batch_records)


@dataclass
class ReplicationConfig:
    send_interval_us: int = 200
    keepalive_interval_us: int = 100_000
    ewma_alpha: float = 0.125
    congestion_factor: float = 2.0
    congestion_hysteresis: float = 0.10
    min_rtt_samples: int = 4
    rto_factor: float = 2.0
    rto_floor_us: int = 1_000
    max_lookahead: int = 1024
    max_datagram: int = MAX_DATAGRAM
    coalescing_enabled: bool = True


@dataclass
class PeerRttStats:
    min_rtt_us: int = 0
    ewma_rtt_us: float = 0.0
    samples: int = 0
    congested: bool = False
    lookahead_window: int = 1
    _prev_ewma: float = field(default=0.0, repr=False)


class RecvTracker:
    """Receive-side dedup state for one (object, origin) stream: the highest
    contiguous sequence received plus any received sequences above it."""

    __slots__ = ("ack", "extra")

    def __init__(self, ack: int = 0):
        self.ack = ack
        self.extra: set[int] = set()

    def covered(self, first: int, last: int) -> bool:
        return last <= self.ack or first in self.extra

    def mark(self, first: int, last: int) -> None:
        self.extra.update(range(first, last + 1))
        self._advance()

    def fast_forward(self, ack: int) -> None:
        if ack > self.ack:
            self.ack = ack
            self.extra = {s for s in self.extra if s > ack}
            self._advance()

    def _advance(self) -> None:
        while self.ack + 1 in self.extra:
            self.ack += 1
            self.extra.discard(self.ack)


class ReplicationEngine:
    def __init__(self, instance_id: InstanceId, store: LogStore,
                 config: Optional[ReplicationConfig] = None):
        self.instance_id = instance_id
        self.store = store
        self.config = config or ReplicationConfig()
        self.objects: dict[ObjectId, StateObject] = {}
        self.peers: set[InstanceId] = set()
        self.rtt: dict[InstanceId, PeerRttStats] = {}
        # peer_acks[obj][peer] = highest seq of ours the peer has acknowledged
        self.peer_acks: dict[ObjectId, dict[InstanceId, int]] = {}
        # recv[(obj, origin)] = dedup tracker for records from that origin
        self.recv: dict[tuple[ObjectId, InstanceId], RecvTracker] = {}
        self.reorder: dict[tuple[ObjectId, InstanceId], dict[int, LogRecord]] = {}
        self._rotation: list[ObjectId] = []
        self._rotation_next = 0
        self._last_sent_seq: dict[ObjectId, int] = {}
        self._sent_seqs: dict[ObjectId, list[int]] = {}
        self._sent_at: dict[tuple[ObjectId, int], list] = {}  # [first, last, retx]
        self._unsent_q: dict[ObjectId, deque[LogRecord]] = {}
        self._retx_next: dict[ObjectId, int] = {}
        self._held_since: dict[ObjectId, int] = {}
        self._last_activity: dict[ObjectId, int] = {}
        self._ack_pending: set[ObjectId] = set()
        self._rto_backoff = 1
        self.diagnostics: dict[str, int] = {}

    def diag(self, name: str) -> None:
        self.diagnostics[name] = self.diagnostics.get(name, 0) + 1

    # -- registration and membership ----------------------------------------

    def register(self, obj: StateObject) -> None:
        self.store.register(obj.object_id)
        self.objects[obj.object_id] = obj
        self._rotation.append(obj.object_id)
        self._last_sent_seq[obj.object_id] = 0
        self._sent_seqs[obj.object_id] = []
        self._unsent_q[obj.object_id] = deque()
        self._retx_next[obj.object_id] = 0
        self.peer_acks[obj.object_id] = {p: 0 for p in self.peers}
        self._last_activity[obj.object_id] = 0
        obj.bind(lambda op, oid=obj.object_id: self._record_local(oid, op))

    def _record_local(self, object_id: ObjectId, op) -> None:
        record = self.store.append(object_id, op)
        if record is None:
            self.diag("backpressure_drops")
            return
        self._unsent_q[object_id].append(record)
        if object_id not in self._held_since:
            self._held_since[object_id] = -1  # set on next cycle observation

    def add_peer(self, peer: InstanceId) -> None:
        if peer == self.instance_id or peer in self.peers:
            return
        self.peers.add(peer)
        self.rtt.setdefault(peer, PeerRttStats())
        for object_id in self.objects:
            self.peer_acks[object_id].setdefault(peer, 0)
            self.recv.setdefault((object_id, peer), RecvTracker())

    def remove_peer(self, peer: InstanceId) -> None:
        """Forget a departed peer for acknowledgement purposes. Its receive
        trackers stay so late duplicates of its records remain deduplicated."""
        self.peers.discard(peer)
        self.rtt.pop(peer, None)
        for object_id in self.objects:
            self.peer_acks[object_id].pop(peer, None)
            self._prune_object(object_id)

    # -- acknowledgement vectors ---------------------------------------------

    def ack_vector(self, object_id: ObjectId) -> dict[InstanceId, int]:
        """Advertised per-object vector: highest contiguous seq seen per
        origin, with our own appended records counting as seen."""
        vector = {self.instance_id: self.store.full_span(object_id)}
        for peer in self.peers:
            tracker = self.recv.get((object_id, peer))
            vector[peer] = tracker.ack if tracker else 0
        return vector

    def _tracker(self, object_id: ObjectId, origin: InstanceId) -> RecvTracker:
        tracker = self.recv.get((object_id, origin))
        if tracker is None:
            tracker = RecvTracker()
            self.recv[(object_id, origin)] = tracker
        return tracker

    def _prune_object(self, object_id: ObjectId) -> int:
        acks = self.peer_acks[object_id]
        if acks:
            floor = min(acks.values())
        else:
            floor = self.store.full_span(object_id)
        pruned = self.store.prune(object_id, floor)
        if pruned:
            seqs = self._sent_seqs[object_id]
            keep = bisect.bisect_right(seqs, floor)
            for seq in seqs[:keep]:
                self._sent_at.pop((object_id, seq), None)
            del seqs[:keep]
        return pruned

    # -- RTT, congestion, lookahead -------------------------------------------

    def _record_rtt_sample(self, peer: InstanceId, sample_us: int) -> None:
        stats = self.rtt.setdefault(peer, PeerRttStats())
        if stats.samples == 0:
            stats.min_rtt_us = sample_us
            stats.ewma_rtt_us = float(sample_us)
        else:
            stats.min_rtt_us = min(stats.min_rtt_us, sample_us)
            alpha = self.config.ewma_alpha
            stats.ewma_rtt_us += alpha * (sample_us - stats.ewma_rtt_us)
        stats.samples += 1
        # sustained congestion keeps the window growing; only an improving
        # path (falling estimate) stops the doubling
        rising = stats.ewma_rtt_us >= stats._prev_ewma
        stats._prev_ewma = stats.ewma_rtt_us
        self._update_congestion(stats)
        if stats.congested and rising:
            stats.lookahead_window = min(stats.lookahead_window * 2,
                                         self.config.max_lookahead)

    def _update_congestion(self, stats: PeerRttStats) -> None:
        if stats.samples < self.config.min_rtt_samples:
            return
        threshold = stats.min_rtt_us * self.config.congestion_factor
        if not stats.congested and stats.ewma_rtt_us > threshold:
            stats.congested = True
        elif stats.congested and stats.ewma_rtt_us < threshold * (
                1.0 - self.config.congestion_hysteresis):
            stats.congested = False
            stats.lookahead_window = 1

    def detect_congestion(self, peer: InstanceId) -> bool:
        stats = self.rtt.get(peer)
        return bool(stats and stats.congested)

    def _congested_window(self) -> int:
        """Largest lookahead window among congested peers, 0 if none."""
        window = 0
        for stats in self.rtt.values():
            if stats.congested:
                window = max(window, stats.lookahead_window)
        return window

    def _max_ewma_us(self) -> float:
        return max((s.ewma_rtt_us for s in self.rtt.values() if s.samples), default=0.0)

    def rto_us(self) -> int:
        """Retransmission timeout: factor times the worst smoothed RTT,
        floored, with a global backoff that doubles while timeouts repeat
        and resets when a first-transmission acknowledgement gets through."""
        base = max(int(self.config.rto_factor * self._max_ewma_us()),
                   self.config.rto_floor_us)
        return base * self._rto_backoff

    # -- sending ---------------------------------------------------------------

    def _data_message(self, object_id: ObjectId, records: list[LogRecord],
                      now: int, coalesced: bool) -> StateMessage:
        flags = FLAG_COALESCED if coalesced else 0
        return StateMessage(sender=self.instance_id, object_id=object_id,
                            records=records, acks=self.ack_vector(object_id),
                            flags=flags, send_timestamp=now)

    def _keepalive(self, object_id: ObjectId, now: int) -> StateMessage:
        return StateMessage(sender=self.instance_id, object_id=object_id,
                            acks=self.ack_vector(object_id),
                            flags=FLAG_KEEPALIVE, send_timestamp=now)

    def _mark_sent(self, object_id: ObjectId, records: list[LogRecord],
                   now: int) -> None:
        seqs = self._sent_seqs[object_id]
        for record in records:
            key = (object_id, record.seq)
            entry = self._sent_at.get(key)
            if entry is None:
                self._sent_at[key] = [now, now, 0]
                bisect.insort(seqs, record.seq)
            else:
                entry[1] = now
                entry[2] += 1
            if record.seq > self._last_sent_seq[object_id]:
                self._last_sent_seq[object_id] = record.seq
        self._last_activity[object_id] = now

    def _has_unsent(self, object_id: ObjectId) -> bool:
        return bool(self._unsent_q[object_id])

    def _emit_unsent(self, object_id: ObjectId, now: int,
                     force_flush: bool = False) -> list[StateMessage]:
        """Build data messages for never-sent records of one object,
        honoring the coalescing hold when a peer is congested."""
        queue = self._unsent_q[object_id]
        if not queue:
            self._held_since.pop(object_id, None)
            return []
        if self._held_since.get(object_id, -1) == -1:
            self._held_since[object_id] = now
        obj = self.objects[object_id]
        window = self._congested_window() if self.config.coalescing_enabled else 0
        messages: list[StateMessage] = []
        if window >= 1 and obj.coalesces:
            # Congested: accumulate towards the lookahead window, then drain
            # everything pending as merged runs. A caught-up acknowledgement
            # or a stale hold releases the accumulation early.
            release = (len(queue) >= window or force_flush
                       or now - self._held_since[object_id] >= self.rto_us())
            if not release:
                return []
            singles: list[LogRecord] = []

            def flush_singles():
                for group in batch_records(singles, len(self.peers) + 1,
                                           self.config.max_datagram):
                    messages.append(self._data_message(object_id, group, now, False))
                    self._mark_sent(object_id, group, now)
                singles.clear()

            while queue:
                run = [queue[i] for i in range(min(self.config.max_lookahead,
                                                   len(queue)))]
                op, consumed = obj.coalesce([r.op for r in run])
                for _ in range(consumed):
                    queue.popleft()
                if consumed == 1:
                    # nothing merged; ship the original record, batched
                    singles.append(run[0])
                    continue
                flush_singles()
                record = self.store.replace_with_coalesced(
                    object_id, run[0].seq, run[consumed - 1].seq, op)
                self.diag("coalesced_records")
                messages.append(self._data_message(object_id, [record], now,
                                                   coalesced=True))
                self._mark_sent(object_id, [record], now)
            flush_singles()
            self._held_since.pop(object_id, None)
            self._ack_pending.discard(object_id)
            return messages
        unsent = list(queue)
        queue.clear()
        for group in batch_records(unsent, len(self.peers) + 1,
                                   self.config.max_datagram):
            messages.append(self._data_message(object_id, group, now, False))
            self._mark_sent(object_id, group, now)
        self._held_since.pop(object_id, None)
        self._ack_pending.discard(object_id)
        return messages

    def send_cycle(self, now: int) -> list[StateMessage]:
        """One cycle: retransmissions due, pending acknowledgements, data for
        the next object in round-robin order, keep-alives for idle groups."""
        messages = self.retransmit_check(now)
        for object_id in sorted(self._ack_pending):
            messages.append(self._keepalive(object_id, now))
            self._last_activity[object_id] = now
        self._ack_pending.clear()
        if self._rotation:
            for step in range(len(self._rotation)):
                idx = (self._rotation_next + step) % len(self._rotation)
                object_id = self._rotation[idx]
                if not self._has_unsent(object_id):
                    continue
                emitted = self._emit_unsent(object_id, now)
                self._rotation_next = (idx + 1) % len(self._rotation)
                messages.extend(emitted)
                break
        for object_id in self._rotation:
            if now - self._last_activity[object_id] >= self.config.keepalive_interval_us:
                messages.append(self._keepalive(object_id, now))
                self._last_activity[object_id] = now
        return messages

    def retransmit_check(self, now: int, head_window: int = 64) -> list[StateMessage]:
        """Re-multicast timed-out records at each peer's head of line.

        Only the oldest ``head_window`` unacknowledged records per peer are
        candidates: with cumulative acknowledgements a single hole shadows
        everything behind it, and resending the (mostly delivered) shadow
        would mark every record retransmitted and starve RTT sampling.
        Healing the head advances the cumulative ack past the shadow.
        """
        rto = self.rto_us()
        messages = []
        for object_id in self._rotation:
            if now < self._retx_next[object_id]:
                continue
            log = self.store.log(object_id)
            if not log.records:
                continue
            last_sent = self._last_sent_seq[object_id]
            acks = sorted(set(self.peer_acks[object_id].values()))
            candidates: dict[int, LogRecord] = {}
            for floor in acks:
                taken = 0
                for record in log.records:
                    if record.seq > last_sent or taken >= head_window:
                        break
                    if record.first_seq <= floor:
                        continue
                    candidates[record.seq] = record
                    taken += 1
            due = []
            next_due = None
            for seq in sorted(candidates):
                record = candidates[seq]
                entry = self._sent_at.get((object_id, record.seq))
                if entry is None:
                    continue
                deadline = entry[1] + rto
                if now >= deadline:
                    due.append(record)
                elif next_due is None or deadline < next_due:
                    next_due = deadline
            if due:
                self._rto_backoff = min(self._rto_backoff * 2, 64)
                rto = self.rto_us()
                for group in batch_records(due, len(self.peers) + 1,
                                           self.config.max_datagram):
                    messages.append(self._data_message(object_id, group, now, False))
                    self._mark_sent(object_id, group, now)
                self.diag("retransmissions")
                next_due = now + rto
            self._retx_next[object_id] = int(next_due) if next_due is not None \
                else now + self.config.rto_floor_us
        return messages

    # -- receiving ---------------------------------------------------------------

    def on_message(self, msg: StateMessage, now: int) -> list[StateMessage]:
        """Apply records and acknowledgements from one state message.
        Returns messages to transmit immediately (early-ack coalesce flush)."""
        object_id = msg.object_id
        if object_id not in self.objects:
            self.diag("unknown_object")
            return []
        if msg.records:
            self._apply_records(object_id, msg.sender, msg.records)
            self._ack_pending.add(object_id)
        return self._process_acks(msg, now)

    def _apply_records(self, object_id: ObjectId, origin: InstanceId,
                       records: list[LogRecord]) -> None:
        obj = self.objects[object_id]
        tracker = self._tracker(object_id, origin)
        if obj.requires_ordered_delivery:
            buffer = self.reorder.setdefault((object_id, origin), {})
            for record in records:
                first = record.first_seq
                if record.seq <= tracker.ack or first in buffer:
                    self.diag("duplicates_discarded")
                    continue
                if first <= tracker.ack:
                    self.diag("overlap_discarded")
                    continue
                buffer[first] = record
            while tracker.ack + 1 in buffer:
                record = buffer.pop(tracker.ack + 1)
                obj.apply(record.op)
                tracker.ack = record.seq
        else:
            for record in records:
                first = record.first_seq
                if tracker.covered(first, record.seq):
                    if record.seq > tracker.ack and record.seq not in tracker.extra:
                        # should never happen: every seq ships in exactly one
                        # wire grouping, so coverage is all-or-nothing
                        self.diag("partial_overlap_discarded")
                    else:
                        self.diag("duplicates_discarded")
                    continue
                if first <= tracker.ack:
                    self.diag("partial_overlap_discarded")
                    continue
                obj.apply(record.op)
                tracker.mark(first, record.seq)

    def _process_acks(self, msg: StateMessage, now: int) -> list[StateMessage]:
        object_id = msg.object_id
        peer = msg.sender
        acked_mine = msg.acks.get(self.instance_id)
        flush: list[StateMessage] = []
        if acked_mine is not None and peer in self.peers:
            # Every acknowledgement of our records samples the peer's path
            # through its own message timing (each copy carries its own
            # timestamp, so retransmissions stay unambiguous, and a
            # cumulative ack stuck behind a loss hole cannot starve the
            # estimator the way record-age sampling would).
            self._rto_backoff = 1
            self._record_rtt_sample(peer, 2 * max(0, now - msg.send_timestamp))
            prev = self.peer_acks[object_id].get(peer, 0)
            if acked_mine > prev:
                self.peer_acks[object_id][peer] = acked_mine
                self._prune_object(object_id)
                flush = self._early_ack_flush(object_id, peer, now)
        return flush

    def _early_ack_flush(self, object_id: ObjectId, peer: InstanceId,
                         now: int) -> list[StateMessage]:
        if not self.config.coalescing_enabled:
            return []
        stats = self.rtt.get(peer)
        if not stats or not stats.congested:
            return []
        if self.peer_acks[object_id].get(peer, 0) < self._last_sent_seq[object_id]:
            return []  # the peer is still digesting earlier records
        pending = len(self._unsent_q[object_id])
        if not pending:
            return []
        if pending < stats.lookahead_window:
            # the acknowledgement beat the window: shrink it
            stats.lookahead_window = max(1, stats.lookahead_window // 2)
        return self._emit_unsent(object_id, now, force_flush=True)

    # -- quiescence ----------------------------------------------------------------

    def drained(self) -> bool:
        if not self.store.all_drained():
            return False
        return all(not buf for buf in self.reorder.values())
