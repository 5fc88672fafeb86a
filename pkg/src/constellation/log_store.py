"""Per-object queues of recorded state operations.

Every local operation becomes a log record with a sequence number that
increases without gaps per object (starting at 1; an acknowledgement of 0
means nothing received). Records stay queued until every peer has
acknowledged them, then pruning releases them. A coalesced record carries
the last sequence number of the run it replaces plus the run length, so
acknowledgement arithmetic is unchanged.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

from .types import ObjectId, Operation, RegistrationError

DEFAULT_QUEUE_CAP = 2**16


@dataclass(frozen=True)
class LogRecord:
    object_id: ObjectId
    op: Operation
    seq: int
    coalesced_span: int = 1

    @property
    def first_seq(self) -> int:
        """Lowest original sequence number this record covers."""
        return self.seq - self.coalesced_span + 1


class ObjectLog:
    def __init__(self, object_id: ObjectId, cap: int = DEFAULT_QUEUE_CAP):
        self.object_id = object_id
        self.cap = cap
        self.records: deque[LogRecord] = deque()
        self.next_seq = 1
        self.min_acked = 0  # highest seq acknowledged by every peer

    def __len__(self) -> int:
        return len(self.records)


class LogStore:
    def __init__(self, queue_cap: int = DEFAULT_QUEUE_CAP):
        self.queue_cap = queue_cap
        self._logs: dict[ObjectId, ObjectLog] = {}
        self.diagnostics: dict[str, int] = {}

    def register(self, object_id: ObjectId) -> None:
        if object_id in self._logs:
            raise RegistrationError(f"object {object_id} already registered")
        self._logs[object_id] = ObjectLog(object_id, self.queue_cap)

    def registered(self) -> list[ObjectId]:
        return list(self._logs)

    def log(self, object_id: ObjectId) -> ObjectLog:
        log = self._logs.get(object_id)
        if log is None:
            raise RegistrationError(f"object {object_id} is not registered")
        return log

    def append(self, object_id: ObjectId, op: Operation) -> Optional[LogRecord]:
        """Record one operation; returns None when the queue is full
        (backpressure: the packet path drops the update with a diagnostic
        rather than growing without bound)."""
        log = self.log(object_id)
        if len(log.records) >= log.cap:
            self.diagnostics["log_full_drops"] = \
                self.diagnostics.get("log_full_drops", 0) + 1
            return None
        record = LogRecord(object_id, op, log.next_seq)
        log.records.append(record)
        log.next_seq += 1
        return record

    def outstanding(self, object_id: ObjectId, max_records: int,
                    after_seq: Optional[int] = None) -> list[LogRecord]:
        """Up to ``max_records`` not-yet-fully-acknowledged records in
        sequence order, non-destructively. ``after_seq`` restricts to
        records whose run starts after that sequence number."""
        log = self.log(object_id)
        floor = log.min_acked if after_seq is None else max(log.min_acked, after_seq)
        out = []
        for record in log.records:
            if len(out) >= max_records:
                break
            if record.first_seq <= floor:
                continue
            out.append(record)
        return out

    def prune(self, object_id: ObjectId, min_acked: int) -> int:
        """Drop records fully covered by the smallest peer acknowledgement.
        Monotone: re-pruning with the same argument removes nothing."""
        log = self.log(object_id)
        log.min_acked = max(log.min_acked, min_acked)
        pruned = 0
        while log.records and log.records[0].seq <= log.min_acked:
            span = log.records.popleft().coalesced_span
            pruned += span
        return pruned

    def replace_with_coalesced(self, object_id: ObjectId, first_seq: int,
                               last_seq: int, op: Operation) -> LogRecord:
        """Swap the queued records covering [first_seq, last_seq] for one
        coalesced record carrying the run's last seq and total span."""
        log = self.log(object_id)
        kept: list[LogRecord] = []
        span = 0
        for record in log.records:
            if first_seq <= record.seq <= last_seq:
                span += record.coalesced_span
            else:
                kept.append(record)
        merged = LogRecord(object_id, op, last_seq, span)
        kept.append(merged)
        kept.sort(key=lambda r: r.seq)
        log.records = deque(kept)
        return merged

    def drained(self, object_id: ObjectId) -> bool:
        return not self.log(object_id).records

    def all_drained(self) -> bool:
        return all(not log.records for log in self._logs.values())

    def full_span(self, object_id: ObjectId) -> int:
        """Total original operations ever appended for the object."""
        return self.log(object_id).next_seq - 1
