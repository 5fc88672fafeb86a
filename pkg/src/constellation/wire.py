"""State message framing. All integers big-endian, bit-exact.

Layout: magic u16 (0xC57A), version u8 (1), flags u8, sender u16,
object u32, record_count u16, ack_count u16, send_timestamp u64,
then ``record_count`` records [seq u64, coalesced_span u32, operation
encoding], then ``ack_count`` acknowledgement entries [instance u16,
seq u64].

Flag bits: 0 keepalive (no records), 1 coalesced, 2 join, 3 leave,
4 snapshot-request, 5 snapshot-chunk. A leave acknowledgement is
leave+keepalive. Snapshot control messages use the record area for their
body instead of records: a request carries the resume offset u64; a chunk
carries offset u64, total length u64, then payload bytes to the end of
the datagram.

Any truncated or bad-magic datagram raises ProtocolError; the receiver
drops it and bumps a diagnostic counter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .log_store import LogRecord
from .types import InstanceId, ObjectId, Operation, ProtocolError

MAGIC = 0xC57A
VERSION = 1

FLAG_KEEPALIVE = 1 << 0
FLAG_COALESCED = 1 << 1
FLAG_JOIN = 1 << 2
FLAG_LEAVE = 1 << 3
FLAG_SNAP_REQ = 1 << 4
FLAG_SNAP_CHUNK = 1 << 5

MAX_DATAGRAM = 1400

_HEADER = struct.Struct(">HBBHIHHQ")
_RECORD_HEAD = struct.Struct(">QI")
_ACK_ENTRY = struct.Struct(">HQ")
_U64 = struct.Struct(">Q")

HEADER_SIZE = _HEADER.size
RECORD_OVERHEAD = _RECORD_HEAD.size
ACK_ENTRY_SIZE = _ACK_ENTRY.size


@dataclass
class StateMessage:
    sender: InstanceId
    object_id: ObjectId
    records: list[LogRecord] = field(default_factory=list)
    acks: dict[InstanceId, int] = field(default_factory=dict)
    flags: int = 0
    send_timestamp: int = 0
    snap_offset: int = 0
    snap_total: int = 0
    snap_payload: bytes = b""

    @property
    def keepalive(self) -> bool:
        return bool(self.flags & FLAG_KEEPALIVE)

    @property
    def is_control(self) -> bool:
        return bool(self.flags & (FLAG_JOIN | FLAG_LEAVE | FLAG_SNAP_REQ | FLAG_SNAP_CHUNK))

    def quiescence_relevant(self) -> bool:
        """Whether delivery of this message can still change replica state
        or membership; pure acknowledgement traffic is not relevant."""
        return bool(self.records) or self.is_control

    def encode(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, VERSION, self.flags, self.sender,
                              self.object_id, len(self.records), len(self.acks),
                              self.send_timestamp)]
        if self.flags & FLAG_SNAP_REQ:
            parts.append(_U64.pack(self.snap_offset))
        elif self.flags & FLAG_SNAP_CHUNK:
            parts.append(_U64.pack(self.snap_offset))
            parts.append(_U64.pack(self.snap_total))
            parts.append(self.snap_payload)
        else:
            for record in self.records:
                parts.append(_RECORD_HEAD.pack(record.seq, record.coalesced_span))
                parts.append(record.op.encode())
        for instance in sorted(self.acks):
            parts.append(_ACK_ENTRY.pack(instance, self.acks[instance]))
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "StateMessage":
        if len(data) < _HEADER.size:
            raise ProtocolError("truncated header")
        magic, version, flags, sender, object_id, record_count, ack_count, ts = \
            _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise ProtocolError(f"bad magic 0x{magic:04x}")
        if version != VERSION:
            raise ProtocolError(f"unsupported version {version}")
        msg = cls(sender=sender, object_id=object_id, flags=flags,
                  send_timestamp=ts)
        offset = _HEADER.size
        ack_tail = ack_count * _ACK_ENTRY.size
        if flags & FLAG_SNAP_REQ:
            if offset + 8 > len(data) - ack_tail:
                raise ProtocolError("truncated snapshot request")
            (msg.snap_offset,) = _U64.unpack_from(data, offset)
            offset += 8
        elif flags & FLAG_SNAP_CHUNK:
            if offset + 16 > len(data) - ack_tail:
                raise ProtocolError("truncated snapshot chunk")
            (msg.snap_offset,) = _U64.unpack_from(data, offset)
            (msg.snap_total,) = _U64.unpack_from(data, offset + 8)
            offset += 16
            payload_end = len(data) - ack_tail
            msg.snap_payload = data[offset:payload_end]
            offset = payload_end
        else:
            for _ in range(record_count):
                if offset + _RECORD_HEAD.size > len(data):
                    raise ProtocolError("truncated record header")
                seq, span = _RECORD_HEAD.unpack_from(data, offset)
                offset += _RECORD_HEAD.size
                op, offset = Operation.decode_from(data, offset)
                if span < 1:
                    raise ProtocolError("record span must be >= 1")
                msg.records.append(LogRecord(object_id, op, seq, span))
        for _ in range(ack_count):
            if offset + _ACK_ENTRY.size > len(data):
                raise ProtocolError("truncated ack entry")
            instance, seq = _ACK_ENTRY.unpack_from(data, offset)
            offset += _ACK_ENTRY.size
            msg.acks[instance] = seq
        if offset != len(data):
            raise ProtocolError(f"{len(data) - offset} trailing bytes")
        return msg


def record_wire_size(record: LogRecord) -> int:
    return RECORD_OVERHEAD + record.op.encoded_size


def batch_records(records: list[LogRecord], ack_count: int,
                  budget: int = MAX_DATAGRAM) -> list[list[LogRecord]]:
    """Split records into groups whose serialized messages each fit the
    datagram budget. A record too large to fit alone is sent alone anyway
    (operands are capped, so this stays near the budget)."""
    fixed = HEADER_SIZE + ack_count * ACK_ENTRY_SIZE
    groups: list[list[LogRecord]] = []
    current: list[LogRecord] = []
    used = fixed
    for record in records:
        size = record_wire_size(record)
        if current and used + size > budget:
            groups.append(current)
            current = []
            used = fixed
        current.append(record)
        used += size
    if current:
        groups.append(current)
    return groups
