"""Convergent flow table: a map from five-tuple keys to small byte values.

``add(k, v)`` inserts or updates a mapping. Adds for the same key race
across instances, so a deployment-wide ordering callback picks the winner
deterministically, which makes ``add`` commutative and idempotent: the
stored value for a key is the maximum of all adds under the callback.

The default ordering compares value bytes lexicographically (big-endian
numeric for equal lengths) and falls back to key bytes on equal values so
the order is total.
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, Sequence

from ..types import (FlowKey, OP_BATCH, OP_TABLE_ADD, OPERAND_COUNT_MAX,
                     OPERAND_MAX, Operation, ProtocolError, SnapshotError)
from .base import StateObject
from .batch import build_batch, iter_batch

# Maps (key bytes, value bytes) to a sort key; greater wins.
OrderingCallback = Callable[[bytes, bytes], tuple]


def default_ordering(key: bytes, value: bytes) -> tuple:
    return (value, key)


class FlowTable(StateObject):
    kind = "flow_table"

    def __init__(self, object_id, ordering: OrderingCallback = default_ordering):
        super().__init__(object_id)
        self.ordering = ordering
        self._entries: dict[bytes, bytes] = {}

    def add(self, key: FlowKey, value: bytes) -> None:
        self.record(self.build_add(key, value))

    @staticmethod
    def build_add(key: FlowKey, value: bytes) -> Operation:
        return Operation(OP_TABLE_ADD, (key.to_bytes(), value))

    def apply(self, op: Operation) -> None:
        if op.opcode == OP_BATCH:
            for sub in iter_batch(op):
                self.apply(sub)
            return
        if op.opcode != OP_TABLE_ADD:
            raise ProtocolError(f"flow table cannot apply opcode {op.opcode}")
        key, value = op.operands[0], op.operands[1]
        current = self._entries.get(key)
        if current is None or self.ordering(key, value) > self.ordering(key, current):
            self._entries[key] = value

    def value(self, key: FlowKey) -> Optional[bytes]:
        return self._entries.get(key.to_bytes())

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> list[tuple[bytes, bytes]]:
        return sorted(self._entries.items())

    def coalesce(self, ops: Sequence[Operation]) -> Optional[tuple[Operation, int]]:
        # Keep only the winning add per key over the longest prefix whose
        # merged form still fits the batch encoding.
        best: dict[bytes, bytes] = {}
        consumed = 0
        for op in ops:
            key, value = op.operands[0], op.operands[1]
            if op.encoded_size > OPERAND_MAX:
                if consumed == 0:
                    return ops[0], 1  # value too large to batch, ship as-is
                break
            if key not in best and 2 + len(best) > OPERAND_COUNT_MAX:
                break
            cur = best.get(key)
            if cur is None or self.ordering(key, value) > self.ordering(key, cur):
                best[key] = value
            consumed += 1
        if len(best) == consumed:
            return ops[0], 1  # all distinct keys: nothing merges
        subs = [Operation(OP_TABLE_ADD, (k, v)) for k, v in sorted(best.items())]
        merged = build_batch(subs)
        assert merged is not None
        return merged, consumed

    def snapshot(self) -> bytes:
        parts = [struct.pack(">I", len(self._entries))]
        for key, value in sorted(self._entries.items()):
            parts.append(struct.pack(">BH", len(key), len(value)))
            parts.append(key)
            parts.append(value)
        return b"".join(parts)

    def restore(self, data: bytes) -> None:
        try:
            (count,) = struct.unpack_from(">I", data, 0)
            offset = 4
            entries = {}
            for _ in range(count):
                key_len, val_len = struct.unpack_from(">BH", data, offset)
                offset += 3
                key = data[offset:offset + key_len]
                offset += key_len
                value = data[offset:offset + val_len]
                offset += val_len
                if len(key) != key_len or len(value) != val_len:
                    raise SnapshotError("truncated flow table snapshot")
                entries[key] = value
            self._entries = entries
        except struct.error as exc:
            raise SnapshotError(f"bad flow table snapshot: {exc}") from exc

    def query_digest(self) -> bytes:
        parts = []
        for key, value in sorted(self._entries.items()):
            parts.append(struct.pack(">BH", len(key), len(value)))
            parts.append(key)
            parts.append(value)
        return b"".join(parts)
