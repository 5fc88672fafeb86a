"""Counter objects: a single signed counter and a fixed-size vector of them.

Increments and decrements are tracked as separate non-negative totals so the
value is simply ``pos - neg``. Deltas commute; exactly-once application is
guaranteed by the replication layer's per-record dedup. Totals saturate at
the u64 bound instead of wrapping: monitoring state should degrade, not
corrupt.
"""

from __future__ import annotations

import struct
from typing import Optional, Sequence

from ..types import (OP_BATCH, OP_DEC, OP_INC, OP_VEC_ADD, Operation,
                     ProtocolError, SnapshotError, U64_MAX, saturate_u64, u64)
from .base import StateObject
from .batch import build_batch, iter_batch

_U64 = struct.Struct(">Q")


class PNCounter(StateObject):
    kind = "counter"

    def __init__(self, object_id):
        super().__init__(object_id)
        self._pos = 0
        self._neg = 0

    def update(self, delta: int) -> None:
        """Locally add ``delta`` (may be negative) and record the operation."""
        self.record(self.build_update(delta))

    @staticmethod
    def build_update(delta: int) -> Operation:
        opcode = OP_INC if delta >= 0 else OP_DEC
        return Operation(opcode, (u64(min(abs(delta), U64_MAX)),))

    def apply(self, op: Operation) -> None:
        if op.opcode == OP_INC:
            amount = int.from_bytes(op.operands[0], "big")
            new = self._pos + amount
            if new > U64_MAX:
                self.diag("counter_saturated")
            self._pos = saturate_u64(new)
        elif op.opcode == OP_DEC:
            amount = int.from_bytes(op.operands[0], "big")
            new = self._neg + amount
            if new > U64_MAX:
                self.diag("counter_saturated")
            self._neg = saturate_u64(new)
        else:
            raise ProtocolError(f"counter cannot apply opcode {op.opcode}")

    def value(self) -> int:
        return self._pos - self._neg

    def coalesce(self, ops: Sequence[Operation]) -> Optional[tuple[Operation, int]]:
        net = 0
        for op in ops:
            amount = int.from_bytes(op.operands[0], "big")
            net += amount if op.opcode == OP_INC else -amount
        return self.build_update(net), len(ops)

    def snapshot(self) -> bytes:
        return _U64.pack(self._pos) + _U64.pack(self._neg)

    def restore(self, data: bytes) -> None:
        if len(data) != 16:
            raise SnapshotError("counter snapshot must be 16 bytes")
        self._pos, self._neg = _U64.unpack_from(data, 0)[0], _U64.unpack_from(data, 8)[0]

    def query_digest(self) -> bytes:
        return self.value().to_bytes(9, "big", signed=True)


class CounterVector(StateObject):
    """Fixed-length array of PN counters addressed by index.

    Covers per-slot usage/volume tracking (backend usage, per-port byte
    counts) where the slot space is small enough to count exactly.
    """

    kind = "vector"

    def __init__(self, object_id, length: int):
        super().__init__(object_id)
        if length < 1:
            raise ValueError("vector length must be >= 1")
        self.length = length
        self._pos = [0] * length
        self._neg = [0] * length

    def update(self, index: int, delta: int) -> None:
        self.record(self.build_update(index, delta))

    @staticmethod
    def build_update(index: int, delta: int) -> Operation:
        sign = b"\x00" if delta >= 0 else b"\x01"
        return Operation(OP_VEC_ADD,
                         (index.to_bytes(4, "big"), sign,
                          u64(min(abs(delta), U64_MAX))))

    def apply(self, op: Operation) -> None:
        if op.opcode == OP_BATCH:
            for sub in iter_batch(op):
                self.apply(sub)
            return
        if op.opcode != OP_VEC_ADD:
            raise ProtocolError(f"vector cannot apply opcode {op.opcode}")
        index = int.from_bytes(op.operands[0], "big")
        negative = op.operands[1] == b"\x01"
        amount = int.from_bytes(op.operands[2], "big")
        if index >= self.length:
            self.diag("vector_index_out_of_range")
            return
        arr = self._neg if negative else self._pos
        new = arr[index] + amount
        if new > U64_MAX:
            self.diag("counter_saturated")
        arr[index] = saturate_u64(new)

    def value(self, index: int) -> int:
        return self._pos[index] - self._neg[index]

    def coalesce(self, ops: Sequence[Operation]) -> Optional[tuple[Operation, int]]:
        # Net delta per index over the longest prefix that fits one batch.
        net: dict[int, int] = {}
        consumed = 0
        for op in ops:
            index = int.from_bytes(op.operands[0], "big")
            if index not in net and 2 + len(net) > 255:
                break
            amount = int.from_bytes(op.operands[2], "big")
            if op.operands[1] == b"\x01":
                amount = -amount
            net[index] = net.get(index, 0) + amount
            consumed += 1
        if len(net) == consumed:
            return ops[0], 1  # all distinct indices: nothing merges
        subs = [self.build_update(i, d) for i, d in sorted(net.items())]
        merged = build_batch(subs)
        assert merged is not None
        return merged, consumed

    def snapshot(self) -> bytes:
        parts = [struct.pack(">I", self.length)]
        parts += [_U64.pack(v) for v in self._pos]
        parts += [_U64.pack(v) for v in self._neg]
        return b"".join(parts)

    def restore(self, data: bytes) -> None:
        if len(data) < 4:
            raise SnapshotError("truncated vector snapshot")
        (length,) = struct.unpack_from(">I", data, 0)
        if length != self.length or len(data) != 4 + 16 * length:
            raise SnapshotError("vector snapshot does not match configuration")
        offset = 4
        self._pos = [_U64.unpack_from(data, offset + 8 * i)[0] for i in range(length)]
        offset += 8 * length
        self._neg = [_U64.unpack_from(data, offset + 8 * i)[0] for i in range(length)]

    def query_digest(self) -> bytes:
        return b"".join(self.value(i).to_bytes(9, "big", signed=True)
                        for i in range(self.length))

    def config_digest(self) -> bytes:
        return f"{self.kind}:{self.length}".encode()
