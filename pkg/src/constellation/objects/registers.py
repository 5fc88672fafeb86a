"""Last-writer-wins register.

Each write carries a logical timestamp (Lamport counter) plus the writing
instance's id; the stored value is the maximum write under the total order
(timestamp, writer, value bytes). Applying any permutation or repetition of
the same writes lands on the same winner.
"""

from __future__ import annotations

import struct
from typing import Optional, Sequence

from ..types import InstanceId, OP_SET, Operation, ProtocolError, SnapshotError
from .base import StateObject

_STAMP = struct.Struct(">QH")


class LWWRegister(StateObject):
    kind = "register"

    def __init__(self, object_id, instance_id: InstanceId = 0):
        super().__init__(object_id)
        self.instance_id = instance_id
        self._value = b""
        self._stamp = (0, 0)  # (lamport, writer); (0,0) = never written

    def set(self, value: bytes) -> None:
        lamport = self._stamp[0] + 1
        self.record(self.build_set(value, lamport, self.instance_id))

    @staticmethod
    def build_set(value: bytes, lamport: int, writer: int) -> Operation:
        return Operation(OP_SET, (_STAMP.pack(lamport, writer), value))

    def apply(self, op: Operation) -> None:
        if op.opcode != OP_SET:
            raise ProtocolError(f"register cannot apply opcode {op.opcode}")
        lamport, writer = _STAMP.unpack(op.operands[0])
        value = op.operands[1]
        if (lamport, writer, value) > (*self._stamp, self._value):
            self._stamp = (lamport, writer)
            self._value = value

    def value(self) -> bytes:
        return self._value

    def coalesce(self, ops: Sequence[Operation]) -> Optional[tuple[Operation, int]]:
        best = max(ops, key=lambda op: (_STAMP.unpack(op.operands[0]), op.operands[1]))
        return best, len(ops)

    def snapshot(self) -> bytes:
        return _STAMP.pack(*self._stamp) + self._value

    def restore(self, data: bytes) -> None:
        if len(data) < _STAMP.size:
            raise SnapshotError("truncated register snapshot")
        self._stamp = _STAMP.unpack_from(data, 0)
        self._value = data[_STAMP.size:]

    def query_digest(self) -> bytes:
        return self._value
