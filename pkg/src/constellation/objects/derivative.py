"""Composite object that updates several member objects as one unit.

A derivative record carries (member id, sub-operation) pairs. It is
appended to the derivative's own log queue and replicated as one record,
and a receiving replica applies every sub-operation in one step, so no
query can observe a strict prefix of the update. Member objects remain
ordinary registered objects and may also receive plain operations of
their own; the registrar is responsible for composites that commute with
those (checked by fuzzing, not proven).
"""

from __future__ import annotations

import struct
from typing import Sequence

from ..types import (ObjectId, OP_DERIVATIVE, Operation, ProtocolError,
                     RegistrationError, SnapshotError)
from .base import StateObject

_SUB_HEADER = struct.Struct(">IBB")  # member id, sub opcode, operand count


class DerivativeObject(StateObject):
    kind = "derivative"
    # Each record is an atomicity boundary declared by the registrar, so
    # derivative records are never merged; they ship individually.
    coalesces = False

    def __init__(self, object_id, members: dict[ObjectId, StateObject]):
        super().__init__(object_id)
        if not members:
            raise RegistrationError("derivative needs at least one member")
        self.members = dict(members)
        self.requires_ordered_delivery = any(
            m.requires_ordered_delivery for m in members.values())

    def apply_multi(self, sub_ops: Sequence[tuple[ObjectId, Operation]]) -> None:
        """Locally perform sub-operations as one atomic recorded update."""
        if not sub_ops:
            return
        self.record(self.build_multi(sub_ops))

    def build_multi(self, sub_ops: Sequence[tuple[ObjectId, Operation]]) -> Operation:
        for member_id, _ in sub_ops:
            if member_id not in self.members:
                raise RegistrationError(
                    f"object {member_id} is not a member of derivative {self.object_id}")
        operands = []
        for member_id, sub in sub_ops:
            operands.append(_SUB_HEADER.pack(member_id, sub.opcode, len(sub.operands)))
            operands.extend(sub.operands)
        return Operation(OP_DERIVATIVE, tuple(operands))

    def apply(self, op: Operation) -> None:
        if op.opcode != OP_DERIVATIVE:
            raise ProtocolError(f"derivative cannot apply opcode {op.opcode}")
        for member_id, sub in self.unpack_multi(op):
            member = self.members.get(member_id)
            if member is None:
                raise RegistrationError(
                    f"derivative record targets non-member object {member_id}")
            member.apply(sub)

    @staticmethod
    def unpack_multi(op: Operation) -> list[tuple[ObjectId, Operation]]:
        subs = []
        i = 0
        operands = op.operands
        while i < len(operands):
            if len(operands[i]) != _SUB_HEADER.size:
                raise ProtocolError("malformed derivative sub-header")
            member_id, opcode, count = _SUB_HEADER.unpack(operands[i])
            i += 1
            if i + count > len(operands):
                raise ProtocolError("truncated derivative sub-operation")
            subs.append((member_id, Operation(opcode, tuple(operands[i:i + count]))))
            i += count
        return subs

    def snapshot(self) -> bytes:
        parts = [struct.pack(">I", len(self.members))]
        for member_id in sorted(self.members):
            blob = self.members[member_id].snapshot()
            parts.append(struct.pack(">II", member_id, len(blob)))
            parts.append(blob)
        return b"".join(parts)

    def restore(self, data: bytes) -> None:
        try:
            (count,) = struct.unpack_from(">I", data, 0)
            offset = 4
            if count != len(self.members):
                raise SnapshotError("derivative snapshot member count mismatch")
            for _ in range(count):
                member_id, blob_len = struct.unpack_from(">II", data, offset)
                offset += 8
                member = self.members.get(member_id)
                if member is None:
                    raise SnapshotError(f"snapshot for unknown member {member_id}")
                member.restore(data[offset:offset + blob_len])
                offset += blob_len
        except struct.error as exc:
            raise SnapshotError(f"bad derivative snapshot: {exc}") from exc

    def query_digest(self) -> bytes:
        parts = []
        for member_id in sorted(self.members):
            digest = self.members[member_id].query_digest()
            parts.append(struct.pack(">II", member_id, len(digest)))
            parts.append(digest)
        return b"".join(parts)

    def config_digest(self) -> bytes:
        inner = b",".join(self.members[m].config_digest() for m in sorted(self.members))
        return b"derivative:" + inner
