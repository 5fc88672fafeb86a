"""Observed-remove set.

Every add carries a unique tag (origin instance, per-object counter); a
remove carries the tags the remover had observed for the element. Removed
tags are kept as tombstones so add/remove operations commute regardless of
arrival order: an element is present iff it has an added tag that is not
tombstoned. Concurrent adds survive a remove that did not observe them
(add-wins).
"""

from __future__ import annotations

import struct
from typing import Iterable, Optional, Sequence

from ..types import (InstanceId, OP_BATCH, OP_SET_ADD, OP_SET_REMOVE,
                     OPERAND_COUNT_MAX, OPERAND_MAX, Operation, ProtocolError,
                     SnapshotError)
from .base import StateObject
from .batch import build_batch, iter_batch

_TAG = struct.Struct(">HQ")  # (origin instance, tag counter)


class ORSet(StateObject):
    kind = "set"

    def __init__(self, object_id, instance_id: InstanceId = 0):
        super().__init__(object_id)
        self.instance_id = instance_id
        self._tag_counter = 0
        self._added: dict[bytes, set[tuple[int, int]]] = {}
        self._removed: dict[bytes, set[tuple[int, int]]] = {}

    # -- local mutators ----------------------------------------------------

    def add(self, element: bytes) -> None:
        self._tag_counter += 1
        self.record(self.build_add(element, (self.instance_id, self._tag_counter)))

    def remove(self, element: bytes) -> None:
        """Remove the element's currently observed tags (no-op if absent)."""
        op = self.build_remove_observed(element)
        if op is not None:
            self.record(op)

    def build_remove_observed(self, element: bytes) -> Optional[Operation]:
        live = self._live_tags(element)
        if not live:
            return None
        return self.build_remove(element, sorted(live))

    @staticmethod
    def build_add(element: bytes, tag: tuple[int, int]) -> Operation:
        return Operation(OP_SET_ADD, (element, _TAG.pack(*tag)))

    @staticmethod
    def build_remove(element: bytes, tags: Iterable[tuple[int, int]]) -> Operation:
        return Operation(OP_SET_REMOVE,
                         (element, *[_TAG.pack(*t) for t in tags]))

    # -- application -------------------------------------------------------

    def apply(self, op: Operation) -> None:
        if op.opcode == OP_SET_ADD:
            element = op.operands[0]
            tag = _TAG.unpack(op.operands[1])
            self._added.setdefault(element, set()).add(tag)
        elif op.opcode == OP_SET_REMOVE:
            element = op.operands[0]
            tombs = self._removed.setdefault(element, set())
            for raw in op.operands[1:]:
                tombs.add(_TAG.unpack(raw))
        elif op.opcode == OP_BATCH:
            for sub in iter_batch(op):
                self.apply(sub)
        else:
            raise ProtocolError(f"set cannot apply opcode {op.opcode}")

    # -- queries -----------------------------------------------------------

    def _live_tags(self, element: bytes) -> set[tuple[int, int]]:
        return self._added.get(element, set()) - self._removed.get(element, set())

    def contains(self, element: bytes) -> bool:
        return bool(self._live_tags(element))

    def elements(self) -> list[bytes]:
        return sorted(e for e in self._added if self._live_tags(e))

    def coalesce(self, ops: Sequence[Operation]) -> Optional[tuple[Operation, int]]:
        # Adds and removes already commute, so a run packs into one batch;
        # consume the longest prefix that fits the batch encoding.
        consumed = 0
        for op in ops:
            if op.encoded_size > OPERAND_MAX:
                if consumed == 0:
                    return ops[0], 1  # too big to batch, ship as-is
                break
            if 2 + consumed > OPERAND_COUNT_MAX:
                break
            consumed += 1
        merged = build_batch(list(ops[:consumed]))
        assert merged is not None
        return merged, consumed

    # -- snapshot ----------------------------------------------------------

    def snapshot(self) -> bytes:
        parts = []
        for store in (self._added, self._removed):
            populated = {e: tags for e, tags in store.items() if tags}
            parts.append(struct.pack(">I", len(populated)))
            for element in sorted(populated):
                tags = sorted(populated[element])
                parts.append(struct.pack(">HI", len(element), len(tags)))
                parts.append(element)
                parts += [_TAG.pack(*t) for t in tags]
        return b"".join(parts)

    def restore(self, data: bytes) -> None:
        try:
            offset = 0
            stores = []
            for _ in range(2):
                (n_elems,) = struct.unpack_from(">I", data, offset)
                offset += 4
                store: dict[bytes, set[tuple[int, int]]] = {}
                for _ in range(n_elems):
                    elem_len, n_tags = struct.unpack_from(">HI", data, offset)
                    offset += 6
                    element = data[offset:offset + elem_len]
                    if len(element) != elem_len:
                        raise SnapshotError("truncated set snapshot")
                    offset += elem_len
                    tags = set()
                    for _ in range(n_tags):
                        tags.add(_TAG.unpack_from(data, offset))
                        offset += _TAG.size
                    store[element] = tags
                stores.append(store)
            self._added, self._removed = stores
        except struct.error as exc:
            raise SnapshotError(f"bad set snapshot: {exc}") from exc
        # A recycled instance id must never reissue a tag that already exists
        # in the restored state.
        self._tag_counter = max(
            (counter for store in stores for tags in store.values()
             for origin, counter in tags if origin == self.instance_id),
            default=0)

    def query_digest(self) -> bytes:
        parts = []
        for element in self.elements():
            parts.append(struct.pack(">H", len(element)))
            parts.append(element)
        return b"".join(parts)
