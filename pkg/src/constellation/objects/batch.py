"""Packing a run of same-object operations into one batch operation.

Used by kinds whose operations cannot always be merged arithmetically
(set updates, table adds): the batch operation carries each sub-operation's
full encoding as an operand, so applying the batch applies the run.
"""

from __future__ import annotations

import struct
from typing import Optional, Sequence

from ..types import OP_BATCH, OPERAND_COUNT_MAX, OPERAND_MAX, Operation

_COUNT = struct.Struct(">H")


def build_batch(subs: Sequence[Operation]) -> Optional[Operation]:
    """Pack sub-operations into one OP_BATCH, or None when they don't fit."""
    if len(subs) == 1:
        return subs[0]
    encoded = [s.encode() for s in subs]
    if 1 + len(encoded) > OPERAND_COUNT_MAX or any(len(e) > OPERAND_MAX for e in encoded):
        return None
    return Operation(OP_BATCH, (_COUNT.pack(len(encoded)), *encoded))


def iter_batch(op: Operation) -> list[Operation]:
    (count,) = _COUNT.unpack_from(op.operands[0], 0)
    return [Operation.decode_from(raw)[0] for raw in op.operands[1:1 + count]]
