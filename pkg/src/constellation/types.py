"""Core wire-level types shared by every layer.

Everything that crosses an instance boundary is built from two primitives:
an ``Operation`` (opcode plus a short list of byte-string operands) and a
``FlowKey`` (a five tuple with a fixed 13-byte canonical form). All integer
encodings are big-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

ObjectId = int    # unsigned 32-bit, unique per deployment
InstanceId = int  # unsigned 16-bit, orchestrator-assigned

OPERAND_MAX = 64          # bytes per operand
OPERAND_COUNT_MAX = 255   # operands per operation
U64_MAX = 2**64 - 1
I64_MAX = 2**63 - 1
I64_MIN = -(2**63)


class ConstellationError(Exception):
    """Base class for errors raised by this package."""


class ProtocolError(ConstellationError):
    """Malformed or truncated wire data."""


class RegistrationError(ConstellationError):
    """Object registration misuse (unknown id, non-member sub-op, ...)."""


class SnapshotError(ConstellationError):
    """Snapshot bytes that cannot be decoded or do not match local config."""


class ConfigError(ConstellationError):
    """Invalid topology or experiment configuration."""


# Opcodes are global so any operation can be decoded without knowing the
# target object's kind first.
OP_INC = 1
OP_DEC = 2
OP_SET = 3          # LWW register write
OP_SET_ADD = 4      # OR-set add
OP_SET_REMOVE = 5   # OR-set remove (carries observed tags)
OP_TABLE_ADD = 6    # flow table add
OP_COUNT = 7        # CBF/CMS count; pairs of (key, amount)
OP_VEC_ADD = 8      # counter-vector add at index
OP_DERIVATIVE = 9   # composite multi-object update
OP_BATCH = 10       # coalesced run of same-object operations

_OP_HEADER = struct.Struct(">BB")
_LEN16 = struct.Struct(">H")


@dataclass(frozen=True)
class Operation:
    """One self-contained state update: opcode plus ordered byte operands."""

    opcode: int
    operands: tuple[bytes, ...] = ()

    def __post_init__(self):
        if not 0 <= self.opcode <= 255:
            raise ValueError(f"opcode {self.opcode} out of range")
        if len(self.operands) > OPERAND_COUNT_MAX:
            raise ValueError(f"too many operands ({len(self.operands)})")
        for o in self.operands:
            if len(o) > OPERAND_MAX:
                raise ValueError(f"operand of {len(o)} bytes exceeds {OPERAND_MAX}")

    def encode(self) -> bytes:
        """Canonical encoding: opcode u8, operand count u8, then
        length-prefixed (u16) operand byte strings."""
        parts = [_OP_HEADER.pack(self.opcode, len(self.operands))]
        for o in self.operands:
            parts.append(_LEN16.pack(len(o)))
            parts.append(o)
        return b"".join(parts)

    @property
    def encoded_size(self) -> int:
        return 2 + sum(2 + len(o) for o in self.operands)

    @classmethod
    def decode_from(cls, buf: bytes, offset: int = 0) -> tuple["Operation", int]:
        """Decode one operation starting at ``offset``; returns (op, next offset)."""
        if offset + 2 > len(buf):
            raise ProtocolError("truncated operation header")
        opcode, count = _OP_HEADER.unpack_from(buf, offset)
        offset += 2
        operands = []
        for _ in range(count):
            if offset + 2 > len(buf):
                raise ProtocolError("truncated operand length")
            (n,) = _LEN16.unpack_from(buf, offset)
            offset += 2
            if n > OPERAND_MAX:
                raise ProtocolError(f"operand length {n} exceeds {OPERAND_MAX}")
            if offset + n > len(buf):
                raise ProtocolError("truncated operand")
            operands.append(buf[offset:offset + n])
            offset += n
        return cls(opcode, tuple(operands)), offset


_FLOWKEY = struct.Struct(">IIHHB")

FLOWKEY_BYTES = 13


@dataclass(frozen=True, order=True)
class FlowKey:
    """Five-tuple flow identifier.

    The canonical form is 13 bytes: src addr u32, dst addr u32, src port
    u16, dst port u16, protocol u8. Byte-wise comparison of the canonical
    form equals big-endian numeric comparison, which is what tie-breaking
    rules rely on.
    """

    src_addr: int
    dst_addr: int
    src_port: int
    dst_port: int
    proto: int

    def to_bytes(self) -> bytes:
        return _FLOWKEY.pack(self.src_addr, self.dst_addr,
                             self.src_port, self.dst_port, self.proto)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FlowKey":
        if len(data) != FLOWKEY_BYTES:
            raise ProtocolError(f"flow key must be {FLOWKEY_BYTES} bytes, got {len(data)}")
        return cls(*_FLOWKEY.unpack(data))

    def reversed(self) -> "FlowKey":
        """Key of the reverse direction (addresses and ports swapped)."""
        return FlowKey(self.dst_addr, self.src_addr,
                       self.dst_port, self.src_port, self.proto)

    def __str__(self) -> str:
        return (f"{self.src_addr:08x}:{self.src_port}>"
                f"{self.dst_addr:08x}:{self.dst_port}/{self.proto}")


def u64(x: int) -> bytes:
    return x.to_bytes(8, "big")


def u32(x: int) -> bytes:
    return x.to_bytes(4, "big")


def u16(x: int) -> bytes:
    return x.to_bytes(2, "big")


def saturate_u64(x: int) -> int:
    """Clamp to the u64 range instead of wrapping."""
    if x < 0:
        return 0
    return x if x <= U64_MAX else U64_MAX
