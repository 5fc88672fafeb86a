import random

import pytest

from constellation.log_store import LogRecord
from constellation.types import Operation, ProtocolError
from constellation.wire import (FLAG_JOIN, FLAG_KEEPALIVE, FLAG_SNAP_CHUNK,
                                HEADER_SIZE, MAX_DATAGRAM, StateMessage,
                                batch_records, record_wire_size)


def test_header_layout_bit_exact():
    msg = StateMessage(sender=1, object_id=2, flags=FLAG_KEEPALIVE,
                       send_timestamp=0x0102030405060708,
                       acks={3: 9})
    data = msg.encode()
    assert data[:2] == b"\xc5\x7a"              # magic
    assert data[2] == 1                          # version
    assert data[3] == FLAG_KEEPALIVE             # flags
    assert data[4:6] == b"\x00\x01"              # sender
    assert data[6:10] == b"\x00\x00\x00\x02"     # object
    assert data[10:12] == b"\x00\x00"            # record count
    assert data[12:14] == b"\x00\x01"            # ack count
    assert data[14:22] == bytes.fromhex("0102030405060708")
    assert data[22:24] == b"\x00\x03"            # ack entry instance
    assert data[24:32] == (9).to_bytes(8, "big")
    assert len(data) == HEADER_SIZE + 10


def test_roundtrip_with_records_and_acks():
    records = [LogRecord(7, Operation(1, (b"\x16",)), seq=5, coalesced_span=1),
               LogRecord(7, Operation(7, (b"ab", b"\x00\x00\x00\x02")), seq=9,
                         coalesced_span=4)]
    msg = StateMessage(sender=2, object_id=7, records=records,
                       acks={1: 11, 2: 5}, send_timestamp=77)
    decoded = StateMessage.decode(msg.encode())
    assert decoded.sender == 2 and decoded.object_id == 7
    assert [(r.seq, r.coalesced_span, r.op) for r in decoded.records] == \
        [(r.seq, r.coalesced_span, r.op) for r in records]
    assert decoded.acks == {1: 11, 2: 5}
    assert decoded.send_timestamp == 77


def test_bad_magic_rejected():
    data = bytearray(StateMessage(sender=1, object_id=1).encode())
    data[0] = 0x00
    with pytest.raises(ProtocolError):
        StateMessage.decode(bytes(data))


def test_truncation_rejected_everywhere():
    msg = StateMessage(sender=2, object_id=7,
                       records=[LogRecord(7, Operation(1, (b"\x16",)), 5)],
                       acks={1: 11}, send_timestamp=77)
    data = msg.encode()
    for cut in range(0, len(data)):
        with pytest.raises(ProtocolError):
            StateMessage.decode(data[:cut])


def test_trailing_garbage_rejected():
    data = StateMessage(sender=1, object_id=1).encode() + b"\x00"
    with pytest.raises(ProtocolError):
        StateMessage.decode(data)


def test_snapshot_chunk_roundtrip():
    msg = StateMessage(sender=3, object_id=0, flags=FLAG_SNAP_CHUNK,
                       snap_offset=2048, snap_total=9000,
                       snap_payload=b"z" * 128, acks={1: 4})
    decoded = StateMessage.decode(msg.encode())
    assert decoded.snap_offset == 2048
    assert decoded.snap_total == 9000
    assert decoded.snap_payload == b"z" * 128
    assert decoded.acks == {1: 4}


def test_control_flags_quiescence_relevance():
    assert StateMessage(sender=1, object_id=0, flags=FLAG_JOIN).quiescence_relevant()
    assert not StateMessage(sender=1, object_id=0,
                            flags=FLAG_KEEPALIVE).quiescence_relevant()


def test_random_roundtrips():
    rng = random.Random(5)
    for _ in range(200):
        records = []
        for _ in range(rng.randrange(0, 6)):
            operands = tuple(rng.randbytes(rng.randrange(0, 20))
                             for _ in range(rng.randrange(0, 4)))
            records.append(LogRecord(3, Operation(rng.randrange(256), operands),
                                     seq=rng.randrange(1, 1000),
                                     coalesced_span=rng.randrange(1, 9)))
        msg = StateMessage(sender=rng.randrange(2**16), object_id=3,
                           records=records,
                           acks={i: rng.randrange(2**32) for i in
                                 rng.sample(range(10), rng.randrange(0, 5))},
                           send_timestamp=rng.randrange(2**40))
        decoded = StateMessage.decode(msg.encode())
        assert decoded.acks == msg.acks
        assert [(r.seq, r.coalesced_span, r.op) for r in decoded.records] == \
            [(r.seq, r.coalesced_span, r.op) for r in msg.records]


def test_batching_respects_datagram_budget():
    records = [LogRecord(1, Operation(1, (bytes(40),)), seq=i)
               for i in range(1, 201)]
    groups = batch_records(records, ack_count=4)
    assert sum(len(g) for g in groups) == 200
    for group in groups:
        msg = StateMessage(sender=1, object_id=1, records=group,
                           acks={i: 1 for i in range(4)})
        assert len(msg.encode()) <= MAX_DATAGRAM
    assert record_wire_size(records[0]) == 12 + 2 + 2 + 40
