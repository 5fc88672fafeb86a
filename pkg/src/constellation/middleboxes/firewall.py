"""Stateful firewall for asymmetric routing.

Connections may only originate inside: an outbound packet records its flow
in a replicated table, and an inbound packet passes only if the reversed
key is present locally. When request and response streams traverse
different instances, the response passes once the request's table entry
has replicated; a response racing ahead of replication is dropped (the
endpoint's retry then passes).
"""

from __future__ import annotations

from ..objects import FlowTable
from .packet import DIR_OUT, DROPPED, Middlebox, Packet, PASSED, Verdict

SEEN_REQUEST = b"\x01"


class Firewall(Middlebox):
    def __init__(self, instance, table_id: int):
        super().__init__(instance)
        self.table = FlowTable(table_id)
        instance.register(self.table)

    def handle(self, pkt: Packet, now: int) -> Verdict:
        if pkt.direction == DIR_OUT:
            if self.table.value(pkt.key) is None:
                self.table.add(pkt.key, SEEN_REQUEST)
            return PASSED
        if self.table.value(pkt.key.reversed()) is not None:
            return PASSED
        return DROPPED
