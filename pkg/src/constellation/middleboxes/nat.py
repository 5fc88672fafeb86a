"""Network address translator with a replicated port pool and flow tables.

New flows allocate the lowest available public port and update three member
objects through one derivative record: the pool shrinks, the forward table
maps the inside five tuple to the port, and the claims table maps the port
to the inside five tuple. No replica can ever observe the pool without the
mapping.

Two instances may still race the same port for different flows. The claims
table resolves the race: its value is the inside five tuple's canonical
bytes, and the default ordering callback keeps the numerically larger five
tuple, so every replica converges on the same winner. The losing flow is
torn down with a reset verdict (counted by the harness; the client is
expected to reconnect).

The optional lease mode statically partitions the port space between
instances so concurrent allocations can never collide, at the cost of each
instance only using its own region.
"""

from __future__ import annotations

from typing import Optional

from ..objects import DerivativeObject, FlowTable, ORSet
from ..types import FlowKey
from .packet import DIR_OUT, DROPPED, Middlebox, Packet, RESET, Verdict

PUBLIC_ADDR = 0x0A_00_00_01


def claim_key(public_port: int, proto: int) -> FlowKey:
    """Synthetic key under which a public port is claimed deployment-wide."""
    return FlowKey(0, PUBLIC_ADDR, 0, public_port, proto)


class Nat(Middlebox):
    def __init__(self, instance, pool_id: int, fwd_id: int, claims_id: int,
                 bundle_id: int, ports: range = range(2000, 2256),
                 lease_mode: bool = False, lease_index: int = 0,
                 lease_count: int = 1):
        super().__init__(instance)
        self.pool = ORSet(pool_id, instance.instance_id)
        self.fwd = FlowTable(fwd_id)
        self.claims = FlowTable(claims_id)
        self.bundle = DerivativeObject(bundle_id, {
            pool_id: self.pool, fwd_id: self.fwd, claims_id: self.claims})
        self.ports = ports
        self.lease_mode = lease_mode
        self.lease_index = lease_index
        self.lease_count = lease_count
        self.dead_flows: set[FlowKey] = set()
        self.resets = 0
        self._scan_from = 0  # ports below this are gone for good
        for obj in (self.pool, self.fwd, self.claims, self.bundle):
            instance.register(obj)
        self._seed_pool()

    def _seed_pool(self) -> None:
        # identical pre-seeded pool everywhere: same element, same tag, so
        # any instance's remove tombstones the port deployment-wide
        for port in self.ports:
            self.pool.apply(ORSet.build_add(port.to_bytes(2, "big"), (0, port)))

    def _available_port(self) -> Optional[int]:
        # lowest-numbered available (and, under leasing, owned) port; ports
        # never return to the pool, so the scan start only moves forward
        for idx in range(self._scan_from, len(self.ports)):
            port = self.ports[idx]
            mine = not self.lease_mode or port % self.lease_count == self.lease_index
            if mine and self.pool.contains(port.to_bytes(2, "big")):
                self._scan_from = idx
                return port
            self._scan_from = idx + 1
        return None

    def handle(self, pkt: Packet, now: int) -> Verdict:
        if pkt.direction == DIR_OUT:
            return self._outbound(pkt)
        return self._inbound(pkt)

    def _outbound(self, pkt: Packet) -> Verdict:
        key = pkt.key
        if key in self.dead_flows:
            return RESET
        mapped = self.fwd.value(key)
        if mapped is not None:
            port = int.from_bytes(mapped, "big")
            winner = self.claims.value(claim_key(port, key.proto))
            if winner is not None and winner != key.to_bytes():
                # lost the port race; tear the flow down
                self.dead_flows.add(key)
                self.resets += 1
                return RESET
            return Verdict("translated", port)
        port = self._available_port()
        if port is None:
            self.instance.diag("nat_pool_empty")
            return DROPPED
        element = port.to_bytes(2, "big")
        remove = self.pool.build_remove_observed(element)
        subs = [(self.fwd.object_id, FlowTable.build_add(key, element)),
                (self.claims.object_id,
                 FlowTable.build_add(claim_key(port, key.proto), key.to_bytes()))]
        if remove is not None:
            subs.insert(0, (self.pool.object_id, remove))
        self.bundle.apply_multi(subs)
        return Verdict("translated", port)

    def _inbound(self, pkt: Packet) -> Verdict:
        # response arrives addressed to (public addr, public port)
        port = pkt.key.dst_port
        winner = self.claims.value(claim_key(port, pkt.key.proto))
        if winner is None:
            return DROPPED
        inside = FlowKey.from_bytes(winner)
        # the claim winner must actually be talking to this remote endpoint
        if (inside.dst_addr, inside.dst_port) != (pkt.key.src_addr, pkt.key.src_port):
            return DROPPED
        return Verdict("translated", inside.src_port)
