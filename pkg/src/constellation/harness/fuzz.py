"""Object graphs and random drivers for the convergence fuzz.

Each kind builds the same small object graph on every instance (and on the
oracle, as instance 0), exposes one random local mutation, and reduces to a
digest covering everything its queries can observe.
"""

from __future__ import annotations

import random

from ..objects import (CounterVector, CountingBloomFilter, CountMinSketch,
                       DerivativeObject, FlowTable, LWWRegister, ORSet,
                       PNCounter)
from ..types import FlowKey

FUZZ_KINDS = ("counter", "register", "set", "flow_table", "cbf", "cms",
              "nat_derivative")

POOL_PORTS = range(2000, 2064)


class KindHarness:
    """One kind's objects on one instance (or the oracle when inst is 0)."""

    def __init__(self, kind: str, instance_id: int, base_id: int = 1):
        self.kind = kind
        self.instance_id = instance_id
        if kind == "counter":
            self.objects = [PNCounter(base_id)]
        elif kind == "register":
            self.objects = [LWWRegister(base_id, instance_id)]
        elif kind == "set":
            self.objects = [ORSet(base_id, instance_id)]
        elif kind == "flow_table":
            self.objects = [FlowTable(base_id)]
        elif kind == "cbf":
            self.objects = [CountingBloomFilter(base_id, m=1250, k=4, seed=17)]
        elif kind == "cms":
            self.objects = [CountMinSketch(base_id, k=4, n=512, seed=23)]
        elif kind == "vector":
            self.objects = [CounterVector(base_id, 64)]
        elif kind == "nat_derivative":
            pool = ORSet(base_id, instance_id)
            fwd = FlowTable(base_id + 1)
            claims = FlowTable(base_id + 2)
            bundle = DerivativeObject(base_id + 3, {
                pool.object_id: pool, fwd.object_id: fwd,
                claims.object_id: claims})
            for port in POOL_PORTS:
                pool.apply(ORSet.build_add(port.to_bytes(2, "big"), (0, port)))
            self.objects = [pool, fwd, claims, bundle]
        else:
            raise ValueError(f"unknown fuzz kind {kind!r}")

    def random_op(self, rng: random.Random) -> None:
        kind = self.kind
        if kind == "counter":
            self.objects[0].update(rng.randrange(-1000, 1000))
        elif kind == "register":
            self.objects[0].set(rng.randrange(2**32).to_bytes(4, "big"))
        elif kind == "set":
            element = rng.randrange(200).to_bytes(2, "big")
            if rng.random() < 0.7:
                self.objects[0].add(element)
            else:
                self.objects[0].remove(element)
        elif kind == "flow_table":
            key = FlowKey(rng.randrange(40), rng.randrange(4),
                          rng.randrange(16), 80, 6)
            value = rng.randbytes(rng.choice((1, 2, 4, 8, 48)))
            self.objects[0].add(key, value)
        elif kind in ("cbf", "cms"):
            self.objects[0].count(rng.randrange(3000).to_bytes(2, "big"),
                                  rng.randrange(1, 5000))
        elif kind == "vector":
            self.objects[0].update(rng.randrange(64), rng.randrange(-100, 100))
        elif kind == "nat_derivative":
            pool, fwd, claims, bundle = self.objects
            available = pool.elements()
            if not available:
                return
            port = available[0]
            key = FlowKey(rng.randrange(2**32), rng.randrange(2**32),
                          rng.randrange(2**16), rng.randrange(2**16),
                          rng.choice((6, 17)))
            remove = pool.build_remove_observed(port)
            subs = [(fwd.object_id, FlowTable.build_add(key, port)),
                    (claims.object_id, FlowTable.build_add(
                        FlowKey(0, 1, 0, int.from_bytes(port, "big"), 6),
                        key.to_bytes()))]
            if remove is not None:
                subs.insert(0, (pool.object_id, remove))
            bundle.apply_multi(subs)

    def digest(self) -> bytes:
        return b"|".join(o.query_digest() for o in self.objects)


def make_harness(kind: str, instance_id: int, base_id: int = 1) -> KindHarness:
    return KindHarness(kind, instance_id, base_id)


def kinds_for(selector: str) -> tuple[str, ...]:
    if selector == "all":
        return FUZZ_KINDS
    if selector not in FUZZ_KINDS and selector != "vector":
        raise ValueError(f"unknown object kind {selector!r}")
    return (selector,)
