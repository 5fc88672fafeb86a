"""Catalog of convergent state objects."""

from .base import StateObject
from .counters import CounterVector, PNCounter
from .derivative import DerivativeObject
from .flow_table import FlowTable, default_ordering
from .registers import LWWRegister
from .sets import ORSet
from .sketches import CountingBloomFilter, CountMinSketch

__all__ = [
    "StateObject",
    "PNCounter",
    "CounterVector",
    "LWWRegister",
    "ORSet",
    "FlowTable",
    "default_ordering",
    "CountingBloomFilter",
    "CountMinSketch",
    "DerivativeObject",
]
