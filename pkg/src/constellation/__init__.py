"""Asynchronous state replication for geo-distributed middleboxes,
exercised end to end in a deterministic simulated WAN."""

__version__ = "0.1.0"

from .types import FlowKey, InstanceId, ObjectId, Operation  # noqa: F401
