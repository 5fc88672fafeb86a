"""Contract shared by every convergent state object.

A state object is mutated from two directions: the local packet path calls
kind-specific methods (``update``, ``add``, ``count``, ...) which build an
``Operation``, hand it to the log store via the bound recorder, and apply it
locally; the replication receiver calls :meth:`StateObject.apply` directly
with operations originated elsewhere. Both paths funnel through ``apply`` so
local and remote mutations are indistinguishable to the object.

Operations of a kind must commute with each other. Kinds whose operations
are not idempotent (the sketches) set ``requires_ordered_delivery`` and rely
on the replication layer applying each record exactly once, in order.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

from ..types import ObjectId, Operation

Recorder = Callable[[Operation], None]


class StateObject:
    kind = "abstract"
    requires_ordered_delivery = False
    # Kinds that support run-merging guarantee coalesce() consumes >= 1
    # operation of any non-empty run (falling back to the lone original).
    coalesces = True

    def __init__(self, object_id: ObjectId):
        self.object_id = object_id
        self._recorder: Optional[Recorder] = None
        self.diagnostics: dict[str, int] = {}

    def bind(self, recorder: Recorder) -> None:
        """Attach the log-store recorder used by local mutators."""
        self._recorder = recorder

    def diag(self, name: str) -> None:
        self.diagnostics[name] = self.diagnostics.get(name, 0) + 1

    def record(self, op: Operation) -> None:
        """Record a locally performed operation, then apply it."""
        if self._recorder is not None:
            self._recorder(op)
        self.apply(op)

    # -- contract methods -------------------------------------------------

    def apply(self, op: Operation) -> None:
        raise NotImplementedError

    def coalesce(self, ops: Sequence[Operation]) -> Optional[tuple[Operation, int]]:
        """Merge a run of this object's operations into one equivalent
        operation.

        Returns ``(merged, consumed)`` where ``consumed`` is how many of the
        leading operations the merge covers, or None when this kind does not
        coalesce. Applying the merged operation once must be query-equivalent
        to applying the consumed run.
        """
        return None

    def snapshot(self) -> bytes:
        raise NotImplementedError

    def restore(self, data: bytes) -> None:
        raise NotImplementedError

    def query_digest(self) -> bytes:
        """Canonical encoding of everything observable through queries.

        Two replicas are query-equivalent iff their digests are equal.
        """
        raise NotImplementedError

    def config_digest(self) -> bytes:
        """Identifies the object's configuration (hash seeds, sizes).

        Checked when state is transferred between instances so that
        configuration mismatches fail loudly instead of diverging silently.
        """
        return self.kind.encode()
