"""Audit of raw-data reads during federated runs.

A run opens an :class:`IsolationAudit`; every local-training task enters
``audit.local(silo_id)`` before touching data. Any raw read of a silo from
outside its own local scope (including from the orchestrator) counts as a
cross-silo access.
"""

from __future__ import annotations

import contextvars
import threading
from collections import Counter
from contextlib import contextmanager

_scope: contextvars.ContextVar = contextvars.ContextVar("fedsilo_scope", default=None)


class IsolationAudit:
    def __init__(self):
        self.cross_silo_accesses = 0
        self.reads = Counter()
        self._lock = threading.Lock()

    @contextmanager
    def run(self):
        """Orchestrator scope: raw reads in here are violations."""
        token = _scope.set((self, None))
        try:
            yield self
        finally:
            _scope.reset(token)

    @contextmanager
    def local(self, silo_id):
        token = _scope.set((self, silo_id))
        try:
            yield self
        finally:
            _scope.reset(token)

    def _record(self, owner, silo_id):
        with self._lock:
            self.reads[(owner, silo_id)] += 1
            if owner != silo_id:
                self.cross_silo_accesses += 1


def record_access(silo_id) -> None:
    active = _scope.get()
    if active is not None:
        audit, owner = active
        audit._record(owner, silo_id)
