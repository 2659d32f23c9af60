"""File-access audit for the no-annotation contract.

A process-wide ``sys`` audit hook watches every ``open`` call. While a
guarded stage is active, opening any watched path (the ground-truth file, or
proposals for image-level baselines) is recorded as a violation.
"""

from __future__ import annotations

import os
import sys
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

from .datamodel import NSODError


class AuditViolation(NSODError):
    pass


@dataclass
class AccessLog:
    watched: set = field(default_factory=set)
    entries: list = field(default_factory=list)  # (stage, path)

    def watch(self, path):
        self.watched.add(os.path.realpath(path))

    def violations(self, stages=None) -> list:
        return [e for e in self.entries if stages is None or e[0] in stages]

    def check(self, stages=None):
        bad = self.violations(stages)
        if bad:
            listing = ", ".join(f"{s}: {p}" for s, p in bad)
            raise AuditViolation(f"guarded files were read during guarded stages ({listing})")


_state = threading.local()
_installed = False


def _hook(event, args):
    if event != "open":
        return
    stack = getattr(_state, "stack", None)
    if not stack:
        return
    path = args[0]
    if not isinstance(path, (str, bytes, os.PathLike)):
        return
    log, stage = stack[-1]
    if not log.watched:
        return
    try:
        real = os.path.realpath(os.fsdecode(path))
    except (TypeError, ValueError):
        return
    if real in log.watched:
        log.entries.append((stage, real))


def _install():
    global _installed
    if not _installed:
        sys.addaudithook(_hook)
        _installed = True


@contextmanager
def guarded(log: AccessLog, stage: str):
    """Record reads of ``log.watched`` paths made inside this block under ``stage``."""
    _install()
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    stack.append((log, stage))
    try:
        yield log
    finally:
        stack.pop()
