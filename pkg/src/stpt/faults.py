"""Named fault switches used by the verification battery to prove its checks
can fail. Nothing enables them outside ``inject``."""

from __future__ import annotations

import threading
from contextlib import contextmanager

KNOWN = ("causal_mask", "self_mask")

_local = threading.local()


def _active() -> set[str]:
    if not hasattr(_local, "names"):
        _local.names = set()
    return _local.names


def active(name: str) -> bool:
    return name in _active()


@contextmanager
def inject(*names: str):
    for n in names:
        if n not in KNOWN:
            raise ValueError(f"unknown fault {n!r}; known: {KNOWN}")
    added = set(names) - _active()
    _active().update(added)
    try:
        yield
    finally:
        _active().difference_update(added)
