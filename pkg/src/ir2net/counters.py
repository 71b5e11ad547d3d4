"""Process-wide operation counters and the layer-cost trace used by the accountant."""

from __future__ import annotations

import contextlib
from collections import Counter
from dataclasses import dataclass

op_counts: Counter = Counter()


def bump(name: str, n: int = 1) -> None:
    op_counts[name] += n


def reset_counts() -> None:
    op_counts.clear()


@contextlib.contextmanager
def counting():
    """Yield a fresh Counter holding only the ops executed inside the block."""
    before = op_counts.copy()
    result: Counter = Counter()
    try:
        yield result
    finally:
        after = op_counts.copy()
        after.subtract(before)
        result.update({k: v for k, v in after.items() if v})


@dataclass
class CostEntry:
    layer: str
    kind: str
    bops: int
    flops: int
    out_shape: tuple
    macs: int = 0
    interior: bool = False


_trace: list[list[CostEntry]] = []


@contextlib.contextmanager
def tracing():
    """Collect a CostEntry for every layer executed inside the block."""
    entries: list[CostEntry] = []
    _trace.append(entries)
    try:
        yield entries
    finally:
        _trace.pop()


def tracing_active() -> bool:
    return bool(_trace)


def emit(entry: CostEntry) -> None:
    if _trace:
        _trace[-1].append(entry)
