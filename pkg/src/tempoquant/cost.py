"""Portable cost proxy: a count of Gaussian filter-step evaluations.

Benchmarks wrap each method run in :func:`tracking`; kernels call :func:`add`.
"""
from __future__ import annotations

import contextlib
from contextvars import ContextVar

_counter: ContextVar[list | None] = ContextVar("tempoquant_cost", default=None)


def add(n: int = 1) -> None:
    box = _counter.get()
    if box is not None:
        box[0] += int(n)


@contextlib.contextmanager
def tracking():
    box = [0]
    token = _counter.set(box)
    try:
        yield box
    finally:
        _counter.reset(token)
