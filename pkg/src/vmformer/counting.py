"""Instrumented multiply-accumulate tally.

Primitive ops call :func:`charge` with their cost. Nothing is recorded unless a
:func:`tally` context is open, so the hook is free during normal training.
Costs land in the innermost :func:`scope` category.
"""

from collections import defaultdict
from contextlib import contextmanager

_tallies = []
_scopes = ["other"]


class Tally:
    def __init__(self):
        self.by_category = defaultdict(int)

    @property
    def total(self):
        return sum(self.by_category.values())

    def __repr__(self):
        return f"Tally(total={self.total}, {dict(self.by_category)})"


def charge(n):
    if _tallies:
        cat = _scopes[-1]
        for t in _tallies:
            t.by_category[cat] += int(n)


@contextmanager
def tally():
    """Record every charged op executed inside the block."""
    t = Tally()
    _tallies.append(t)
    try:
        yield t
    finally:
        _tallies.remove(t)


@contextmanager
def scope(category):
    _scopes.append(category)
    try:
        yield
    finally:
        _scopes.pop()
