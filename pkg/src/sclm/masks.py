"""Attention visibility relations for the four LM variants.

``allow[q, k]`` is True when query ``q`` may read key ``k``. Arrays are
0-based; ``semicausal_flow`` converts the 1-based span layout itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError
from .spans import SpanLayout


@dataclass(frozen=True)
class VisibilityMask:
    allow: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.allow, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError("visibility mask must be square")
        if a.shape[0] and not a.any(axis=1).all():
            raise ValueError("every query row needs at least one visible key")
        a.setflags(write=False)
        object.__setattr__(self, "allow", a)

    @property
    def n(self) -> int:
        return self.allow.shape[0]

    def __eq__(self, other):
        return isinstance(other, VisibilityMask) and np.array_equal(self.allow, other.allow)

    def render(self, on: str = "█", off: str = "·") -> str:
        return "\n".join("".join(on if v else off for v in row) for row in self.allow)


def causal_mask(n: int) -> VisibilityMask:
    if n < 1:
        raise ShapeError("n must be positive")
    return VisibilityMask(np.tril(np.ones((n, n), dtype=bool)))


def noncausal_mask(n: int) -> VisibilityMask:
    if n < 1:
        raise ShapeError("n must be positive")
    return VisibilityMask(np.ones((n, n), dtype=bool))


def prefix_mask(n: int, p: int) -> VisibilityMask:
    if n < 1:
        raise ShapeError("n must be positive")
    if not 0 <= p <= n:
        raise ShapeError(f"prefix length {p} outside [0, {n}]")
    allow = np.tril(np.ones((n, n), dtype=bool))
    allow[:p, :p] = True
    return VisibilityMask(allow)


def semicausal_flow(layout: SpanLayout) -> VisibilityMask:
    """Composite information flow: ``k <= q`` or both in the same span.

    This is the dependency structure of the whole encoder-plus-decoder stack,
    used as a test oracle; the decoder itself always runs ``causal_mask``.
    """
    n = layout.n
    allow = np.tril(np.ones((n, n), dtype=bool))
    for s, e in layout.spans:
        allow[s - 1:e - 1, s - 1:e - 1] = True
    return VisibilityMask(allow)


VARIANTS = ("causal", "noncausal", "prefix", "semicausal")
