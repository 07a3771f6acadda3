"""Non-causal span layouts and the target bookkeeping of the semi-causal objective.

Positions here are 1-based: position ``t`` holds ``ids[t - 1]``. A span
``[s, e)`` covers ``x_s .. x_{e-1}``. With ``e_0 = 1`` and ``s_{k+1} = n`` the
objective scores every ``t`` in ``[e_i, s_{i+1}]`` for ``i = 0..k``; the BOS
at position 1 is never scored. So the first token of a span is still a
target (predicted causally from the position before it), the remaining span
tokens are not, and the token right after a span is predicted from the
span's last position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ContractError
from .textdata import PAD, PackedSequence


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class SpanLayout:
    n: int
    spans: tuple[tuple[int, int], ...] = ()
    # modality per span; defaults to text for every span
    modalities: tuple[str, ...] = field(default=())

    def __post_init__(self):
        spans = tuple((int(s), int(e)) for s, e in self.spans)
        object.__setattr__(self, "spans", spans)
        if not self.modalities:
            object.__setattr__(self, "modalities", ("text",) * len(spans))
        elif len(self.modalities) != len(spans):
            raise LayoutError("one modality per span is required")
        prev_end = 1
        for s, e in spans:
            if not (2 <= s < e <= self.n + 1):
                raise LayoutError(f"span [{s},{e}) outside [2, {self.n + 1})")
            if s < prev_end:
                raise LayoutError(f"span [{s},{e}) overlaps or is out of order")
            prev_end = e

    @property
    def k(self) -> int:
        return len(self.spans)

    def covered(self) -> int:
        return sum(e - s for s, e in self.spans)

    def span_of(self) -> np.ndarray:
        """Array indexed by 1-based position (entry 0 unused): span index or -1."""
        owner = np.full(self.n + 1, -1, dtype=np.int64)
        for i, (s, e) in enumerate(self.spans):
            owner[s:e] = i
        return owner

    def format(self) -> str:
        return " ".join(f"[{s},{e})" for s, e in self.spans)


def validate_layout(layout: SpanLayout, seq: PackedSequence) -> None:
    """Check document confinement and PAD exclusion against a packed sequence."""
    if layout.n != seq.n:
        raise LayoutError(f"layout length {layout.n} != sequence length {seq.n}")
    pads = seq.ids == PAD
    for s, e in layout.spans:
        a, b = s - 1, e - 1
        if pads[a:b].any():
            raise LayoutError(f"span [{s},{e}) covers padding")
        if not any(ds <= a and b <= de for ds, de in seq.doc_spans):
            raise LayoutError(f"span [{s},{e}) crosses a document boundary")


@dataclass
class SampleReport:
    budget: int
    covered: int
    rejections: int

    @property
    def shortfall(self) -> int:
        return max(0, self.budget - self.covered)


def sample_spans(seq: PackedSequence, ratio: float, min_len: int, max_len: int,
                 rng: np.random.Generator, report: list | None = None) -> SpanLayout:
    """Greedy rejection sampling of a span layout for one sequence.

    The budget is ``floor(ratio * non_pad_length)``. Each round draws a length
    uniformly among the values in ``[min_len, max_len]`` that either use up
    the remaining budget exactly or leave at least ``min_len`` of it, then a
    start uniformly among positions where the span fits inside one document,
    avoids PAD and position 1, and keeps a one-token gap to existing spans.
    A round with no valid start is a rejection; sampling stops when the budget
    is met, no admissible length remains, or after ``10 * k`` rejections with
    ``k`` the expected span count.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError("ratio must lie in [0, 1)")
    n = seq.n
    if not 1 <= min_len <= max_len < n:
        raise ValueError("need 1 <= min_len <= max_len < n")
    budget = int(math.floor(ratio * seq.non_pad_length()))
    # blocked[t] for 1-based t; index 0 and n+1 are sentinels
    blocked = np.ones(n + 2, dtype=bool)
    blocked[2:n + 1] = seq.ids[1:] == PAD
    doc_id = np.full(n + 2, -1, dtype=np.int64)
    for j, (a, b) in enumerate(seq.doc_spans):
        doc_id[a + 1:b + 1] = j
    expected = max(1, math.ceil(budget / ((min_len + max_len) / 2))) if budget else 0
    max_rejections = 10 * expected
    spans: list[tuple[int, int]] = []
    remaining = budget
    rejections = 0
    while remaining >= min_len and rejections < max_rejections:
        lengths = [L for L in range(min_len, max_len + 1)
                   if L == remaining or remaining - L >= min_len]
        if not lengths:
            break
        length = lengths[int(rng.integers(len(lengths)))]
        starts = _valid_starts(blocked, doc_id, length, n)
        if len(starts) == 0:
            rejections += 1
            continue
        s = int(starts[int(rng.integers(len(starts)))])
        e = s + length
        spans.append((s, e))
        # the span plus a one-token gap on each side becomes unavailable
        blocked[max(s - 1, 0):min(e + 1, n + 2)] = True
        remaining -= length
    spans.sort()
    if report is not None:
        report.append(SampleReport(budget, budget - remaining, rejections))
    return SpanLayout(n, tuple(spans))


def _valid_starts(blocked: np.ndarray, doc_id: np.ndarray, length: int, n: int) -> np.ndarray:
    # candidate starts s in [2, n - length + 1]
    last = n - length + 1
    if last < 2:
        return np.empty(0, dtype=np.int64)
    free = (~blocked[1:n + 1]).astype(np.int64)  # index t-1 for t in 1..n
    csum = np.concatenate([[0], np.cumsum(free)])
    s = np.arange(2, last + 1)
    run_free = csum[s - 1 + length] - csum[s - 1] == length
    same_doc = doc_id[s] == doc_id[s + length - 1]
    return s[run_free & same_doc]


def target_positions(layout: SpanLayout) -> np.ndarray:
    """Sorted 1-based positions that receive a log-likelihood term."""
    keep = np.ones(layout.n + 1, dtype=bool)
    keep[:2] = False
    for s, e in layout.spans:
        keep[s + 1:e] = False
    return np.flatnonzero(keep)


def prediction_source(layout: SpanLayout, t: int) -> int:
    """Decoder position whose output scores target ``t``."""
    targets = target_positions(layout)
    idx = np.searchsorted(targets, t)
    if idx >= len(targets) or targets[idx] != t:
        raise ContractError(f"position {t} is not a target of this layout")
    for s, e in layout.spans:
        if t == e:
            return e - 1
    return t - 1


def supervision(layout: SpanLayout, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """0-based (source row, target id) arrays for all non-PAD targets."""
    targets = target_positions(layout)
    sources = targets - 1  # the span-edge rule coincides with t - 1
    tok = ids[targets - 1]
    keep = tok != PAD
    return sources[keep] - 1, tok[keep]
