"""Central finite differences, used as an independent oracle for tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .numerics import Tensor, no_grad


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, step: float = 1e-5,
                 index=None) -> np.ndarray:
    """Central-difference estimate of d fn() / d leaf.

    ``fn`` must rebuild its output from the current contents of ``leaf.data``.
    If ``index`` is given (an array of flat positions) only those entries are
    estimated and the rest of the result is NaN.
    """
    flat = leaf.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if index is None else index
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            out[i] = (up - down) / (2 * step)
    return out.reshape(leaf.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, floor); NaN entries of ``numeric`` are skipped."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.where(np.isnan(b), 0.0, err)
