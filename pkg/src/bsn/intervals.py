"""Temporal interval arithmetic and interpolation sampling.

Intervals are ``(start, end)`` pairs in snippet-index units.  Anything with
``start``/``end`` attributes or a two-element sequence is accepted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

REGION_TAGS = ("action", "start", "end", "location", "center")


@dataclass(frozen=True)
class TemporalInterval:
    start: float
    end: float

    def __post_init__(self):
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise ValueError(f"interval bounds must be finite, got {self!r}")
        if not self.end > self.start:
            raise ValueError(f"interval must have end > start, got {self!r}")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def __iter__(self):
        yield self.start
        yield self.end


@dataclass(frozen=True)
class Region(TemporalInterval):
    tag: str = "action"

    def __post_init__(self):
        super().__post_init__()
        if self.tag not in REGION_TAGS:
            raise ValueError(f"unknown region tag {self.tag!r}")


IntervalLike = Union[TemporalInterval, Sequence[float]]


def _bounds(a: IntervalLike) -> tuple[float, float]:
    if isinstance(a, TemporalInterval):
        return a.start, a.end
    s, e = a
    return float(s), float(e)


def intersection(a: IntervalLike, b: IntervalLike) -> float:
    a0, a1 = _bounds(a)
    b0, b1 = _bounds(b)
    return max(0.0, min(a1, b1) - max(a0, b0))


def iou(a: IntervalLike, b: IntervalLike) -> float:
    """Temporal intersection over union of two intervals."""
    a0, a1 = _bounds(a)
    b0, b1 = _bounds(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union


def iop(a: IntervalLike, g: IntervalLike) -> float:
    """Intersection of ``a`` with ``g`` divided by the length of ``a``."""
    a0, a1 = _bounds(a)
    return intersection(a, g) / (a1 - a0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between interval arrays of shape (n, 2) and (m, 2)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    lo = np.maximum(a[:, None, 0], b[None, :, 0])
    hi = np.minimum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(hi - lo, 0.0, None)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    return inter / union


def iop_matrix(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pairwise IoP of each row of ``a`` against each row of ``g``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(g, dtype=np.float64).reshape(-1, 2)
    lo = np.maximum(a[:, None, 0], g[None, :, 0])
    hi = np.minimum(a[:, None, 1], g[None, :, 1])
    inter = np.clip(hi - lo, 0.0, None)
    return inter / (a[:, 1] - a[:, 0])[:, None]


def sample_positions(region: IntervalLike, n: int) -> np.ndarray:
    """Endpoint-inclusive, equally spaced positions across ``region``."""
    if n < 2:
        raise ValueError(f"need at least 2 sample points, got {n}")
    s, e = _bounds(region)
    return s + np.arange(n) * ((e - s) / (n - 1))


def linear_sample(series, region: IntervalLike, n: int) -> np.ndarray:
    """Sample the piecewise-linear extension of ``series`` at ``n`` points over ``region``.

    Query positions falling outside ``[0, len(series) - 1]`` are clamped to
    the nearest end of the series.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 1 or series.size == 0:
        raise ValueError("series must be a non-empty 1-d sequence")
    if series.size < 2:
        raise ValueError("series needs at least 2 points for interpolation")
    pos = np.clip(sample_positions(region, n), 0.0, series.size - 1)
    left = np.minimum(np.floor(pos).astype(np.int64), series.size - 2)
    frac = pos - left
    return series[left] + frac * (series[left + 1] - series[left])
