"""Proposal generation: candidate boundaries, duration-valid pairs, BSP features."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from bsn.intervals import linear_sample

BSP_START_POINTS = 8
BSP_CENTER_POINTS = 16
BSP_END_POINTS = 8
BSP_DIM = BSP_START_POINTS + BSP_CENTER_POINTS + BSP_END_POINTS


@dataclass
class Proposal:
    t_s: float
    t_e: float
    p_start: float = 1.0
    p_end: float = 1.0
    bsp: Optional[np.ndarray] = None
    p_conf: Optional[float] = None
    p_fused: Optional[float] = None
    g_iou: Optional[float] = None
    score: Optional[float] = None

    @property
    def duration(self) -> float:
        return self.t_e - self.t_s

    @property
    def interval(self) -> tuple[float, float]:
        return (self.t_s, self.t_e)

    def to_record(self) -> dict:
        rec = {"t_s": self.t_s, "t_e": self.t_e, "p_start": self.p_start, "p_end": self.p_end}
        if self.bsp is not None:
            rec["bsp"] = [float(v) for v in self.bsp]
        if self.p_conf is not None:
            rec["p_conf"] = self.p_conf
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Proposal":
        bsp = rec.get("bsp")
        return cls(
            t_s=float(rec["t_s"]), t_e=float(rec["t_e"]),
            p_start=float(rec.get("p_start", 1.0)), p_end=float(rec.get("p_end", 1.0)),
            bsp=None if bsp is None else np.asarray(bsp, dtype=np.float64),
            p_conf=rec.get("p_conf"), p_fused=rec.get("p_fused"), score=rec.get("score"),
        )


@dataclass
class DurationBounds:
    d_min: float
    d_max: float

    def __post_init__(self):
        if not 0 < self.d_min <= self.d_max:
            raise ValueError(f"need 0 < d_min <= d_max, got ({self.d_min}, {self.d_max})")

    @classmethod
    def from_annotations(cls, annotation_sets, relax: float = 1.0) -> "DurationBounds":
        """Min/max ground-truth duration, widened by ``relax`` (>= 1) on both sides."""
        durs = [e - s for ann in annotation_sets for s, e in ann.instances]
        if not durs:
            raise ValueError("no ground-truth instances to derive duration bounds from")
        return cls(min(durs) / relax, max(durs) * relax)

    def contains(self, d: float) -> bool:
        return self.d_min <= d <= self.d_max


@dataclass
class CandidateBoundarySet:
    starts: list[tuple[int, float]] = field(default_factory=list)
    ends: list[tuple[int, float]] = field(default_factory=list)

    @property
    def n_starts(self) -> int:
        return len(self.starts)

    @property
    def n_ends(self) -> int:
        return len(self.ends)


def select_candidate_boundaries(p, threshold: float = 0.9) -> np.ndarray:
    """Indices whose probability exceeds ``threshold`` or is a strict local peak.

    End points can only qualify through the threshold rule.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probability sequence must be non-empty and 1-d")
    keep = p > threshold
    if p.size >= 3:
        keep[1:-1] |= (p[1:-1] > p[:-2]) & (p[1:-1] > p[2:])
    return np.flatnonzero(keep)


def candidate_boundaries(p_start, p_end, threshold: float = 0.9) -> CandidateBoundarySet:
    p_start = np.asarray(p_start, dtype=np.float64)
    p_end = np.asarray(p_end, dtype=np.float64)
    return CandidateBoundarySet(
        starts=[(int(i), float(p_start[i])) for i in select_candidate_boundaries(p_start, threshold)],
        ends=[(int(i), float(p_end[i])) for i in select_candidate_boundaries(p_end, threshold)],
    )


def generate_candidate_proposals(bounds: CandidateBoundarySet, db: DurationBounds) -> list[Proposal]:
    """Every (start, end) pair whose duration lies within ``db``, sorted by (t_s, t_e)."""
    props = []
    ends = sorted(bounds.ends)
    for t_s, p_s in sorted(bounds.starts):
        for t_e, p_e in ends:
            if db.contains(t_e - t_s):
                props.append(Proposal(float(t_s), float(t_e), p_s, p_e))
    return props


def construct_bsp(p_action, prop: Proposal) -> np.ndarray:
    """32-d boundary-sensitive feature sampled from the actionness sequence.

    Start and end regions extend a fifth of the duration on either side of
    the boundary; samples outside the sequence are clamped to its ends.
    """
    d = prop.t_e - prop.t_s
    if not d > 0:
        raise ValueError(f"proposal ({prop.t_s}, {prop.t_e}) has non-positive duration")
    r = d / 5.0
    return np.concatenate([
        linear_sample(p_action, (prop.t_s - r, prop.t_s + r), BSP_START_POINTS),
        linear_sample(p_action, (prop.t_s, prop.t_e), BSP_CENTER_POINTS),
        linear_sample(p_action, (prop.t_e - r, prop.t_e + r), BSP_END_POINTS),
    ])


def _sample_many(series, lo, hi, n):
    """Vectorized :func:`linear_sample` over many regions ``[lo[i], hi[i]]``."""
    # same arithmetic as intervals.sample_positions, so results agree bitwise
    pos = lo[:, None] + np.arange(n)[None, :] * ((hi - lo) / (n - 1))[:, None]
    pos = np.clip(pos, 0.0, series.size - 1)
    left = np.minimum(np.floor(pos).astype(np.int64), series.size - 2)
    frac = pos - left
    return series[left] + frac * (series[left + 1] - series[left])


def construct_bsp_batch(p_action, props: list[Proposal]) -> np.ndarray:
    """``(len(props), 32)`` BSP features; row ``i`` equals ``construct_bsp(p_action, props[i])``."""
    series = np.asarray(p_action, dtype=np.float64)
    if series.size < 2:
        raise ValueError("actionness sequence needs at least 2 points")
    if not props:
        return np.zeros((0, BSP_DIM))
    ts = np.array([p.t_s for p in props], dtype=np.float64)
    te = np.array([p.t_e for p in props], dtype=np.float64)
    if np.any(te <= ts):
        raise ValueError("proposals must have positive duration")
    r = (te - ts) / 5.0
    return np.concatenate([
        _sample_many(series, ts - r, ts + r, BSP_START_POINTS),
        _sample_many(series, ts, te, BSP_CENTER_POINTS),
        _sample_many(series, te - r, te + r, BSP_END_POINTS),
    ], axis=1)


def generate_proposals(probs, db: DurationBounds, threshold: float = 0.9) -> list[Proposal]:
    """Boundaries -> proposals -> BSP features for one video's probability sequences."""
    props = generate_candidate_proposals(candidate_boundaries(probs.p_start, probs.p_end, threshold), db)
    for prop, row in zip(props, construct_bsp_batch(probs.p_action, props)):
        prop.bsp = row
    return props
