"""Score fusion and redundant-proposal suppression."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from bsn.intervals import iou_matrix
from bsn.pgm import Proposal


@dataclass
class NmsConfig:
    mode: str = "soft_gaussian"
    threshold: float = 0.65
    epsilon: float = 0.75
    score_floor: float = 0.0

    def __post_init__(self):
        if self.mode not in ("soft_gaussian", "greedy"):
            raise ValueError(f"unknown nms mode {self.mode!r}")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def fuse_scores(props: list[Proposal], use_confidence: bool = True) -> list[Proposal]:
    """``p_fused = p_conf * p_start * p_end`` (confidence omitted when disabled)."""
    for prop in props:
        if prop.p_start is None or prop.p_end is None:
            raise ValueError("proposal is missing a boundary probability")
        if use_confidence:
            if prop.p_conf is None:
                raise ValueError("proposal is missing its confidence score")
            prop.p_fused = prop.p_conf * prop.p_start * prop.p_end
        else:
            prop.p_fused = prop.p_start * prop.p_end
    return props


def _prepare(props: list[Proposal]):
    if any(p.p_fused is None for p in props):
        raise ValueError("every proposal needs a fused score before suppression")
    # lexicographic (t_s, t_e) order makes argmax break score ties deterministically
    ordered = sorted(props, key=lambda p: (p.t_s, p.t_e))
    segs = np.array([p.interval for p in ordered], dtype=np.float64).reshape(-1, 2)
    scores = np.array([p.p_fused for p in ordered], dtype=np.float64)
    return ordered, segs, scores


def _emit(ordered, picks, scores):
    out = []
    for i in picks:
        p = copy.copy(ordered[i])
        p.score = float(scores[i])
        out.append(p)
    out.sort(key=lambda p: (-p.score, p.t_s, p.t_e))
    return out


def soft_nms(props: list[Proposal], cfg: NmsConfig | None = None) -> list[Proposal]:
    """Gaussian Soft-NMS; returns copies with ``score`` set, sorted descending.

    Each round the best remaining proposal is fixed and every remaining one
    overlapping it by at least ``threshold`` IoU has its score multiplied by
    ``exp(-iou**2 / epsilon)``.
    """
    cfg = cfg or NmsConfig()
    if not props:
        return []
    ordered, segs, scores = _prepare(props)
    scores = scores.copy()
    alive = np.ones(len(ordered), dtype=bool)
    picks = []
    for _ in range(len(ordered)):
        masked = np.where(alive, scores, -np.inf)
        m = int(np.argmax(masked))
        picks.append(m)
        alive[m] = False
        rest = np.flatnonzero(alive)
        if rest.size == 0:
            break
        ov = iou_matrix(segs[m:m + 1], segs[rest])[0]
        hit = ov >= cfg.threshold
        scores[rest[hit]] *= np.exp(-(ov[hit] ** 2) / cfg.epsilon)
    out = _emit(ordered, picks, scores)
    if cfg.score_floor > 0:
        out = [p for p in out if p.score >= cfg.score_floor]
    return out


def greedy_nms(props: list[Proposal], cfg: NmsConfig | None = None) -> list[Proposal]:
    """Classic NMS: keep the best, drop everything overlapping it by >= threshold, repeat."""
    cfg = cfg or NmsConfig(mode="greedy")
    if not props:
        return []
    ordered, segs, scores = _prepare(props)
    alive = np.ones(len(ordered), dtype=bool)
    picks = []
    while alive.any():
        m = int(np.argmax(np.where(alive, scores, -np.inf)))
        picks.append(m)
        alive[m] = False
        rest = np.flatnonzero(alive)
        if rest.size:
            alive[rest[iou_matrix(segs[m:m + 1], segs[rest])[0] >= cfg.threshold]] = False
    return _emit(ordered, picks, scores)


def suppress(props: list[Proposal], cfg: NmsConfig) -> list[Proposal]:
    return soft_nms(props, cfg) if cfg.mode == "soft_gaussian" else greedy_nms(props, cfg)
