"""Recall-based proposal metrics: recall@tIoU, AR@AN and AUC.

A video's proposals are an ordered list of intervals (best first); AN is a
fixed per-video budget, i.e. the top-AN proposals of every video are used.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from bsn.intervals import iou_matrix

log = logging.getLogger(__name__)


def tiou_grid(lo: float = 0.5, hi: float = 0.95, step: float = 0.05) -> np.ndarray:
    n = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(n), 10)


@dataclass
class EvalConfig:
    tiou_thresholds: np.ndarray = field(default_factory=tiou_grid)
    an_max: int = 100

    def __post_init__(self):
        t = np.asarray(self.tiou_thresholds, dtype=np.float64)
        if t.size == 0 or np.any(t <= 0) or np.any(t > 1) or np.any(np.diff(t) <= 0):
            raise ValueError("tIoU thresholds must be strictly increasing within (0, 1]")
        if self.an_max < 1:
            raise ValueError("an_max must be >= 1")
        self.tiou_thresholds = t


def _segments(props) -> np.ndarray:
    rows = [(p.t_s, p.t_e) if hasattr(p, "t_s") else tuple(p) for p in props]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def first_hit_ranks(props, gt, thresholds, n_max: int | None = None) -> np.ndarray:
    """``(n_gt, n_thresholds)`` rank of the first proposal reaching each threshold.

    Unreached entries are ``inf``.  Only the first ``n_max`` proposals count.
    """
    segs = _segments(props)
    if n_max is not None:
        segs = segs[:n_max]
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    ranks = np.full((len(gt), len(thresholds)), np.inf)
    if len(segs) == 0 or len(gt) == 0:
        return ranks
    ov = iou_matrix(gt, segs)  # (n_gt, n_props)
    for j, t in enumerate(thresholds):
        hit = ov >= t
        any_hit = hit.any(axis=1)
        ranks[any_hit, j] = hit[any_hit].argmax(axis=1)
    return ranks


def recall_at(props, gt, tiou: float, n: int | None = None) -> float:
    """Fraction of ground-truth instances matched by one of the top-``n`` proposals.

    Returns ``nan`` for a video without ground truth.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(gt) == 0:
        return float("nan")
    ranks = first_hit_ranks(props, gt, [tiou], n)
    return float(np.mean(ranks[:, 0] < np.inf))


@dataclass
class ARCurve:
    an: np.ndarray
    ar: np.ndarray
    n_videos: int
    excluded_videos: list[str]
    recall_table: np.ndarray  # (n_an, n_thresholds), averaged over videos

    def at(self, an: int) -> float:
        return float(self.ar[int(an) - 1])


def average_recall_at_an(results: dict, cfg: EvalConfig | None = None) -> ARCurve:
    """AR for AN = 1..an_max over ``{video_id: (ranked_proposals, gt_instances)}``.

    Videos without ground truth are left out of the average and listed in
    ``excluded_videos``.
    """
    cfg = cfg or EvalConfig()
    an = np.arange(1, cfg.an_max + 1)
    table = np.zeros((len(an), len(cfg.tiou_thresholds)))
    per_video, excluded = [], []
    for vid in sorted(results):
        props, gt = results[vid]
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
        if len(gt) == 0:
            excluded.append(vid)
            continue
        ranks = first_hit_ranks(props, gt, cfg.tiou_thresholds, cfg.an_max)
        # recall(N, t) = mean over gt of [rank < N]
        recall = (ranks[None, :, :] < an[:, None, None]).mean(axis=1)
        table += recall
        per_video.append(recall.mean(axis=1))
    used = len(per_video)
    if used == 0:
        raise ValueError("no annotated videos to evaluate")
    if excluded:
        log.info("%d videos without ground truth excluded from recall", len(excluded))
    table /= used
    # average per-video AR so the reduction order follows the definition
    return ARCurve(an, np.mean(per_video, axis=0), used, excluded, table)


def auc_ar_an(ar, an=None) -> float:
    """Area under the AR-AN curve as a percentage of the AN span."""
    ar = np.asarray(ar, dtype=np.float64)
    if ar.size < 2:
        raise ValueError("AR curve needs at least two points")
    an = np.arange(1, ar.size + 1, dtype=np.float64) if an is None else np.asarray(an, dtype=np.float64)
    area = np.sum((ar[1:] + ar[:-1]) * np.diff(an)) / 2.0
    return float(100.0 * area / (an[-1] - an[0]))


def recall_vs_tiou(results: dict, n: int, thresholds) -> np.ndarray:
    """Mean recall at each threshold using the top-``n`` proposals per video."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    acc, used = np.zeros(len(thresholds)), 0
    for vid in sorted(results):
        props, gt = results[vid]
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
        if len(gt) == 0:
            continue
        acc += (first_hit_ranks(props, gt, thresholds, n) < np.inf).mean(axis=0)
        used += 1
    if used == 0:
        raise ValueError("no annotated videos to evaluate")
    return acc / used


def metric_report(results: dict, cfg: EvalConfig | None = None,
                  recall_budgets=(100, 1000), report_an=(1, 5, 10, 50, 100)) -> dict:
    cfg = cfg or EvalConfig()
    curve = average_recall_at_an(results, cfg)
    report = {
        "n_videos": curve.n_videos,
        "excluded_videos": curve.excluded_videos,
        "tiou_thresholds": [float(t) for t in cfg.tiou_thresholds],
        "ar_at_an": {str(a): curve.at(a) for a in report_an if a <= cfg.an_max},
    }
    if cfg.an_max >= 100:
        report["auc"] = auc_ar_an(curve.ar[:100])
    report["recall_vs_tiou"] = {
        str(n): [float(v) for v in recall_vs_tiou(results, n, cfg.tiou_thresholds)] for n in recall_budgets
    }
    report["curve"] = {"an": curve.an.tolist(), "ar": [float(v) for v in curve.ar]}
    return report
