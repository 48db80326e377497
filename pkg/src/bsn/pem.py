"""Proposal evaluation: IoU labelling, balanced sampling, confidence regression."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from bsn.intervals import iou_matrix
from bsn.nn import LayerStack, Optimizer, OptimizerConfig, mlp_stack, mse_loss, rowwise_forward
from bsn.pgm import BSP_DIM, Proposal

log = logging.getLogger(__name__)


@dataclass
class PemSample:
    bsp: np.ndarray
    g_iou: float


@dataclass
class PemConfig:
    pos_threshold: float = 0.7
    neg_threshold: float = 0.3
    neg_to_pos_ratio: float = 2.0
    hidden_units: int = 512
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.neg_threshold < self.pos_threshold <= 1:
            raise ValueError("need 0 <= neg_threshold < pos_threshold <= 1")
        if not self.neg_to_pos_ratio > 0:
            raise ValueError("neg_to_pos_ratio must be positive")


def max_iou(props: list[Proposal], gt) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if not props:
        return np.zeros(0)
    if len(gt) == 0:
        return np.zeros(len(props))
    return iou_matrix(np.array([p.interval for p in props]), gt).max(axis=1)


def label_proposals(props: list[Proposal], gt) -> list[PemSample]:
    """Attach the best IoU against ground truth to each proposal (0 without ground truth)."""
    if hasattr(gt, "instances"):
        gt = gt.instances
    labels = max_iou(props, gt)
    samples = []
    for prop, g in zip(props, labels):
        if prop.bsp is None:
            raise ValueError("proposal has no BSP feature")
        prop.g_iou = float(g)
        samples.append(PemSample(prop.bsp, float(g)))
    return samples


@dataclass
class SampledSet:
    samples: list[PemSample]
    n_pos: int
    n_neg: int
    no_positives: bool


def sample_training_set(samples: list[PemSample], cfg: PemConfig | None = None,
                        rng: np.random.Generator | None = None) -> SampledSet:
    """Keep every positive and a random subset of negatives (ratio negatives:positives).

    Samples with IoU between the two thresholds (inclusive) are dropped.
    """
    cfg = cfg or PemConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    pos = [s for s in samples if s.g_iou > cfg.pos_threshold]
    neg = [s for s in samples if s.g_iou < cfg.neg_threshold]
    if not pos:
        log.warning("no positive proposals; skipping this training round")
        return SampledSet([], 0, 0, True)
    n_neg = min(len(neg), int(np.floor(cfg.neg_to_pos_ratio * len(pos))))
    picked = np.sort(rng.choice(len(neg), size=n_neg, replace=False)) if n_neg else []
    chosen = pos + [neg[i] for i in picked]
    return SampledSet(chosen, len(pos), n_neg, False)


def pem_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error between confidence and IoU label."""
    return mse_loss(pred, target)


def build_pem(cfg: PemConfig | None = None, seed: int | None = None) -> LayerStack:
    cfg = cfg or PemConfig()
    return mlp_stack(BSP_DIM, [(cfg.hidden_units, "relu"), (1, "sigmoid")],
                     seed=cfg.seed if seed is None else seed)


@dataclass
class PemTrainResult:
    stack: LayerStack
    loss_history: list[float]


def default_pem_optimizer(seed: int = 0) -> OptimizerConfig:
    return OptimizerConfig(batch_size=256, schedule=[(10, 1e-3), (10, 1e-4)], seed=seed)


def train_pem(dataset: list[PemSample], opt: OptimizerConfig | None = None,
              cfg: PemConfig | None = None) -> PemTrainResult:
    if not dataset:
        raise ValueError("cannot train the proposal evaluator on an empty dataset")
    cfg = cfg or PemConfig()
    opt = opt or default_pem_optimizer(cfg.seed)
    x = np.stack([s.bsp for s in dataset])
    y = np.array([[s.g_iou] for s in dataset])
    stack = build_pem(cfg)
    optimizer = Optimizer(opt)
    rng = np.random.default_rng(opt.seed)
    history = []
    for epoch in range(opt.total_epochs):
        lr = opt.lr_at(epoch)
        order = rng.permutation(len(x))
        total = 0.0
        for lo in range(0, len(x), opt.batch_size):
            idx = order[lo:lo + opt.batch_size]
            loss, g = pem_loss(stack.forward(x[idx]), y[idx])
            total += loss * len(idx)
            stack.backward(g)
            optimizer.step(stack, lr)
        history.append(total / len(x))
        log.debug("pem epoch %d lr %g loss %.6f", epoch, lr, history[-1])
    return PemTrainResult(stack, history)


def score_proposals(stack: LayerStack, props: list[Proposal]) -> list[Proposal]:
    """Set ``p_conf`` on each proposal in place; order is preserved."""
    if not props:
        return props
    if any(p.bsp is None for p in props):
        raise ValueError("every proposal needs a BSP feature before scoring")
    conf = rowwise_forward(stack, np.stack([p.bsp for p in props]))[:, 0]
    for prop, c in zip(props, conf):
        prop.p_conf = float(c)
    return props
