"""Temporal evaluation module: per-location start/end/actionness probabilities.

The network is ``Conv(h,3,relu) -> Conv(h,3,relu) -> Conv(3,1,sigmoid)``
applied to non-overlapping windows of the feature sequence.  Output channel
order is ``(start, end, action)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from bsn.intervals import iop_matrix
from bsn.nn import LayerStack, Optimizer, OptimizerConfig, conv_stack

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
TASKS = ("action", "start", "end")
# network output channel for each task
CHANNEL = {"start": 0, "end": 1, "action": 2}


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray
    snippet_interval: float = 1.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a (length, dim) matrix")
        if self.features.shape[0] < 2 or self.features.shape[1] < 1:
            raise ValueError(f"feature sequence too small: {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"non-finite features in video {self.video_id!r}")

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class AnnotationSet:
    """Ground-truth instances of one video, in snippet-index units."""

    video_id: str
    instances: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.instances = [(float(s), float(e)) for s, e in self.instances]
        for s, e in self.instances:
            if not e > s:
                raise ValueError(f"instance ({s}, {e}) has non-positive duration")

    @property
    def count(self) -> int:
        return len(self.instances)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.instances, dtype=np.float64).reshape(-1, 2)


@dataclass
class TemTargets:
    g_action: np.ndarray
    g_start: np.ndarray
    g_end: np.ndarray

    def __len__(self):
        return len(self.g_action)

    def stacked(self) -> np.ndarray:
        """Targets as a ``(length, 3)`` array in network channel order."""
        return np.stack([self.g_start, self.g_end, self.g_action], axis=1)

    def window(self, lo: int, hi: int) -> "TemTargets":
        return TemTargets(self.g_action[lo:hi], self.g_start[lo:hi], self.g_end[lo:hi])


@dataclass
class TemLossConfig:
    action_weight: float = 2.0
    iop_threshold: float = 0.5
    window: int = 100

    def __post_init__(self):
        if not self.action_weight > 0:
            raise ValueError("action_weight must be positive")
        if not 0 < self.iop_threshold < 1:
            raise ValueError("iop_threshold must lie in (0, 1)")
        if self.window < 1:
            raise ValueError("window must be positive")


@dataclass
class ProbabilitySequences:
    p_start: np.ndarray
    p_end: np.ndarray
    p_action: np.ndarray

    def __post_init__(self):
        if not len(self.p_start) == len(self.p_end) == len(self.p_action):
            raise ValueError("probability sequences must have equal length")

    def __len__(self):
        return len(self.p_action)

    def stacked(self) -> np.ndarray:
        return np.stack([self.p_start, self.p_end, self.p_action], axis=1)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ProbabilitySequences":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[:, CHANNEL["start"]].copy(), arr[:, CHANNEL["end"]].copy(),
                   arr[:, CHANNEL["action"]].copy())


def assign_tem_targets(instances, length: int, snippet_spacing: float = 1.0,
                       positions=None) -> TemTargets:
    """Maximum IoP of each location region against action/start/end regions.

    Location ``n`` sits at ``positions[n]`` (default ``n * snippet_spacing``)
    and covers ``[t_n - d_s/2, t_n + d_s/2]``.  Start and end regions of a
    ground-truth instance have half-width of a tenth of its duration.
    """
    if positions is None:
        positions = np.arange(length) * snippet_spacing
    positions = np.asarray(positions, dtype=np.float64)
    gt = np.asarray(instances, dtype=np.float64).reshape(-1, 2)
    if len(gt) == 0:
        z = np.zeros(len(positions))
        return TemTargets(z, z.copy(), z.copy())
    half = snippet_spacing / 2.0
    loc = np.stack([positions - half, positions + half], axis=1)
    radius = (gt[:, 1] - gt[:, 0]) / 10.0
    starts = np.stack([gt[:, 0] - radius, gt[:, 0] + radius], axis=1)
    ends = np.stack([gt[:, 1] - radius, gt[:, 1] + radius], axis=1)
    return TemTargets(
        g_action=iop_matrix(loc, gt).max(axis=1),
        g_start=iop_matrix(loc, starts).max(axis=1),
        g_end=iop_matrix(loc, ends).max(axis=1),
    )


@dataclass
class TemLossResult:
    total: float
    per_task: dict[str, float]
    degenerate: dict[str, bool]
    grad: np.ndarray  # d total / d predictions, same shape as predictions


def _binary_logistic(p, g, mask, threshold):
    """Balanced binary logistic loss for one task and its gradient."""
    b = (g > threshold).astype(np.float64) * mask
    n = mask.sum()
    n_pos = b.sum()
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.0, np.zeros_like(p), True
    w_pos = n / n_pos
    w_neg = n / n_neg
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    neg = (1.0 - b) * mask
    loss = -np.sum(w_pos * b * np.log(pc) + w_neg * neg * np.log(1.0 - pc)) / n
    grad = -(w_pos * b / pc - w_neg * neg / (1.0 - pc)) / n
    return float(loss), grad, False


def tem_loss(pred, targets: TemTargets, config: TemLossConfig | None = None,
             mask=None) -> TemLossResult:
    """Weighted three-task loss over one window.

    ``pred`` is a ``(l_w, 3)`` array in channel order ``(start, end, action)``
    or a :class:`ProbabilitySequences`.  ``mask`` marks real (non-padded)
    positions; padded positions are excluded from the normalization.  A task
    whose window has no positives or no negatives contributes zero and is
    reported in ``degenerate``.
    """
    config = config or TemLossConfig()
    if isinstance(pred, ProbabilitySequences):
        pred = pred.stacked()
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != (len(targets), 3):
        raise ValueError(f"predictions {pred.shape} do not align with {len(targets)} targets")
    mask = np.ones(len(targets)) if mask is None else np.asarray(mask, dtype=np.float64)
    g_all = targets.stacked()
    grad = np.zeros_like(pred)
    per_task, degenerate = {}, {}
    total = 0.0
    for task in TASKS:
        c = CHANNEL[task]
        loss, g, flag = _binary_logistic(pred[:, c], g_all[:, c], mask, config.iop_threshold)
        weight = config.action_weight if task == "action" else 1.0
        per_task[task] = loss
        degenerate[task] = flag
        total += weight * loss
        grad[:, c] = weight * g
    return TemLossResult(total, per_task, degenerate, grad)


@dataclass
class TemArch:
    hidden: int = 512
    kernel: int = 3

    def layers(self):
        return [(self.hidden, self.kernel, "relu"), (self.hidden, self.kernel, "relu"), (3, 1, "sigmoid")]


def build_tem(feature_dim: int, arch: TemArch | None = None, seed: int = 0) -> LayerStack:
    arch = arch or TemArch()
    return conv_stack(feature_dim, arch.layers(), seed=seed)


def split_windows(length: int, window: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + window, length)) for lo in range(0, length, window)]


def _window_batch(features: np.ndarray, window: int):
    """Zero-padded ``(n_windows, window, D)`` array plus validity mask."""
    spans = split_windows(len(features), window)
    x = np.zeros((len(spans), window, features.shape[1]))
    mask = np.zeros((len(spans), window))
    for i, (lo, hi) in enumerate(spans):
        x[i, : hi - lo] = features[lo:hi]
        mask[i, : hi - lo] = 1.0
    return x, mask, spans


@dataclass
class TemTrainResult:
    stack: LayerStack
    loss_history: list[float]
    degenerate_windows: int = 0


def train_tem(dataset, arch: TemArch | None = None, opt: OptimizerConfig | None = None,
              loss_cfg: TemLossConfig | None = None, init_seed: int | None = None) -> TemTrainResult:
    """Train the probability network on ``[(FeatureSequence, AnnotationSet), ...]``.

    Returns the stack and the per-epoch mean window loss.  Window order is
    shuffled with ``opt.seed``; weights are initialized from ``init_seed``
    (defaults to ``opt.seed``).
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    opt = opt or OptimizerConfig()
    loss_cfg = loss_cfg or TemLossConfig()
    dims = {fs.dim for fs, _ in dataset}
    if len(dims) != 1:
        raise ValueError(f"feature dimensions differ across videos: {sorted(dims)}")
    stack = build_tem(dims.pop(), arch, seed=opt.seed if init_seed is None else init_seed)

    xs, masks, targets = [], [], []
    for fs, ann in dataset:
        x, mask, spans = _window_batch(fs.features, loss_cfg.window)
        full = assign_tem_targets(ann.instances, fs.length)
        for i, (lo, hi) in enumerate(spans):
            pad = loss_cfg.window - (hi - lo)
            t = full.window(lo, hi)
            if pad:
                t = TemTargets(*(np.pad(a, (0, pad)) for a in (t.g_action, t.g_start, t.g_end)))
            xs.append(x[i])
            masks.append(mask[i])
            targets.append(t)
    xs = np.stack(xs)
    n = len(xs)

    rng = np.random.default_rng(opt.seed)
    optimizer = Optimizer(opt)
    history = []
    degenerate = 0
    for epoch in range(opt.total_epochs):
        lr = opt.lr_at(epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, opt.batch_size):
            idx = order[lo:lo + opt.batch_size]
            out = stack.forward(xs[idx])
            grad = np.zeros_like(out)
            for j, w in enumerate(idx):
                res = tem_loss(out[j], targets[w], loss_cfg, masks[w])
                epoch_loss += res.total
                grad[j] = res.grad / len(idx)
                if epoch == 0 and any(res.degenerate.values()):
                    degenerate += 1
            stack.backward(grad)
            optimizer.step(stack, lr)
        history.append(epoch_loss / n)
        log.debug("tem epoch %d lr %g loss %.6f", epoch, lr, history[-1])
    if degenerate:
        log.info("%d of %d windows had a degenerate task", degenerate, n)
    return TemTrainResult(stack, history, degenerate)


def infer_probabilities(stack: LayerStack, fs: FeatureSequence, window: int = 100) -> ProbabilitySequences:
    """Run the network window by window and stitch the three sequences back together."""
    if fs.dim != stack.in_features:
        raise ValueError(f"feature dim {fs.dim} does not match network input {stack.in_features}")
    x, _, spans = _window_batch(fs.features, window)
    out = stack.forward(x)
    full = np.concatenate([out[i, : hi - lo] for i, (lo, hi) in enumerate(spans)])
    return ProbabilitySequences.from_array(full)
