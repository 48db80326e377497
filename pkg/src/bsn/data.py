"""Dataset manifests, on-disk formats, synthetic data and feature rescaling.

File formats
------------
features    CSV, one row per snippet, one column per feature dimension.
manifest    JSON ``{"format": "bsn-manifest", "version": 1, "mode": ...,
            "videos": [{"video_id", "feature_path", "duration_seconds",
            "snippet_interval", "fps", "split", "annotations": [[s, e], ...]}]}``
            with annotation times in seconds and ``feature_path`` relative to
            the manifest's directory.
probs       CSV with header ``index,p_action,p_start,p_end``.
proposals   JSON list of per-proposal records.

Times are converted to snippet indices with ``index = seconds * fps /
snippet_interval`` only when files are read or written.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bsn.pgm import Proposal
from bsn.tem import AnnotationSet, FeatureSequence, ProbabilitySequences

MANIFEST_FORMAT = "bsn-manifest"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
MODES = ("thumos", "activitynet")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------- features


def write_features_csv(path, features: np.ndarray) -> None:
    buf = io.StringIO()
    np.savetxt(buf, np.asarray(features, dtype=np.float64), delimiter=",", fmt="%.17g")
    atomic_write_text(path, buf.getvalue())


def read_features_csv(path) -> np.ndarray:
    arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return arr


def write_probabilities_csv(path, probs: ProbabilitySequences) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "p_action", "p_start", "p_end"])
    for i, (a, s, e) in enumerate(zip(probs.p_action, probs.p_start, probs.p_end)):
        w.writerow([i, repr(float(a)), repr(float(s)), repr(float(e))])
    atomic_write_text(path, buf.getvalue())


def read_probabilities_csv(path) -> ProbabilitySequences:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty probability file")
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    return ProbabilitySequences(p_start=col("p_start"), p_end=col("p_end"), p_action=col("p_action"))


def write_proposals_json(path, props: list[Proposal], final: bool = False) -> None:
    if final:
        records = [{"t_s": p.t_s, "t_e": p.t_e, "score": p.score} for p in props]
    else:
        records = [p.to_record() for p in props]
    atomic_write_text(path, json.dumps(records) + "\n")


def read_proposals_json(path) -> list[Proposal]:
    return [Proposal.from_record(r) for r in read_json(path)]


# ---------------------------------------------------------------- manifest


@dataclass
class VideoEntry:
    video_id: str
    feature_path: str
    duration_seconds: float
    snippet_interval: float = 1.0
    fps: float = 1.0
    split: str = "train"
    annotations: list[list[float]] = field(default_factory=list)
    family: int | None = None

    @property
    def seconds_per_snippet(self) -> float:
        return self.snippet_interval / self.fps

    def to_index(self, t: float) -> float:
        return t / self.seconds_per_snippet

    def to_seconds(self, idx: float) -> float:
        return idx * self.seconds_per_snippet


@dataclass
class DatasetManifest:
    videos: list[VideoEntry]
    root: Path = Path(".")
    mode: str = "thumos"
    window: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown dataset mode {self.mode!r}")
        for v in self.videos:
            if v.split not in SPLITS:
                raise ValueError(f"{v.video_id}: unknown split {v.split!r}")
            for s, e in v.annotations:
                if not (0 <= s < e <= v.duration_seconds + 1e-9):
                    raise ValueError(f"{v.video_id}: annotation [{s}, {e}] outside [0, duration]")

    def split(self, name: str) -> list[VideoEntry]:
        return [v for v in self.videos if v.split == name]

    def to_dict(self) -> dict:
        videos = []
        for v in self.videos:
            d = asdict(v)
            if d["family"] is None:
                del d["family"]
            videos.append(d)
        return {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "mode": self.mode,
                "window": self.window, "videos": videos}

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        data = read_json(path)
        if data.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path}: not a dataset manifest")
        videos = [VideoEntry(**v) for v in data["videos"]]
        return cls(videos, root=path.parent, mode=data.get("mode", "thumos"),
                   window=int(data.get("window", 100)))

    def load_video(self, entry: VideoEntry) -> tuple[FeatureSequence, AnnotationSet]:
        """Features and index-unit annotations, rescaled in activitynet mode."""
        feats = read_features_csv(self.root / entry.feature_path)
        expected = entry.duration_seconds / entry.seconds_per_snippet
        if abs(len(feats) - expected) > 1.0:
            raise ValueError(
                f"{entry.video_id}: {len(feats)} feature rows, expected about {expected:.1f}")
        fs = FeatureSequence(entry.video_id, feats, entry.snippet_interval)
        ann = AnnotationSet(entry.video_id, [(entry.to_index(s), entry.to_index(e))
                                             for s, e in entry.annotations])
        if self.mode == "activitynet":
            fs, ann = rescale_features(fs, self.window, ann)
        return fs, ann


# ---------------------------------------------------------------- rescaling


def rescale_features(fs: FeatureSequence, target_len: int, annotations: AnnotationSet | None = None):
    """Linearly resample every feature dimension onto ``target_len`` snippets.

    The new grid spans the same extent as the old one, end points included,
    so position ``p`` maps to ``p * (target_len - 1) / (l_s - 1)``; annotations
    are mapped the same way.  Returns the new sequence, plus the mapped
    annotations when given.
    """
    if target_len < 2:
        raise ValueError("target length must be >= 2")
    old = fs.length
    pos = np.linspace(0.0, old - 1.0, target_len)
    src = np.arange(old, dtype=np.float64)
    feats = np.stack([np.interp(pos, src, fs.features[:, d]) for d in range(fs.dim)], axis=1)
    if target_len == old:
        feats = fs.features.copy()
    out = FeatureSequence(fs.video_id, feats, fs.snippet_interval * (old - 1) / (target_len - 1))
    if annotations is None:
        return out
    k = (target_len - 1) / (old - 1)
    ann = AnnotationSet(annotations.video_id, [(s * k, e * k) for s, e in annotations.instances])
    return out, ann


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    """Desk-scale synthetic benchmark.

    Each video draws its instances from one pattern family.  An instance
    raises the family's channel signature inside its extent, with linear
    ramps of width ``ramp_fraction * duration`` centred on each boundary
    (0 gives a step).  ``holdout_fraction`` of the families is reserved
    for the ``test`` split.  Background clutter comes from scene cuts:
    piecewise-constant offsets in random directions (scale ``scene_scale``)
    that change with probability ``scene_cut_rate`` per snippet, so not
    every edge in feature space is an action boundary.
    """

    num_videos: int = 320
    length_range: tuple[int, int] = (180, 300)
    feature_dim: int = 8
    instances_range: tuple[int, int] = (2, 4)
    duration_range: tuple[int, int] = (10, 40)
    ramp_fraction: float = 0.1
    noise: float = 0.3
    amplitude: float = 1.0
    num_families: int = 6
    holdout_fraction: float = 0.0
    val_fraction: float = 0.2
    min_gap: int = 3
    scene_cut_rate: float = 0.05
    scene_scale: float = 1.5
    seed: int = 0

    def __post_init__(self):
        self.length_range = tuple(int(v) for v in self.length_range)
        self.instances_range = tuple(int(v) for v in self.instances_range)
        self.duration_range = tuple(int(v) for v in self.duration_range)
        lo, hi = self.length_range
        if not 2 <= lo <= hi:
            raise ValueError("invalid length range")
        if not 0 <= self.instances_range[0] <= self.instances_range[1]:
            raise ValueError("invalid instance count range")
        if not 1 <= self.duration_range[0] <= self.duration_range[1]:
            raise ValueError("invalid duration range")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.num_videos < 1 or self.num_families < 1:
            raise ValueError("need at least one video and one family")
        if not 0 <= self.holdout_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("fractions must lie in [0, 1)")
        if self.ramp_fraction < 0 or self.noise < 0 or self.scene_scale < 0:
            raise ValueError("ramp_fraction, noise and scene_scale must be non-negative")
        if not 0 <= self.scene_cut_rate <= 1:
            raise ValueError("scene_cut_rate must lie in [0, 1]")
        worst = self.instances_range[1] * (self.duration_range[1] + self.min_gap) + self.min_gap
        if worst > lo:
            raise ValueError(
                f"infeasible packing: {self.instances_range[1]} instances of up to "
                f"{self.duration_range[1]} snippets do not fit in {lo} snippets")

    @property
    def n_holdout_families(self) -> int:
        return int(round(self.num_families * self.holdout_fraction))


def family_signatures(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-family positive channel gains and texture periods."""
    gains = rng.uniform(0.4, 1.6, size=(cfg.num_families, cfg.feature_dim))
    return gains


def activation_profile(length: int, instances, ramp_fraction: float) -> np.ndarray:
    """Piecewise-linear 0..1 envelope with ramps centred on every boundary."""
    t = np.arange(length, dtype=np.float64)
    env = np.zeros(length)
    for s, e in instances:
        w = ramp_fraction * (e - s)
        if w > 0:
            up = np.clip((t - (s - w / 2)) / w, 0.0, 1.0)
            down = np.clip(((e + w / 2) - t) / w, 0.0, 1.0)
        else:
            up = (t >= s).astype(float)
            down = (t <= e).astype(float)
        env = np.maximum(env, np.minimum(up, down))
    return env


def scene_offsets(rng: np.random.Generator, length: int, cfg: SynthConfig) -> np.ndarray:
    scene = np.cumsum(rng.uniform(size=length) < cfg.scene_cut_rate)
    offsets = rng.normal(0.0, cfg.scene_scale, size=(scene[-1] + 1, cfg.feature_dim))
    return offsets[scene]


def _place_instances(rng, length, count, cfg):
    durs = rng.integers(cfg.duration_range[0], cfg.duration_range[1] + 1, size=count)
    free = length - int(durs.sum()) - cfg.min_gap * (count + 1)
    # split the free space into count + 1 random gaps
    cuts = np.sort(rng.integers(0, free + 1, size=count))
    extra = np.diff(np.concatenate([[0], cuts]))
    out, pos = [], 0
    for d, x in zip(durs, extra):
        pos += cfg.min_gap + int(x)
        out.append((pos, pos + int(d)))
        pos += int(d)
    return out


def generate_synthetic_dataset(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write feature CSVs and ``manifest.json`` under ``out_dir``; return the manifest."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    gains = family_signatures(cfg, rng)
    periods = rng.uniform(4.0, 12.0, size=cfg.num_families)
    n_hold = cfg.n_holdout_families
    held = set(range(cfg.num_families - n_hold, cfg.num_families))
    videos = []
    width = len(str(cfg.num_videos - 1))
    for i in range(cfg.num_videos):
        vid = f"video_{i:0{width}d}"
        length = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
        count = int(rng.integers(cfg.instances_range[0], cfg.instances_range[1] + 1))
        fam = int(rng.integers(cfg.num_families))
        inst = _place_instances(rng, length, count, cfg) if count else []
        feats = rng.normal(0.0, cfg.noise, size=(length, cfg.feature_dim))
        feats += scene_offsets(rng, length, cfg)
        if inst:
            env = activation_profile(length, inst, cfg.ramp_fraction)
            t = np.arange(length)
            texture = 1.0 + 0.25 * np.sin(2 * np.pi * t / periods[fam])
            feats += cfg.amplitude * (env * texture)[:, None] * gains[fam][None, :]
        if fam in held:
            split = "test"
        else:
            split = "val" if rng.uniform() < cfg.val_fraction else "train"
        path = f"features/{vid}.csv"
        write_features_csv(out_dir / path, feats)
        videos.append(VideoEntry(
            video_id=vid, feature_path=path, duration_seconds=float(length),
            snippet_interval=1.0, fps=1.0, split=split,
            annotations=[[float(s), float(e)] for s, e in inst], family=fam,
        ))
    manifest = DatasetManifest(videos, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
