"""Stage orchestration over a working directory.

Layout under ``workdir``::

    data/manifest.json, data/features/*.csv   synthetic dataset (synth stage)
    tem/checkpoint.json, tem/history.json     trained probability network
    probs/<video>.csv                         per-video probability sequences
    pgm/duration_bounds.json                  proposal duration limits
    proposals/<video>.json                    candidate proposals with BSP
    pem/checkpoint.json, pem/history.json     trained confidence regressor
    scored/<video>.json                       proposals with confidence
    final/<video>.json                        suppressed {t_s, t_e, score} lists
    metrics/<split>/report.json, ar_an.csv, recall_tiou.csv

Every stage reads only files written by earlier stages plus the config, so
stages can be re-run independently.  Time values in ``final`` and
``metrics`` are snippet indices of the (possibly rescaled) sequence.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from bsn import evaluation
from bsn.data import (
    DatasetManifest, SynthConfig, atomic_write_text, generate_synthetic_dataset,
    read_json, read_probabilities_csv, read_proposals_json, write_json,
    write_probabilities_csv, write_proposals_json,
)
from bsn.nn import OptimizerConfig, load_stack, save_stack
from bsn.pem import PemConfig, label_proposals, sample_training_set, score_proposals, train_pem
from bsn.pgm import DurationBounds, generate_proposals
from bsn.postproc import NmsConfig, fuse_scores, suppress
from bsn.tem import TemArch, TemLossConfig, build_tem, infer_probabilities, train_tem

log = logging.getLogger(__name__)

STAGES = ("synth", "train-tem", "infer-tem", "propose", "train-pem", "score", "nms", "eval")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    tem_arch: TemArch = field(default_factory=TemArch)
    tem_opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    tem_loss: TemLossConfig = field(default_factory=TemLossConfig)
    train_tem: bool = True
    boundary_threshold: float = 0.9
    duration_relax: float = 1.0
    pem: PemConfig = field(default_factory=PemConfig)
    pem_opt: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(batch_size=256, schedule=[(10, 1e-3), (10, 1e-4)]))
    use_pem: bool = True
    nms: NmsConfig = field(default_factory=NmsConfig)
    eval: evaluation.EvalConfig = field(default_factory=evaluation.EvalConfig)
    eval_splits: tuple[str, ...] = ("val",)
    manifest: str | None = None


# ---------------------------------------------------------------- config file

def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (tuple, list)):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if current and isinstance(current[0], (int, float)) or all(_is_number(p) for p in parts):
            return tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)
        return tuple(parts)
    if current is None and raw.lower() in ("", "none"):
        return None
    return raw


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _schedule(raw: str) -> list[tuple[int, float]]:
    # "10:1e-3, 10:1e-4"
    out = []
    for part in raw.split(","):
        if part.strip():
            n, lr = part.split(":")
            out.append((int(n), float(lr)))
    return out


# section -> (attribute of PipelineConfig or None for top level, key aliases)
_SECTIONS = {
    "synth": "synth",
    "tem": "tem_arch",
    "tem.optimizer": "tem_opt",
    "tem.loss": "tem_loss",
    "pgm": None,
    "pem": "pem",
    "pem.optimizer": "pem_opt",
    "nms": "nms",
    "eval": "eval",
    "pipeline": None,
}


def _apply(cfg: PipelineConfig, section: str, key: str, raw: str) -> None:
    if section not in _SECTIONS:
        raise ValueError(f"unknown config section [{section}]")
    attr = _SECTIONS[section]
    target = cfg if attr is None else getattr(cfg, attr)
    if section == "pgm":
        key = {"threshold": "boundary_threshold", "relax": "duration_relax"}.get(key, key)
    if section == "tem" and key in ("enabled", "train"):
        cfg.train_tem = _parse_value(raw, True)
        return
    if section == "pem" and key == "enabled":
        cfg.use_pem = _parse_value(raw, True)
        return
    if section == "eval" and key == "splits":
        cfg.eval_splits = tuple(p.strip() for p in raw.split(",") if p.strip())
        return
    if section == "eval" and key == "tiou":
        lo, hi, step = (float(v) for v in raw.split(":"))
        cfg.eval.tiou_thresholds = evaluation.tiou_grid(lo, hi, step)
        return
    if key == "schedule":
        target.schedule = _schedule(raw)
        return
    names = {f.name for f in fields(target)}
    if key not in names:
        raise ValueError(f"unknown key {key!r} in section [{section}]")
    setattr(target, key, _parse_value(raw, getattr(target, key)))


def _revalidate(cfg: PipelineConfig) -> None:
    for attr in ("synth", "tem_opt", "tem_loss", "pem", "pem_opt", "nms", "eval"):
        obj = getattr(cfg, attr)
        obj.__post_init__()


def load_config(path=None, overrides: list[str] | None = None) -> PipelineConfig:
    """Read an INI config (``[section] key = value``) and apply ``section.key=value`` overrides."""
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(f"config file {path} not found")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.rsplit(".", 1)
        _apply(cfg, section.strip(), key.strip(), raw)
    _revalidate(cfg)
    return cfg


# ---------------------------------------------------------------- stages


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def __getattr__(self, name):
        # ws.tem -> root/tem and so on
        if name.startswith("_"):
            raise AttributeError(name)
        return self.root / name

    def manifest_path(self, cfg: PipelineConfig) -> Path:
        return Path(cfg.manifest) if cfg.manifest else self.root / "data" / "manifest.json"


def _load_manifest(ws: Workspace, cfg: PipelineConfig, stage: str) -> DatasetManifest:
    path = ws.manifest_path(cfg)
    if not path.exists():
        raise StageError(stage, f"manifest {path} not found; run the synth stage or set pipeline.manifest")
    try:
        manifest = DatasetManifest.load(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise StageError(stage, f"malformed manifest {path}: {exc}") from exc
    manifest.window = cfg.tem_loss.window if manifest.mode == "activitynet" else manifest.window
    return manifest


def _require(path: Path, stage: str, what: str) -> Path:
    if not path.exists():
        raise StageError(stage, f"missing {what}: {path}")
    return path


def stage_synth(ws: Workspace, cfg: PipelineConfig) -> DatasetManifest:
    try:
        return generate_synthetic_dataset(cfg.synth, ws.root / "data")
    except ValueError as exc:
        raise StageError("synth", str(exc)) from exc


def stage_train_tem(ws: Workspace, cfg: PipelineConfig) -> None:
    manifest = _load_manifest(ws, cfg, "train-tem")
    data = [manifest.load_video(v) for v in manifest.split("train")]
    if not data:
        raise StageError("train-tem", "no training videos in manifest")
    if cfg.train_tem:
        result = train_tem(data, cfg.tem_arch, cfg.tem_opt, cfg.tem_loss)
        stack, history = result.stack, result.loss_history
    else:
        log.info("TEM training disabled; saving the initialized network")
        stack, history = build_tem(data[0][0].dim, cfg.tem_arch, seed=cfg.tem_opt.seed), []
    ws.tem.mkdir(parents=True, exist_ok=True)
    save_stack(stack, ws.tem / "checkpoint.json")
    write_json(ws.tem / "history.json", {"loss": history})


def stage_infer_tem(ws: Workspace, cfg: PipelineConfig) -> None:
    manifest = _load_manifest(ws, cfg, "infer-tem")
    stack = load_stack(_require(ws.tem / "checkpoint.json", "infer-tem", "TEM checkpoint"))
    for v in manifest.videos:
        fs, _ = manifest.load_video(v)
        try:
            probs = infer_probabilities(stack, fs, cfg.tem_loss.window)
        except ValueError as exc:
            raise StageError("infer-tem", f"{v.video_id}: {exc}") from exc
        write_probabilities_csv(ws.probs / f"{v.video_id}.csv", probs)


def stage_propose(ws: Workspace, cfg: PipelineConfig) -> None:
    manifest = _load_manifest(ws, cfg, "propose")
    train_ann = [manifest.load_video(v)[1] for v in manifest.split("train")]
    try:
        db = DurationBounds.from_annotations(train_ann, cfg.duration_relax)
    except ValueError as exc:
        raise StageError("propose", str(exc)) from exc
    write_json(ws.pgm / "duration_bounds.json", {"d_min": db.d_min, "d_max": db.d_max})
    for v in manifest.videos:
        probs = read_probabilities_csv(_require(ws.probs / f"{v.video_id}.csv", "propose", "probabilities"))
        props = generate_proposals(probs, db, cfg.boundary_threshold)
        write_proposals_json(ws.proposals / f"{v.video_id}.json", props)


def stage_train_pem(ws: Workspace, cfg: PipelineConfig) -> None:
    manifest = _load_manifest(ws, cfg, "train-pem")
    samples = []
    for v in manifest.split("train"):
        props = read_proposals_json(_require(ws.proposals / f"{v.video_id}.json", "train-pem", "proposals"))
        samples.extend(label_proposals(props, manifest.load_video(v)[1]))
    picked = sample_training_set(samples, cfg.pem, np.random.default_rng(cfg.pem.seed))
    if picked.no_positives:
        raise StageError("train-pem", "no positive proposals (IoU > pos_threshold) to train on")
    log.info("PEM training set: %d positives, %d negatives", picked.n_pos, picked.n_neg)
    result = train_pem(picked.samples, cfg.pem_opt, cfg.pem)
    ws.pem.mkdir(parents=True, exist_ok=True)
    save_stack(result.stack, ws.pem / "checkpoint.json")
    write_json(ws.pem / "history.json", {"loss": result.loss_history,
                                          "n_pos": picked.n_pos, "n_neg": picked.n_neg})


def stage_score(ws: Workspace, cfg: PipelineConfig) -> None:
    manifest = _load_manifest(ws, cfg, "score")
    stack = None
    if cfg.use_pem:
        stack = load_stack(_require(ws.pem / "checkpoint.json", "score", "PEM checkpoint"))
    for v in manifest.videos:
        props = read_proposals_json(_require(ws.proposals / f"{v.video_id}.json", "score", "proposals"))
        if stack is not None:
            score_proposals(stack, props)
        fuse_scores(props, use_confidence=cfg.use_pem)
        records = []
        for p in props:
            rec = p.to_record()
            rec.pop("bsp", None)
            rec["p_fused"] = p.p_fused
            records.append(rec)
        atomic_write_text(ws.scored / f"{v.video_id}.json", _dumps(records))


def _dumps(obj) -> str:
    return json.dumps(obj) + "\n"


def stage_nms(ws: Workspace, cfg: PipelineConfig) -> None:
    manifest = _load_manifest(ws, cfg, "nms")
    for v in manifest.videos:
        props = read_proposals_json(_require(ws.scored / f"{v.video_id}.json", "nms", "scored proposals"))
        final = suppress(props, cfg.nms)
        write_proposals_json(ws.final / f"{v.video_id}.json", final, final=True)


def collect_results(ws: Workspace, manifest: DatasetManifest, split: str) -> dict:
    results = {}
    for v in manifest.split(split):
        ranked = read_json(_require(ws.final / f"{v.video_id}.json", "eval", "final proposals"))
        segs = [(r["t_s"], r["t_e"]) for r in ranked]
        results[v.video_id] = (segs, manifest.load_video(v)[1].instances)
    return results


def stage_eval(ws: Workspace, cfg: PipelineConfig) -> dict:
    manifest = _load_manifest(ws, cfg, "eval")
    reports = {}
    for split in cfg.eval_splits:
        results = collect_results(ws, manifest, split)
        if not results:
            log.warning("split %r has no videos; skipping", split)
            continue
        try:
            report = evaluation.metric_report(results, cfg.eval)
        except ValueError as exc:
            raise StageError("eval", f"{split}: {exc}") from exc
        out = ws.metrics / split
        write_json(out / "report.json", report)
        atomic_write_text(out / "ar_an.csv", _csv(["an", "ar"], zip(report["curve"]["an"], report["curve"]["ar"])))
        rows = [(t, *(report["recall_vs_tiou"][k][i] for k in sorted(report["recall_vs_tiou"], key=int)))
                for i, t in enumerate(report["tiou_thresholds"])]
        header = ["tiou"] + [f"recall@{k}" for k in sorted(report["recall_vs_tiou"], key=int)]
        atomic_write_text(out / "recall_tiou.csv", _csv(header, rows))
        reports[split] = report
    return reports


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


STAGE_FUNCS = {
    "synth": stage_synth,
    "train-tem": stage_train_tem,
    "infer-tem": stage_infer_tem,
    "propose": stage_propose,
    "train-pem": stage_train_pem,
    "score": stage_score,
    "nms": stage_nms,
    "eval": stage_eval,
}


def run_stage(name: str, workdir, cfg: PipelineConfig):
    ws = Workspace(workdir)
    try:
        return STAGE_FUNCS[name](ws, cfg)
    except StageError:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise StageError(name, str(exc)) from exc


def run_pipeline(workdir, cfg: PipelineConfig, synth: bool | None = None, skip: tuple[str, ...] = ()) -> dict:
    """Run every stage in order and return the metric reports per split.

    ``synth`` defaults to generating data only when no manifest is configured.
    Stages named in ``skip`` are not run (their outputs must already exist);
    ``train-pem`` is skipped automatically when the confidence model is disabled.
    """
    if synth is None:
        synth = cfg.manifest is None
    reports = {}
    for name in STAGES:
        if name in skip or (name == "synth" and not synth) or (name == "train-pem" and not cfg.use_pem):
            continue
        log.info("stage %s", name)
        out = run_stage(name, workdir, cfg)
        if name == "eval":
            reports = out
    return reports
