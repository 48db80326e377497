"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

Criteria 7 and 8 train the full pipeline on the synthetic benchmark and
take several minutes each.
"""

import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from bsn.cli import main
from bsn.evaluation import EvalConfig, auc_ar_an, average_recall_at_an
from bsn.intervals import iou
from bsn.nn import conv_stack, grad_check, mlp_stack, mse_loss
from bsn.pgm import (
    BSP_DIM, CandidateBoundarySet, DurationBounds, Proposal, construct_bsp,
    generate_candidate_proposals, select_candidate_boundaries,
)
from bsn.pipeline import load_config, run_pipeline
from bsn.postproc import NmsConfig, soft_nms
from bsn.tem import TemLossConfig, TemTargets, assign_tem_targets, tem_loss

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    errors = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        length, dim = 20, 4
        stack = conv_stack(dim, [(8, 3, "relu"), (8, 3, "relu"), (3, 1, "sigmoid")], seed=seed)
        x = rng.normal(size=(1, length, dim))
        starts = np.sort(rng.choice(np.arange(1, length - 4), size=2, replace=False))
        inst = [(float(s), float(s + rng.integers(2, 4))) for s in starts]
        targets = assign_tem_targets(inst, length)
        cfg = TemLossConfig(window=length)

        def loss(p, targets=targets, cfg=cfg):
            res = tem_loss(p[0], targets, cfg)
            return res.total, res.grad[None]

        errors.append(grad_check(stack, x, loss))
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        stack = mlp_stack(BSP_DIM, [(16, "relu"), (1, "sigmoid")], seed=seed)
        x, y = rng.uniform(size=(16, BSP_DIM)), rng.uniform(size=(16, 1))
        errors.append(grad_check(stack, x, lambda p, y=y: mse_loss(p, y)))
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    verdict(1, "gradient fidelity", worst < 1e-4 and elapsed < 60,
            f"max relative error {worst:.2e} over 40 stacks in {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_loss_identities(verdict):
    g = np.array([1.0, 0.0])
    res = tem_loss(np.full((2, 3), 0.5), TemTargets(g, g, g), TemLossConfig(window=2))
    per_task_ok = all(abs(v - 2 * math.log(2)) <= 1e-12 for v in res.per_task.values())
    total_ok = abs(res.total - 4 * 2 * math.log(2)) <= 1e-12
    empty = TemTargets(np.zeros(5), np.zeros(5), np.zeros(5))
    deg = tem_loss(np.random.default_rng(0).uniform(0.1, 0.9, size=(5, 3)), empty, TemLossConfig(window=5))
    deg_ok = deg.total == 0.0 and all(deg.degenerate.values()) and not np.any(deg.grad)
    verdict(2, "loss identities", per_task_ok and total_ok and deg_ok,
            f"per-task {sorted(res.per_task.values())[0]:.15f} (2 ln 2 = {2 * math.log(2):.15f}), "
            f"degenerate total {deg.total} flags {deg.degenerate}")


# ---------------------------------------------------------------- 3


def naive_soft_nms(rows, theta, eps):
    remaining = [list(r) for r in rows]
    out = {}
    while remaining:
        best = max(remaining, key=lambda r: (r[2], -r[0], -r[1]))
        remaining.remove(best)
        out[(best[0], best[1])] = best[2]
        for r in remaining:
            ov = iou((best[0], best[1]), (r[0], r[1]))
            if ov >= theta:
                r[2] *= math.exp(-ov ** 2 / eps)
    return out


def test_criterion_3_soft_nms_oracle(verdict):
    rng = np.random.default_rng(0)
    worst, monotone = 0.0, True
    for _ in range(200):
        n = int(rng.integers(1, 21))
        s = np.round(rng.uniform(0, 40, size=n), 3)
        d = np.round(rng.uniform(1, 20, size=n), 3)
        props = [Proposal(a, a + b, p_fused=c) for a, b, c in zip(s, d, rng.uniform(size=n))]
        ref = naive_soft_nms([(p.t_s, p.t_e, p.p_fused) for p in props], 0.65, 0.75)
        got = soft_nms(props, NmsConfig())
        worst = max(worst, max(abs(p.score - ref[(p.t_s, p.t_e)]) for p in got))
        monotone &= all(p.score <= p.p_fused for p in got) and len(got) == n
    hand = soft_nms([Proposal(0.0, 10.0, p_fused=1.0), Proposal(0.0, 10.0, p_fused=1.0 - 1e-9)])
    factor = hand[1].score / (1.0 - 1e-9)
    verdict(3, "soft-NMS oracle", worst <= 1e-12 and monotone and abs(factor - 0.26360) <= 1e-5,
            f"max deviation {worst:.1e} over 200 sets, iou=1 decay factor {factor:.5f}")


# ---------------------------------------------------------------- 4


def brute_candidates(p, thr):
    out = []
    for t in range(len(p)):
        peak = 0 < t < len(p) - 1 and p[t] > p[t - 1] and p[t] > p[t + 1]
        if p[t] > thr or peak:
            out.append(t)
    return out


def test_criterion_4_proposal_rules(verdict):
    rng = np.random.default_rng(0)
    mismatches, violations, total = 0, 0, 0
    for _ in range(500):
        n = int(rng.integers(1, 51))
        ps = np.round(rng.uniform(size=n), 2)  # rounding produces ties and plateaus
        pe = np.round(rng.uniform(size=n), 2)
        thr = float(rng.choice([0.5, 0.9, 0.95]))
        lo = float(rng.integers(1, 10))
        db = DurationBounds(lo, lo + float(rng.integers(0, 30)))
        s_idx, e_idx = brute_candidates(ps, thr), brute_candidates(pe, thr)
        mismatches += list(select_candidate_boundaries(ps, thr)) != s_idx
        mismatches += list(select_candidate_boundaries(pe, thr)) != e_idx
        want = [(float(s), float(e)) for s in s_idx for e in e_idx if db.d_min <= e - s <= db.d_max]
        bounds = CandidateBoundarySet([(i, float(ps[i])) for i in s_idx], [(i, float(pe[i])) for i in e_idx])
        got = generate_candidate_proposals(bounds, db)
        mismatches += sorted((p.t_s, p.t_e) for p in got) != sorted(want)
        violations += sum(not db.d_min <= p.duration <= db.d_max for p in got)
        total += len(got)
    verdict(4, "proposal-rule oracle", mismatches == 0 and violations == 0,
            f"{mismatches} mismatches, {violations} duration violations over 500 sequences ({total} proposals)")


# ---------------------------------------------------------------- 5


def bsp_positions(t_s, t_e):
    r = (t_e - t_s) / 5
    seg = lambda a, b, n: [a + k * (b - a) / (n - 1) for k in range(n)]  # noqa: E731
    return np.array(seg(t_s - r, t_s + r, 8) + seg(t_s, t_e, 16) + seg(t_e - r, t_e + r, 8))


def test_criterion_5_bsp_exactness(verdict):
    rng = np.random.default_rng(0)
    worst_affine, worst_clamped = 0.0, 0.0
    for _ in range(300):
        length = int(rng.integers(30, 120))
        a, b = rng.uniform(-0.01, 0.01), rng.uniform(0.2, 0.8)
        seq = a * np.arange(length) + b
        d = rng.uniform(2, length / 2)
        t_s = rng.uniform(d / 5, length - 1 - d - d / 5)
        prop = Proposal(t_s, t_s + d)
        closed = a * bsp_positions(prop.t_s, prop.t_e) + b
        worst_affine = max(worst_affine, float(np.max(np.abs(construct_bsp(seq, prop) - closed))))
        # proposals hanging over either end are clamped to the sequence edges
        wild = rng.uniform(size=length)
        t_s = rng.uniform(-5, 3) if rng.uniform() < 0.5 else rng.uniform(length - 10, length - 2)
        prop = Proposal(t_s, t_s + rng.uniform(3, 12))
        pos = np.clip(bsp_positions(prop.t_s, prop.t_e), 0, length - 1)
        dense = np.interp(pos, np.arange(length), wild)
        worst_clamped = max(worst_clamped, float(np.max(np.abs(construct_bsp(wild, prop) - dense))))
    verdict(5, "BSP exactness", worst_affine <= 1e-12 and worst_clamped <= 1e-12,
            f"affine max error {worst_affine:.1e}, clamped max error {worst_clamped:.1e}")


# ---------------------------------------------------------------- 6


def test_criterion_6_metric_oracle(verdict):
    toy = {
        "a": ([(0, 8), (20, 30), (1, 10)], [(0, 10), (20, 31)]),
        "b": ([(50, 60), (5, 15), (0, 12), (4, 14)], [(5, 14)]),
        "c": ([(3, 4)], [(0, 10), (40, 45), (3, 5)]),
    }
    cfg = EvalConfig(an_max=5)
    curve = average_recall_at_an(toy, cfg)
    exact = True
    for an in range(1, 6):
        per_video = []
        for props, gt in toy.values():
            per_t = [sum(any(iou(p, g) >= t for p in props[:an]) for g in gt) / len(gt)
                     for t in cfg.tiou_thresholds]
            per_video.append(np.mean(per_t))
        exact &= curve.at(an) == np.mean(per_video)
    an = np.arange(1, 101)
    auc_ones, auc_ramp = auc_ar_an(np.ones(100)), auc_ar_an((an - 1) / 99)
    auc_vs_enum = auc_ar_an(curve.ar) == 100 * sum((curve.ar[i] + curve.ar[i + 1]) / 2 for i in range(4)) / 4
    ok = exact and auc_vs_enum and abs(auc_ones - 100) <= 1e-9 and abs(auc_ramp - 50) <= 1e-9
    verdict(6, "metric oracle", ok,
            f"AR curve {np.round(curve.ar, 4).tolist()}, AUC(1)={auc_ones}, AUC(ramp)={auc_ramp}")


# ---------------------------------------------------------------- 7


def _ar10(report):
    return report["ar_at_an"]["10"]


def test_criterion_7_end_to_end(verdict, tmp_path):
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "synthetic.ini")
    full_dir = tmp_path / "full"
    full = run_pipeline(full_dir, cfg)["val"]
    n_videos = sum(1 for _ in (full_dir / "probs").iterdir())
    manifest = (full_dir / "data" / "manifest.json").read_text()
    counts = {s: manifest.count(f'"split": "{s}"') for s in ("train", "val")}

    nopem_dir = tmp_path / "nopem"
    shutil.copytree(full_dir, nopem_dir)
    shutil.rmtree(nopem_dir / "pem")
    ablated = run_pipeline(nopem_dir, load_config(CONFIGS / "synthetic.ini", ["pem.enabled=false"]),
                           synth=False, skip=("train-tem", "infer-tem", "propose"))["val"]

    untrained_dir = tmp_path / "untrained"
    shutil.copytree(full_dir / "data", untrained_dir / "data")
    untrained = run_pipeline(untrained_dir, load_config(CONFIGS / "synthetic.ini", ["tem.enabled=false"]),
                             synth=False)["val"]
    elapsed = time.perf_counter() - t0

    ar_full, ar_nopem, ar_untrained = _ar10(full), _ar10(ablated), _ar10(untrained)
    ok = (counts["train"] >= 200 and counts["val"] >= 50 and ar_full >= 0.85
          and ar_untrained <= 0.5 * ar_full and ar_nopem < ar_full and elapsed < 600)
    verdict(7, "end-to-end synthetic learning", ok,
            f"{counts['train']} train / {counts['val']} val of {n_videos} videos; AR@10 full {ar_full:.4f}, "
            f"untrained TEM {ar_untrained:.4f} (ratio {ar_untrained / ar_full:.3f}), "
            f"without PEM {ar_nopem:.4f}; {elapsed:.0f}s")


# ---------------------------------------------------------------- 8


def test_criterion_8_unseen_families(verdict, tmp_path):
    reports = run_pipeline(tmp_path, load_config(CONFIGS / "unseen_families.ini"))
    seen, unseen = _ar10(reports["val"]), _ar10(reports["test"])
    rel = abs(seen - unseen) / seen
    verdict(8, "generalization to held-out families", rel <= 0.2,
            f"AR@10 seen {seen:.4f}, unseen {unseen:.4f}, relative gap {rel:.3f}")


# ---------------------------------------------------------------- 9

DETERMINISM = [
    "synth.num_videos=30", "synth.length_range=80,120", "synth.duration_range=5,20",
    "synth.instances_range=1,3", "synth.seed=7",
    "tem.hidden=16", "tem.optimizer.schedule=3:1e-2,1:1e-3", "tem.loss.window=50",
    "pem.hidden_units=32", "pem.optimizer.schedule=3:1e-3", "pem.optimizer.batch_size=64",
]


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for sub in ("proposals", "scored", "final", "metrics") for p in sorted((root / sub).rglob("*"))
            if p.is_file()}


def test_criterion_9_determinism(verdict, tmp_path):
    args = [x for kv in DETERMINISM for x in ("--set", kv)]
    codes = [main(["run-all", "--workdir", str(tmp_path / run)] + args) for run in ("a", "b")]
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    same = codes == [0, 0] and a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    verdict(9, "determinism of run-all", same and len(a) > 0,
            f"{len(a)} proposal/metric files compared, exit codes {codes}")
