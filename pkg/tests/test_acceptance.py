"""Acceptance criteria 1-12, each at its stated tolerance.

Every test prints one ``criterion N: PASS/FAIL`` line; the lines are
repeated in the terminal summary (see conftest.py).
"""

import hashlib
import json
import os
import shutil
import time
from functools import lru_cache

import numpy as np

from spelke import cli
from spelke.blocks import block_affinity_graph, voronoi_blocks
from spelke.evaluation import assignment_score, iou_matrix, label_prop_baseline, matched_miou
from spelke.features import ProjectionParams, build_support, compute_affinities, segment_max, segment_sum
from spelke.kprop import init_plateau, kprop_step, split_affinities
from spelke.pipeline import ModelConfig, predict, upsampled
from spelke.supervision import (
    ConnectivityTarget,
    connectivity_targets,
    mode_pool,
    motion_indicator,
    motion_segments,
)
from spelke.synthscene import SceneConfig, generate_scene, make_scenes
from spelke.training import TrainConfig, bootstrap, loss_gradient, train, value_and_gradient

from helpers import brute_force_assignment, oracle_graphs, oracle_suite_miou, report

ITERATION_SWEEP = (1, 5, 10, 20, 40)

# end-to-end settings shared by criteria 5 and 6
TRAIN_SCENES = 200
HELDOUT_SCENES = 60
LEARNING_RATE = 0.02
STEPS = 2000
BOOTSTRAP_ROUND_STEPS = (2000, 5000, 5000)


@lru_cache(maxsize=None)
def _suite():
    return tuple(oracle_graphs(seeds=20))


@lru_cache(maxsize=None)
def _suite_score(iters=40, rounds=3, ablation=None):
    kw = {}
    if ablation == "no_excitatory":
        kw["excitatory"] = False
    elif ablation == "no_inhibitory":
        kw["inhibitory"] = False
    elif ablation == "softmax":
        kw["norm"] = "softmax"
    return oracle_suite_miou(_suite(), iters=iters, rounds=rounds, **kw)


def test_criterion_01_oracle_grouping():
    graphs = _suite()
    per_k, worst_time = {}, 0.0
    for k in (2, 3, 5):
        sub = [g for g in graphs if len(np.unique(g[0])) == k]
        scores = []
        for i, graph in enumerate(sub):
            start = time.perf_counter()
            scores.append(oracle_suite_miou([graph], iters=40, rounds=3, seed_offset=i))
            worst_time = max(worst_time, time.perf_counter() - start)
        per_k[k] = float(np.mean(scores))
    ok = all(v >= 0.95 for v in per_k.values()) and worst_time < 5.0
    detail = ", ".join(f"k={k}: {v:.3f}" for k, v in per_k.items())
    assert report(1, ok, f"{detail}; slowest graph {worst_time:.2f}s (need >= 0.95, < 5 s)")


def test_criterion_02_iteration_trend():
    scores = [_suite_score(iters=s) for s in ITERATION_SWEEP]
    monotone = all(b >= a for a, b in zip(scores, scores[1:]))
    ok = monotone and scores[0] < 0.2 and scores[-1] >= 0.95
    detail = " ".join(f"S={s}:{v:.3f}" for s, v in zip(ITERATION_SWEEP, scores))
    assert report(2, ok, f"{detail} (non-decreasing, S=1 < 0.2, S=40 >= 0.95)")


def test_criterion_03_competition_rounds():
    r1, r3 = _suite_score(rounds=1), _suite_score(rounds=3)
    ok = abs(r1 - r3) <= 0.02
    assert report(3, ok, f"R=1 {r1:.3f} vs R=3 {r3:.3f} (|diff| <= 0.02)")


def test_criterion_04_ablations():
    scores = {a: _suite_score(ablation=a) for a in ("no_excitatory", "no_inhibitory", "softmax")}
    ok = all(v < 0.2 for v in scores.values())
    detail = ", ".join(f"{a}: {v:.3f}" for a, v in scores.items())
    assert report(4, ok, f"{detail} (each < 0.2)")


def _heldout_miou(scenes, params, model):
    preds = predict(scenes, params, model)
    scores = [matched_miou(upsampled(p, model.downsample), s.segments) for p, s in zip(preds, scenes)]
    return float(np.mean([v for v in scores if v is not None])), preds


def test_criterion_05_motion_learning():
    model = ModelConfig()
    scene_cfg = SceneConfig()
    train_set = make_scenes(scene_cfg, TRAIN_SCENES, master_seed=1)
    heldout = make_scenes(scene_cfg, HELDOUT_SCENES, master_seed=999)
    cfg = TrainConfig(learning_rate=LEARNING_RATE, steps=STEPS, seed=0)
    t0 = time.perf_counter()
    ckpt = train(train_set, cfg, model)
    minutes = (time.perf_counter() - t0) / 60
    score, _ = _heldout_miou(heldout, ckpt.params, model)
    ok = score >= 0.70 and minutes < 30 and len(ckpt.loss_history) <= 2000
    assert report(5, ok, f"held-out mIoU {score:.3f} after {STEPS} steps in {minutes:.1f} min (>= 0.70, < 30 min)")


def _agent_object_distinct(pred, scene):
    up = upsampled(pred, 4)
    agent = up[scene.segments == scene.agent_label]
    obj = up[scene.segments == scene.moved_label]
    la, lo = np.bincount(agent).argmax(), np.bincount(obj).argmax()
    return bool(la > 0 and lo > 0 and la != lo)


def test_criterion_06_bootstrapping():
    model = ModelConfig()
    scene_cfg = SceneConfig(agent_mode=True)
    train_set = make_scenes(scene_cfg, TRAIN_SCENES, master_seed=1)
    heldout = make_scenes(scene_cfg, HELDOUT_SCENES, master_seed=999)
    cfg = TrainConfig(learning_rate=LEARNING_RATE, rounds=3, round_steps=BOOTSTRAP_ROUND_STEPS, seed=0)
    ckpts = bootstrap(train_set, cfg, model)
    scores, preds = [], None
    for ck in ckpts:
        s, preds = _heldout_miou(heldout, ck.params, model)
        scores.append(s)
    contact = [(p, s) for p, s in zip(preds, heldout) if s.agent_contact]
    distinct = np.mean([_agent_object_distinct(p, s) for p, s in contact])
    increasing = all(b > a for a, b in zip(scores, scores[1:]))
    ok = increasing and distinct >= 0.8
    detail = " -> ".join(f"{v:.3f}" for v in scores)
    assert report(
        6, ok,
        f"rounds {detail} (strictly increasing); agent/object distinct in "
        f"{distinct:.0%} of {len(contact)} contact scenes (>= 80%)",
    )


def test_criterion_07_explaining_away():
    model = ModelConfig()
    cfg = SceneConfig(agent_mode=True, agent_alone_fraction=0.0)
    scene = generate_scene(cfg, 123, contact=True)
    assert scene.agent_contact
    dims = (16, 16)
    sm = motion_segments(scene.flow, q=256, seed=0, target_dims=dims)
    ind = motion_indicator(scene.flow, model.tau, dims)
    gt = mode_pool(scene.segments, 4)
    teacher = np.where(gt == scene.agent_label, 1, 0)
    sup = build_support(*dims, model.window, model.global_samples, model.support_seed)
    before = connectivity_targets(sm, ind, None, sup).target
    after = connectivity_targets(sm, ind, teacher, sup).target
    a, b = gt.ravel()[sup.rows], gt.ravel()[sup.indices]
    agent_obj = ((a == scene.agent_label) & (b == scene.moved_label)) | (
        (a == scene.moved_label) & (b == scene.agent_label)
    )
    agent_agent = (a == scene.agent_label) & (b == scene.agent_label)
    flipped = int(np.sum(agent_obj & (before == 1) & (after == 0)))
    broken = int(np.sum(agent_agent & (after == 0)))
    ok = flipped >= 1 and broken == 0
    assert report(7, ok, f"{flipped} agent-object pairs flipped 1 -> 0, {broken} agent-agent pairs lost")


def test_criterion_08_gradient_check():
    worst = 0.0
    eps = 1e-4
    for seed in range(20):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(4, 9, size=2)
        fm = rng.normal(size=(h, w, 7))
        sup = build_support(h, w, int(rng.integers(1, 4)), 3, seed=seed)
        tgt = ConnectivityTarget(
            (rng.random(sup.nnz) < 0.4).astype(np.uint8),
            (rng.random(sup.nnz) < 0.8).astype(np.uint8),
        )
        params = ProjectionParams.random(4, seed=seed)
        analytic = loss_gradient(fm, params, sup, tgt)
        for w_mat, g_mat in zip((params.w_key, params.w_query), analytic):
            for idx in np.ndindex(w_mat.shape):
                old = w_mat[idx]
                w_mat[idx] = old + eps
                lp = value_and_gradient(fm, params, sup, tgt)[0]
                w_mat[idx] = old - eps
                lm = value_and_gradient(fm, params, sup, tgt)[0]
                w_mat[idx] = old
                num = (lp - lm) / (2 * eps)
                scale = max(abs(num), abs(g_mat[idx]), 1e-6)
                worst = max(worst, abs(num - g_mat[idx]) / scale)
    ok = worst <= 1e-4
    assert report(8, ok, f"max relative error {worst:.2e} over 20 instances (<= 1e-4)")


def test_criterion_09_metric_oracle():
    rng = np.random.default_rng(0)
    mismatches = 0
    for case in range(1000):
        g, p = rng.integers(1, 7, size=2)
        iou = rng.random((g, p))
        if assignment_score(iou) != brute_force_assignment(iou):
            mismatches += 1
    # the full path from label maps, through the IoU matrix, to the score
    for case in range(100):
        gt = rng.integers(0, rng.integers(2, 7), size=(12, 12))
        pred = rng.integers(0, rng.integers(2, 7), size=(12, 12))
        iou, gids, _ = iou_matrix(pred, gt)
        if len(gids) and matched_miou(pred, gt) != brute_force_assignment(iou):
            mismatches += 1
    ok = mismatches == 0
    assert report(9, ok, f"{mismatches} mismatches vs brute-force enumeration (exact)")


def test_criterion_10_labelprop_baseline():
    kp, lp = [], []
    for seed in range(20):
        k = (2, 3, 5)[seed % 3]
        labels = voronoi_blocks(16, 16, k, seed=500 + seed)
        graph = block_affinity_graph(labels, within=1.0, across=0.4, noise=0.5, seed=seed)
        kp.append(oracle_suite_miou([(labels, graph)], iters=40, rounds=3, seed_offset=seed))
        lp.append(matched_miou(label_prop_baseline(graph, iters=50, seed=seed), labels))
    margin = np.mean(kp) - np.mean(lp)
    ok = margin >= 0.2
    assert report(10, ok, f"KProp+Competition {np.mean(kp):.3f} vs LabelProp {np.mean(lp):.3f} (margin >= 0.2)")


def test_criterion_11_normalization_invariants():
    worst_norm = worst_row = worst_max = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(3, 11, size=2)
        fm = rng.normal(scale=rng.uniform(0.1, 5.0), size=(h, w, 7))
        sup = build_support(h, w, int(rng.integers(0, 5)), int(rng.integers(0, 8)), seed=seed)
        params = ProjectionParams.random(int(rng.integers(2, 16)), seed=seed, scale=rng.uniform(0.5, 4))
        graph = compute_affinities(fm, params, sup)
        worst_row = max(worst_row, np.abs(segment_sum(graph.softmax_affinity, sup.indptr) - 1).max())
        worst_max = max(worst_max, np.abs(segment_max(graph.normalized_affinity, sup.indptr) - 1).max())
        sa = split_affinities(graph)
        x = init_plateau(h, w, int(rng.integers(2, 64)), seed)
        active = np.zeros(h * w, dtype=bool)
        active[rng.integers(h * w)] = True
        for it in range(8):
            x = kprop_step(x, sa, active if it == 0 else None)
            n = np.linalg.norm(x, axis=-1)
            dev = np.where(n < 1e-5, 0.0, np.abs(n - 1))
            worst_norm = max(worst_norm, dev.max())
    ok = worst_norm <= 1e-5 and worst_row <= 1e-6 and worst_max <= 1e-6
    assert report(
        11, ok,
        f"plateau |norm-1| {worst_norm:.1e}, softmax row-sum err {worst_row:.1e}, "
        f"row-max err {worst_max:.1e}",
    )


def _digest(path):
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "eval_report.json":
                payload = json.loads(data)
                payload.pop("runtime_ms")  # wall-clock timings
                data = json.dumps(payload, sort_keys=True).encode()
            out[str(p.relative_to(path))] = hashlib.sha256(data).hexdigest()
    return out


def _run_all():
    """gen -> train -> bootstrap -> infer -> eval with relative paths in the cwd."""
    small = ["--q-dim", "64", "--k-max", "8", "--kprop-iters", "20", "--seed", "11"]
    steps = ["--steps", "15", "--learning-rate", "0.02"]
    codes = [
        cli.main(["gen", "--count", "6", "--out", "data"] + small),
        cli.main(["train", "--data", "data", "--out", "train"] + small + steps),
        cli.main(["bootstrap", "--data", "data", "--out", "boot", "--rounds", "2"] + small + steps),
        cli.main(["infer", "--checkpoint", "train/checkpoint_round1.txt", "--data", "data", "--out", "pred"] + small),
        cli.main(["eval", "--pred", "pred", "--gt", "data", "--out", "eval/eval_report.json"]),
    ]
    assert codes == [0] * 5


def test_criterion_12_determinism(tmp_path, capsys, monkeypatch):
    for k in [k for k in os.environ if k.startswith("SPELKE_")]:
        monkeypatch.delenv(k)
    work = tmp_path / "run"
    digests = []
    for _ in range(2):
        if work.exists():
            shutil.rmtree(work)
        work.mkdir()
        monkeypatch.chdir(work)
        _run_all()
        digests.append(_digest(work))
    capsys.readouterr()
    first, second = digests
    differing = sorted(k for k in set(first) | set(second) if first.get(k) != second.get(k))
    kinds = sorted({name.rsplit(".", 1)[-1] for name in first})
    detail = f"{len(first)} artifacts ({', '.join(kinds)}); {len(differing)} differ across reruns"
    if differing:
        detail += ": " + ", ".join(differing[:5])
    assert report(12, not differing, detail)
