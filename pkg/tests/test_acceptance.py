"""Acceptance criteria. Each test prints one ``[PASS]``/``[FAIL]`` line, and the
lines are repeated in the terminal summary (see conftest.py).

Every tolerance, count and time budget below is pinned; none is tuned per run.
"""
import time

import numpy as np
import pytest

from godet.data import SYNTH_PRESETS, synth_page
from godet.detector.inference import detect, detect_many
from godet.detector.model import DetectorModel, rpn_forward
from godet.detector.roi import RoiConfig, roi_pool
from godet.detector.train import fine_tune, prepare_dataset, train
from godet.evaluation import average_precision, evaluate, f1_score, mean_ap, threshold_sweep
from godet.geometry import AnchorConfig, Box, LabelSet, anchor_array, decode_array, encode_array, iou_matrix, nms_indices
from godet.gradcheck import run_suites
from godet.numerics import TrainHyperparams
from oracles import brute_force_ap, exhaustive_nms, random_scene

RESULTS: list[str] = []
LABELS = ("table", "figure", "equation")


def record(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number} {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# 1 -------------------------------------------------------------------------

def test_1_reported_aggregates():
    got = (mean_ap((0.807, 0.934, 0.857)), f1_score(0.932, 0.643), f1_score(0.946, 0.910))
    want = (0.866, 0.761, 0.928)
    ok = all(abs(g - w) <= 0.0005 for g, w in zip(got, want))
    detail = ", ".join(f"{g:.4f} vs {w}" for g, w in zip(got, want)) + " (tol 0.0005)"
    assert record(1, "mAP and F1 aggregates", ok, detail)


# 2 -------------------------------------------------------------------------

def test_2_iou_sweep_monotone():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    thresholds = (0.5, 0.6, 0.7, 0.8)
    n, bad = 200, 0
    for _ in range(n):
        preds, gts = random_scene(rng, n_images=int(rng.integers(1, 5)), max_gt=5, max_pred=9, labels=LABELS)
        reps = threshold_sweep(preds, gts, thresholds, LABELS)
        for lo, hi in zip(reps, reps[1:]):
            if hi.map > lo.map or any(hi.classes[l].tp > lo.classes[l].tp for l in LABELS):
                bad += 1
                break
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 10
    assert record(2, "TP and mAP non-increasing over IoU 0.5..0.8", ok,
                  f"{n} instances, {bad} violations, {dt:.1f} s (budget 10 s)")


# 3 -------------------------------------------------------------------------

def test_3_gradient_checks():
    t0 = time.perf_counter()
    results = run_suites(seed=0)
    dt = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    names = {r.name for r in results}
    expected = {"conv2d", "linear", "max_pool2d", "bilinear_sample", "roi_align", "softmax_cross_entropy",
                "smooth_l1", "toy_detector"}
    ok = names == expected and all(r.max_rel_error <= 1e-3 for r in results) and dt < 60
    assert record(3, "finite-difference gradients", ok,
                  f"{len(results)} suites, max rel err {worst.max_rel_error:.1e} ({worst.name}) <= 1e-3, "
                  f"{dt:.1f} s (budget 60 s)")


# 4 -------------------------------------------------------------------------

def test_4_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    nms_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        xy = rng.uniform(0, 20, (n, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(1, 15, (n, 2))], axis=1)
        scores = rng.choice([0.2, 0.5, 0.9], n) if rng.random() < 0.3 else rng.random(n)
        thr = float(rng.choice([0.0, 0.3, 0.5, 0.7]))
        nms_bad += nms_indices(boxes, scores, thr).tolist() != exhaustive_nms(boxes.tolist(), scores.tolist(), thr)
    ap_bad = 0
    for _ in range(1000):
        n = int(rng.integers(0, 21))
        flags = (rng.random(n) < rng.random()).tolist()
        n_gt = sum(flags) + int(rng.integers(0, 4))
        ap_bad += abs(average_precision(flags, n_gt) - brute_force_ap(flags, n_gt)) > 1e-12
    grid = np.arange(1.0, 17.0).reshape(1, 4, 4)
    pooled = roi_pool(grid, Box(0, 0, 4, 4), RoiConfig("pool", (2, 2)))[0]
    pool_ok = pooled.tolist() == [[6, 8], [14, 16]]
    dt = time.perf_counter() - t0
    ok = nms_bad == 0 and ap_bad == 0 and pool_ok and dt < 30
    assert record(4, "oracle equivalence", ok,
                  f"NMS {1000 - nms_bad}/1000, AP {1000 - ap_bad}/1000, roi_pool {pooled.tolist()}, "
                  f"{dt:.1f} s (budget 30 s)")


# 5 -------------------------------------------------------------------------

def test_5_geometry_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    cfg = AnchorConfig()
    count_ok = all(anchor_array(cfg, h, w).reshape(-1, 4).shape[0] == h * w * 30
                   for h in range(1, 8) for w in range(1, 8))
    # side ratios stay below e^DELTA_CLAMP (62.5), where decoding is exact
    xy = rng.uniform(0, 500, (5000, 2))
    anchors = np.concatenate([xy, xy + rng.uniform(8, 300, (5000, 2))], axis=1)
    xy = rng.uniform(0, 500, (5000, 2))
    targets = np.concatenate([xy, xy + rng.uniform(8, 300, (5000, 2))], axis=1)
    rt = np.abs(decode_array(anchors, encode_array(anchors, targets)) - targets).max()
    deltas = rng.uniform(-3, 3, (5000, 4))
    rt = max(rt, np.abs(encode_array(anchors, decode_array(anchors, deltas)) - deltas).max())
    model = DetectorModel(seed=5)
    feats = rng.standard_normal((model.config.backbone.out_channels, 9, 11))
    s0, d0, _ = rpn_forward(model, feats, periodic=True)
    eq = 0.0
    for di, dj in ((1, 0), (0, 1), (2, 3), (-4, 5)):
        s1, d1, _ = rpn_forward(model, np.roll(feats, (di, dj), axis=(1, 2)), periodic=True)
        eq = max(eq, np.abs(s1 - np.roll(s0, (di, dj), axis=(1, 2))).max(),
                 np.abs(d1 - np.roll(d0, (di, dj), axis=(1, 2))).max())
    dt = time.perf_counter() - t0
    ok = count_ok and rt <= 1e-6 and eq <= 1e-9 and dt < 10
    assert record(5, "geometry invariants", ok,
                  f"anchor count H*W*30 {'ok' if count_ok else 'wrong'}, roundtrip err {rt:.1e} <= 1e-6, "
                  f"RPN shift err {eq:.1e} <= 1e-9, {dt:.1f} s (budget 10 s)")


# 6 -------------------------------------------------------------------------

PRETRAIN = TrainHyperparams(learning_rate=0.01, decay_every_epochs=6, epochs=8, batch_size=4, momentum=0.9)
SHIFT = TrainHyperparams(learning_rate=0.01, decay_every_epochs=3, epochs=4, batch_size=4, momentum=0.9)


def _map(model, docs):
    preds = detect_many(model, docs, score_threshold=0.05)
    gts = {d.image_id: [(a.box, a.label) for a in d.annotations] for d in docs}
    return evaluate(preds, gts, 0.5, LABELS).map


@pytest.mark.slow
def test_6_desk_scale_end_to_end():
    t0 = time.perf_counter()
    base, shifted = SYNTH_PRESETS["base"], SYNTH_PRESETS["shifted"]
    labels = LabelSet(LABELS)
    train_set = prepare_dataset([synth_page(base, i) for i in range(300)], labels)
    test_docs = [synth_page(base, 100_000 + i) for i in range(100)]
    model, _ = train(DetectorModel(seed=0), train_set, PRETRAIN, seed=0)
    base_map = _map(model, test_docs)

    shift_train = prepare_dataset([synth_page(shifted, i) for i in range(60)], labels)
    shift_test = [synth_page(shifted, 100_000 + i) for i in range(50)]
    tuned, _ = fine_tune(model, shift_train, SHIFT, seed=1)
    scratch, _ = train(DetectorModel(seed=1), shift_train, SHIFT, seed=1)
    tuned_map, scratch_map = _map(tuned, shift_test), _map(scratch, shift_test)
    dt = time.perf_counter() - t0
    ok = base_map >= 0.7 and tuned_map > scratch_map and PRETRAIN.epochs <= 30 and dt <= 20 * 60
    assert record(6, "desk-scale end-to-end", ok,
                  f"300/100 pages, {PRETRAIN.epochs} epochs: mAP@0.5 {base_map:.3f} >= 0.7; shifted domain "
                  f"{SHIFT.epochs} epochs: fine-tuned {tuned_map:.3f} > scratch {scratch_map:.3f}; "
                  f"{dt / 60:.1f} min (target 20 min)")


# 7 -------------------------------------------------------------------------

@pytest.mark.slow
def test_7_single_page_overfit():
    t0 = time.perf_counter()
    doc = synth_page(SYNTH_PRESETS["base"], 4)
    data = prepare_dataset([doc], LabelSet(LABELS))
    steps = 500
    hp = TrainHyperparams(learning_rate=0.01, decay_every_epochs=300, epochs=steps, batch_size=1, momentum=0.9)
    model, _ = train(DetectorModel(seed=0), data, hp, seed=0)
    dets = detect(model, doc.image, score_threshold=0.5)
    worst = 1.0
    for a in doc.annotations:
        same = np.array([d.box for d in dets if d.label == a.label]).reshape(-1, 4)
        best = iou_matrix(np.array([a.box]), same).max() if len(same) else 0.0
        worst = min(worst, float(best))
    dt = time.perf_counter() - t0
    ok = worst >= 0.9 and dt <= 120
    assert record(7, "single-page overfit", ok,
                  f"{len(doc.annotations)} objects, {steps} steps, worst per-GT IoU {worst:.3f} >= 0.9, "
                  f"{dt:.0f} s (budget 120 s)")
