import numpy as np
import pytest

from godet.checkpoint import CheckpointError
from godet.data import AnnotatedDocument, Annotation, SYNTH_PRESETS, synth_page
from godet.detector.inference import detect, detect_tensor
from godet.detector.model import (
    BackboneConfig,
    DetectorModel,
    ModelConfig,
    detection_head,
    rpn_forward,
    toy_config,
)
from godet.detector.preprocess import preprocess, preprocess_pixels, resize_bilinear
from godet.detector.proposals import ProposalConfig, propose, propose_arrays
from godet.detector.targets import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    MatchConfig,
    assign_anchor_labels,
    sample_rois,
)
from godet.detector.train import fine_tune, model_for_labels, prepare_dataset, train
from godet.errors import DataError
from godet.geometry import AnchorConfig, Box, LabelSet, anchor_array, decode_array
from godet.numerics import TrainHyperparams, softmax
from oracles import bilinear_resize_pixel, iou_py


# -- model shapes ------------------------------------------------------------

def test_model_output_widths():
    m = DetectorModel(seed=0)
    k = m.config.anchors.k
    assert k == 30
    assert m["rpn.cls.weight"].shape[0] == 2 * k
    assert m["rpn.reg.weight"].shape[0] == 4 * k
    assert m["head.cls.weight"].shape[0] == 4
    assert m.config.backbone.total_stride == 16
    assert m.config.backbone.feature_size(600) == 38


@pytest.mark.parametrize("preset", ["tiny", "small"])
def test_backbone_presets_end_in_conv_with_stride_16(preset):
    cfg = BackboneConfig(preset)
    assert cfg.layers[-1].kind == "conv"
    assert cfg.total_stride == 16
    assert cfg.feature_size(600) >= 1


def test_mismatched_anchor_stride_rejected():
    with pytest.raises(ValueError, match="stride"):
        ModelConfig(anchors=AnchorConfig(stride=8))


def test_config_dict_roundtrip():
    cfg = toy_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_rpn_output_shapes_and_constant_map():
    m = DetectorModel(seed=1)
    feats = np.full((m.config.backbone.out_channels, 6, 5), 0.7)
    scores, deltas, _ = rpn_forward(m, feats, periodic=True)
    assert scores.shape == (30, 6, 5, 2)
    assert deltas.shape == (30, 6, 5, 4)
    np.testing.assert_allclose(scores, np.broadcast_to(scores[:, :1, :1], scores.shape), atol=1e-12)
    np.testing.assert_allclose(deltas, np.broadcast_to(deltas[:, :1, :1], deltas.shape), atol=1e-12)


def test_rpn_circular_shift_equivariance(rng):
    m = DetectorModel(seed=2)
    feats = rng.standard_normal((m.config.backbone.out_channels, 7, 9))
    s0, d0, _ = rpn_forward(m, feats, periodic=True)
    for di, dj in ((1, 0), (0, 1), (3, -2)):
        s1, d1, _ = rpn_forward(m, np.roll(feats, (di, dj), axis=(1, 2)), periodic=True)
        assert np.abs(s1 - np.roll(s0, (di, dj), axis=(1, 2))).max() <= 1e-9
        assert np.abs(d1 - np.roll(d0, (di, dj), axis=(1, 2))).max() <= 1e-9


def test_detection_head_zero_weights_uniform():
    m = DetectorModel(seed=0)
    for p in m.parameters():
        if p.name.startswith("head."):
            p.value[...] = 0.0
    oh, ow = m.config.roi.output_size
    logits, deltas, _ = detection_head(m, np.ones((5, m.config.backbone.out_channels, oh, ow)))
    assert logits.shape == (5, 4)
    assert deltas.shape == (5, 3, 4)
    np.testing.assert_allclose(softmax(logits), 0.25)


def test_detection_head_rejects_wrong_size():
    m = DetectorModel(seed=0)
    with pytest.raises(ValueError, match="features per RoI"):
        detection_head(m, np.ones((2, 3, 7, 7)))


# -- preprocessing -----------------------------------------------------------

def test_preprocess_identity_geometry():
    doc = AnnotatedDocument("p", 600, 600, [Annotation(Box(10, 20, 30, 40), "table")],
                            image=np.full((600, 600, 3), 255, np.uint8))
    t, anns = preprocess(doc)
    assert t.shape == (3, 600, 600)
    assert anns == [(Box(10, 20, 30, 40), "table")]
    assert t.max() == 1.0


def test_preprocess_scales_boxes():
    doc = AnnotatedDocument("p", 1200, 800, [Annotation(Box(0, 0, 600, 400), "figure")],
                            image=np.zeros((800, 1200, 3), np.uint8))
    _, anns = preprocess(doc)
    assert anns[0][0] == pytest.approx((0, 0, 300, 300))


def test_preprocess_rejects_empty():
    with pytest.raises(ValueError):
        preprocess_pixels(np.zeros((0, 5, 3), np.uint8))


def test_resize_matches_bilinear_oracle(rng):
    src = rng.integers(0, 256, size=(37, 53, 3)).astype(np.uint8)
    out = resize_bilinear(src, 20, 29)
    for _ in range(50):
        i, j = int(rng.integers(20)), int(rng.integers(29))
        np.testing.assert_allclose(out[i, j], bilinear_resize_pixel(src, 20, 29, i, j), atol=1e-9)


# -- proposals ---------------------------------------------------------------

def _brute_proposals(prob, anchors, deltas, cfg, w, h):
    items = []
    for i in range(len(anchors)):
        ax0, ay0, ax1, ay1 = anchors[i]
        aw, ah = ax1 - ax0, ay1 - ay0
        cx, cy = ax0 + aw / 2 + deltas[i][0] * aw, ay0 + ah / 2 + deltas[i][1] * ah
        bw, bh = aw * np.exp(deltas[i][2]), ah * np.exp(deltas[i][3])
        b = [min(max(cx - bw / 2, 0), w), min(max(cy - bh / 2, 0), h),
             min(max(cx + bw / 2, 0), w), min(max(cy + bh / 2, 0), h)]
        if b[2] - b[0] >= cfg.min_box_size and b[3] - b[1] >= cfg.min_box_size:
            items.append((i, b, prob[i]))
    items.sort(key=lambda t: (-t[2], t[0]))
    items = items[:cfg.pre_nms_top_n]
    kept = []
    for _, b, p in items:
        if all(iou_py(b, kb) <= cfg.nms_threshold for kb, _ in kept):
            kept.append((b, p))
        if len(kept) == cfg.post_nms_top_n:
            break
    return kept


def test_proposals_match_brute_force(rng):
    for trial in range(20):
        anchors = np.concatenate([rng.uniform(0, 60, (20, 2)), np.zeros((20, 2))], axis=1)
        anchors[:, 2:] = anchors[:, :2] + rng.uniform(2, 30, (20, 2))
        deltas = rng.normal(0, 0.3, (20, 4))
        logits = rng.normal(0, 1, (20, 2))
        prob = softmax(logits)[:, 1]
        cfg = ProposalConfig(pre_nms_top_n=12, post_nms_top_n=6, nms_threshold=0.5, min_box_size=3.0)
        boxes, scores = propose_arrays(logits, deltas, anchors, cfg, (64, 64))
        ref = _brute_proposals(prob, anchors, deltas, cfg, 64, 64)
        assert len(boxes) == len(ref) <= cfg.post_nms_top_n
        np.testing.assert_allclose(boxes, [b for b, _ in ref], atol=1e-9)
        np.testing.assert_allclose(scores, [p for _, p in ref], atol=1e-12)


def test_single_anchor_proposal():
    out = propose(np.zeros((1, 2)), np.zeros((1, 4)), np.array([[-8, -8, 24, 24.0]]), ProposalConfig(), (600, 600))
    assert len(out) == 1
    assert out[0].box == Box(0, 0, 24, 24)
    assert out[0].label == "object"


def test_proposal_config_validation():
    with pytest.raises(ValueError):
        ProposalConfig(pre_nms_top_n=10, post_nms_top_n=20)
    with pytest.raises(ValueError):
        ProposalConfig(nms_threshold=1.2)


# -- targets -----------------------------------------------------------------

def test_anchor_labels_thresholds():
    gts = np.array([[0, 0, 10, 10.0]])
    anchors = np.array([
        [0, 0, 10, 8.0],      # IoU 0.8 -> positive
        [0, 0, 10, 10.0],     # the best anchor
        [9, 9, 19, 19.0],     # IoU ~0.005 -> negative
        [0, 0, 10, 5.0],      # IoU 0.5 -> ignore
    ])
    labels, deltas = assign_anchor_labels(anchors, gts, MatchConfig())
    assert labels.tolist() == [POSITIVE, POSITIVE, NEGATIVE, IGNORE]
    np.testing.assert_allclose(deltas[1], 0.0)


def test_argmax_rule_keeps_weak_best_anchor():
    gts = np.array([[0, 0, 10, 10.0]])
    anchors = np.array([[0, 0, 10, 4.0], [0, 0, 10, 2.0], [50, 50, 60, 60.0]])
    labels, deltas = assign_anchor_labels(anchors, gts, MatchConfig())
    assert iou_py(anchors[0], gts[0]) == pytest.approx(0.4)
    assert labels.tolist() == [POSITIVE, NEGATIVE, NEGATIVE]
    np.testing.assert_allclose(decode_array(anchors[:1], deltas[:1]), gts, atol=1e-9)


def test_anchor_sampling_caps(rng):
    anchors = anchor_array(AnchorConfig(), 20, 20).reshape(-1, 4)
    gts = np.array([[100, 100, 300, 200.0], [320, 40, 560, 90.0]])
    cfg = MatchConfig(rpn_batch=32, positive_fraction=0.25)
    labels, _ = assign_anchor_labels(anchors, gts, cfg, rng)
    assert (labels == POSITIVE).sum() <= 8
    assert (labels >= NEGATIVE).sum() == 32


def test_no_gt_means_all_negative():
    labels, _ = assign_anchor_labels(np.array([[0, 0, 4, 4.0], [2, 2, 9, 9.0]]), np.zeros((0, 4)), MatchConfig())
    assert (labels == NEGATIVE).all()


def test_match_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(positive_iou=0.3, negative_iou=0.5)


def test_sample_rois_appends_gts(rng):
    gts = np.array([[10, 10, 50, 40.0], [60, 5, 90, 20.0]])
    proposals = np.array([[11, 11, 49, 41.0], [200, 200, 240, 240.0]])
    rois, cls, deltas = sample_rois(proposals, gts, np.array([2, 0]), MatchConfig(), rng)
    fg = cls > 0
    assert sorted(cls[fg].tolist()) == [1, 3, 3]
    assert (cls == 0).sum() == 1
    # the GT boxes themselves have zero regression targets
    exact = [i for i in range(len(rois)) if any(np.array_equal(rois[i], g) for g in gts)]
    np.testing.assert_allclose(deltas[exact], 0.0)


# -- training and inference --------------------------------------------------

SMALL = 304  # half-resolution pages keep these tests quick


def _small_config(labels=("table", "figure", "equation")):
    return ModelConfig(labels=labels, input_size=SMALL)


@pytest.fixture(scope="module")
def small_data():
    cfg = SYNTH_PRESETS["base"]
    docs = [synth_page(cfg, i) for i in range(10)]
    return docs, prepare_dataset(docs, LabelSet(), SMALL)


@pytest.fixture(scope="module")
def trained(small_data):
    _, data = small_data
    model = DetectorModel(_small_config(), seed=3)
    hp = TrainHyperparams(epochs=20)
    return train(model, data, hp, seed=5)


def test_training_reduces_loss_and_follows_schedule(trained):
    _, trace = trained
    assert len(trace.records) == 20
    assert trace.records[-1].total < trace.records[0].total
    assert trace.records[5].lr == pytest.approx(0.0001)
    assert trace.records[0].lr == pytest.approx(0.001)


def test_training_is_deterministic(small_data):
    _, data = small_data
    hp = TrainHyperparams(epochs=1, learning_rate=0.01)
    sums = []
    for _ in range(2):
        model, trace = train(DetectorModel(_small_config(), seed=3), data[:4], hp, seed=9)
        sums.append((model.checksum(), trace.to_csv()))
    assert sums[0] == sums[1]


def test_train_writes_checkpoints(small_data, tmp_path):
    _, data = small_data
    hp = TrainHyperparams(epochs=2, learning_rate=0.01)
    model, trace = train(DetectorModel(_small_config(), seed=3), data[:2], hp, seed=1, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_000.ckpt", "epoch_001.ckpt", "last.ckpt", "loss.csv"]
    assert DetectorModel.load(tmp_path / "last.ckpt").checksum() == model.checksum()
    text = (tmp_path / "loss.csv").read_text()
    assert text.splitlines()[0] == "epoch,lr,rpn_cls,rpn_reg,head_cls,head_reg,total"


def test_train_rejects_empty_dataset():
    with pytest.raises(DataError):
        train(DetectorModel(_small_config()), [], TrainHyperparams(epochs=1))


def test_prepare_dataset_names_bad_image():
    doc = AnnotatedDocument("page-7", 20, 20, [Annotation(Box(0, 0, 5, 5), "chart")],
                            image=np.zeros((20, 20, 3), np.uint8))
    with pytest.raises(DataError, match="page-7.*chart"):
        prepare_dataset([doc], LabelSet())
    doc = AnnotatedDocument("page-8", 30, 20, [], image=np.zeros((20, 20, 3), np.uint8))
    with pytest.raises(DataError, match="page-8"):
        prepare_dataset([doc], LabelSet())


def test_fine_tune_on_same_data_starts_near_final_loss(trained, small_data):
    model, trace = trained
    _, data = small_data
    _, ft = fine_tune(model, data, TrainHyperparams(epochs=1, learning_rate=1e-5), seed=5)
    final = trace.records[-1].total
    assert abs(ft.records[0].total - final) < 0.25 * final
    assert ft.records[0].total < trace.records[0].total


def test_head_reinit_only_touches_class_layers(trained):
    model, _ = trained
    new, reinit = model_for_labels(model, ("table",), seed=4)
    assert reinit
    assert new["head.cls.weight"].shape[0] == 2
    for name, p in new.params.items():
        if name.startswith(("head.cls", "head.reg")):
            continue
        np.testing.assert_array_equal(p.value, model[name])
    same, reinit = model_for_labels(model, model.labels.names)
    assert same is model and not reinit


def test_corrupt_checkpoint_reports_offset(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "m.ckpt"
    model.save(path)
    data = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="offset"):
        fine_tune(tmp_path / "cut.ckpt", [], TrainHyperparams(epochs=1))


def test_detect_contracts(trained, small_data):
    model, _ = trained
    docs, _ = small_data
    page = docs[0].pixels()
    h, w = page.shape[:2]
    assert detect(model, page, score_threshold=1.0) == []
    dets = detect(model, page, score_threshold=0.0)
    for d in dets:
        assert 0 <= d.box.x_min <= d.box.x_max <= w
        assert 0 <= d.box.y_min <= d.box.y_max <= h
        assert d.label in model.labels
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    assert detect(model, page, score_threshold=0.0) == dets


def test_detect_tensor_empty_when_no_proposals():
    model = DetectorModel(toy_config(), seed=0)
    boxes, scores, classes = detect_tensor(model, np.zeros((3, 8, 8)), proposal_cfg=ProposalConfig(min_box_size=100))
    assert boxes.shape == (0, 4) and len(scores) == 0 and len(classes) == 0
