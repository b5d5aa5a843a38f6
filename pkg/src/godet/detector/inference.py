"""Running a trained detector on page images."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from godet.geometry import Box, ScoredBox, clip_array, decode_array, nms_indices
from godet.numerics import softmax
from godet.detector.model import DetectorModel, backbone_forward, detection_head, roi_features, rpn_forward
from godet.detector.preprocess import preprocess_pixels
from godet.detector.proposals import ProposalConfig, propose_arrays
from godet.detector.targets import HEAD_DELTA_WEIGHTS
from godet.detector.train import anchors_for

TEST_PROPOSALS = ProposalConfig(pre_nms_top_n=2000, post_nms_top_n=300, nms_threshold=0.7)


def detect_tensor(model: DetectorModel, tensor: np.ndarray, score_threshold: float = 0.5,
                  nms_threshold: float = 0.3, proposal_cfg: ProposalConfig = TEST_PROPOSALS):
    """Detections in network-input coordinates as ``(boxes (D, 4), scores (D,), class ids (D,))``.

    A detection is kept when its class probability is strictly above
    ``score_threshold``; NMS runs per class.
    """
    _, h, w = tensor.shape
    feats, _ = backbone_forward(model, tensor)
    scores, deltas, _ = rpn_forward(model, feats)
    k, fh, fw, _ = scores.shape
    anchors = anchors_for(model, fh, fw).reshape(k, fh, fw, 4)
    rois, _ = propose_arrays(scores, deltas, anchors, proposal_cfg, (w, h))
    if len(rois) == 0:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    rf, _ = roi_features(model, feats, rois)
    logits, pdeltas, _ = detection_head(model, rf)
    probs = softmax(logits)
    out_boxes, out_scores, out_cls = [], [], []
    for c in range(len(model.labels)):
        sc = probs[:, c + 1]
        keep = np.flatnonzero(sc > score_threshold)
        if len(keep) == 0:
            continue
        boxes = clip_array(decode_array(rois[keep], pdeltas[keep, c], HEAD_DELTA_WEIGHTS), w, h)
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, sc_k = boxes[ok], sc[keep][ok]
        sel = nms_indices(boxes, sc_k, nms_threshold)
        out_boxes.append(boxes[sel])
        out_scores.append(sc_k[sel])
        out_cls.append(np.full(len(sel), c, dtype=np.int64))
    if not out_boxes:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    boxes = np.concatenate(out_boxes)
    scores = np.concatenate(out_scores)
    classes = np.concatenate(out_cls)
    order = np.lexsort((classes, -scores))
    return boxes[order], scores[order], classes[order]


def detect(model: DetectorModel, image: np.ndarray, score_threshold: float = 0.5, nms_threshold: float = 0.3,
           proposal_cfg: ProposalConfig = TEST_PROPOSALS) -> list[ScoredBox]:
    """Detect graphical objects in an (H, W, 3) uint8 page; boxes are in page pixels."""
    pixels = np.asarray(image)
    h, w = pixels.shape[:2]
    size = model.config.input_size
    tensor = preprocess_pixels(pixels, size)
    boxes, scores, classes = detect_tensor(model, tensor, score_threshold, nms_threshold, proposal_cfg)
    boxes = clip_array(boxes * np.array([w / size, h / size, w / size, h / size]), w, h)
    names = model.labels.names
    return [ScoredBox(Box(*b), names[c], float(min(s, 1.0))) for b, s, c in zip(boxes.tolist(), scores, classes)]


def _detect_doc(args):
    model, doc, score_threshold, nms_threshold = args
    return doc.image_id, detect(model, doc.pixels(), score_threshold, nms_threshold)


def detect_many(model: DetectorModel, docs, score_threshold: float = 0.05, nms_threshold: float = 0.3,
                jobs: int = 1) -> dict:
    """``{image_id: [ScoredBox, ...]}`` over documents, optionally across worker processes."""
    tasks = [(model, d, score_threshold, nms_threshold) for d in docs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return dict(pool.map(_detect_doc, tasks))
    return dict(map(_detect_doc, tasks))
