"""Training-time labelling of anchors and RoIs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from godet.geometry import encode_array, iou_matrix

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1

# head regression targets are scaled by these before the loss
HEAD_DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


@dataclass(frozen=True)
class MatchConfig:
    positive_iou: float = 0.7
    negative_iou: float = 0.3
    rpn_batch: int = 256
    positive_fraction: float = 0.5
    head_positive_iou: float = 0.5
    head_batch: int = 64
    head_positive_fraction: float = 0.25

    def __post_init__(self):
        if self.negative_iou > self.positive_iou:
            raise ValueError("negative_iou must not exceed positive_iou")
        if not 0 < self.positive_fraction <= 1 or not 0 < self.head_positive_fraction <= 1:
            raise ValueError("positive fractions must lie in (0, 1]")


def _subsample(rng, idx: np.ndarray, cap: int) -> np.ndarray:
    if len(idx) <= cap:
        return idx
    return np.sort(rng.choice(idx, size=cap, replace=False))


def assign_anchor_labels(anchors: np.ndarray, gts: np.ndarray, cfg: MatchConfig,
                         rng: np.random.Generator | None = None):
    """Label anchors positive / negative / ignore and compute regression targets.

    ``anchors`` is (A, 4); ``gts`` is (G, 4). Returns ``(labels (A,), deltas (A, 4))``
    where deltas are meaningful only for positives. When ``rng`` is given the
    labels are subsampled to ``cfg.rpn_batch`` anchors with at most
    ``positive_fraction`` positives; unsampled anchors become ignore.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(anchors) == 0:
        raise ValueError("need at least one anchor")
    labels = np.full(len(anchors), IGNORE, dtype=np.int64)
    deltas = np.zeros((len(anchors), 4))
    if len(gts) == 0:
        labels[:] = NEGATIVE
    else:
        ious = iou_matrix(anchors, gts)
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(len(anchors)), best_gt]
        labels[best_iou <= cfg.negative_iou] = NEGATIVE
        labels[best_iou >= cfg.positive_iou] = POSITIVE
        # every GT keeps its best anchor(s), whatever the IoU
        per_gt_best = ious.max(axis=0)
        for g in range(len(gts)):
            if per_gt_best[g] <= 0:
                continue
            winners = np.flatnonzero(ious[:, g] == per_gt_best[g])
            labels[winners] = POSITIVE
            best_gt[winners] = g
        pos = labels == POSITIVE
        deltas[pos] = encode_array(anchors[pos], gts[best_gt[pos]])
    if rng is not None:
        labels = subsample_anchor_labels(labels, cfg, rng)
    return labels, deltas


def subsample_anchor_labels(labels: np.ndarray, cfg: MatchConfig, rng: np.random.Generator) -> np.ndarray:
    """Keep at most ``cfg.rpn_batch`` labelled anchors; the rest become ignore."""
    pos_idx = np.flatnonzero(labels == POSITIVE)
    neg_idx = np.flatnonzero(labels == NEGATIVE)
    keep_pos = _subsample(rng, pos_idx, int(cfg.rpn_batch * cfg.positive_fraction))
    keep_neg = _subsample(rng, neg_idx, cfg.rpn_batch - len(keep_pos))
    sampled = np.full(len(labels), IGNORE, dtype=np.int64)
    sampled[keep_pos] = POSITIVE
    sampled[keep_neg] = NEGATIVE
    return sampled


def sample_rois(proposals: np.ndarray, gts: np.ndarray, gt_classes: np.ndarray, cfg: MatchConfig,
                rng: np.random.Generator):
    """Pick head training RoIs from proposals plus the GT boxes themselves.

    Returns ``(rois (R, 4), classes (R,), deltas (R, 4))`` with class 0 for
    background and ``1 + label id`` for foreground.
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    rois = np.concatenate([np.asarray(proposals, dtype=np.float64).reshape(-1, 4), gts])
    classes = np.zeros(len(rois), dtype=np.int64)
    deltas = np.zeros((len(rois), 4))
    if len(gts) == 0:
        bg = _subsample(rng, np.arange(len(rois)), cfg.head_batch)
        return rois[bg], classes[bg], deltas[bg]
    ious = iou_matrix(rois, gts)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(rois)), best]
    fg_idx = np.flatnonzero(best_iou >= cfg.head_positive_iou)
    bg_idx = np.flatnonzero(best_iou < cfg.head_positive_iou)
    fg = _subsample(rng, fg_idx, int(round(cfg.head_batch * cfg.head_positive_fraction)))
    bg = _subsample(rng, bg_idx, cfg.head_batch - len(fg))
    keep = np.concatenate([fg, bg])
    classes[fg] = 1 + np.asarray(gt_classes, dtype=np.int64)[best[fg]]
    if len(fg):
        deltas[fg] = encode_array(rois[fg], gts[best[fg]], HEAD_DELTA_WEIGHTS)
    return rois[keep], classes[keep], deltas[keep]
