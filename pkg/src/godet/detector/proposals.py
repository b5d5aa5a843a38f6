"""Turning RPN outputs into class-agnostic proposals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from godet.geometry import Box, ScoredBox, clip_array, decode_array, nms_indices
from godet.numerics import softmax


@dataclass(frozen=True)
class ProposalConfig:
    pre_nms_top_n: int = 2000
    post_nms_top_n: int = 300
    nms_threshold: float = 0.7
    min_box_size: float = 4.0

    def __post_init__(self):
        if self.post_nms_top_n > self.pre_nms_top_n:
            raise ValueError("post_nms_top_n must not exceed pre_nms_top_n")
        if not 0 <= self.nms_threshold <= 1:
            raise ValueError("nms_threshold must lie in [0, 1]")


TRAIN_PROPOSALS = ProposalConfig(pre_nms_top_n=600, post_nms_top_n=100)


def objectness(scores: np.ndarray) -> np.ndarray:
    """Foreground probability from (..., 2) logits (index 1 = object)."""
    return softmax(scores)[..., 1]


def propose_arrays(scores: np.ndarray, deltas: np.ndarray, anchors: np.ndarray, cfg: ProposalConfig,
                   image_size) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, filter and suppress. Returns ``(boxes (P, 4), scores (P,))``."""
    width, height = image_size
    prob = objectness(np.asarray(scores)).reshape(-1)
    boxes = decode_array(np.asarray(anchors).reshape(-1, 4), np.asarray(deltas).reshape(-1, 4))
    boxes = clip_array(boxes, width, height)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    ok = np.flatnonzero((w >= cfg.min_box_size) & (h >= cfg.min_box_size))
    order = ok[np.argsort(-prob[ok], kind="stable")][: cfg.pre_nms_top_n]
    boxes, prob = boxes[order], prob[order]
    keep = nms_indices(boxes, prob, cfg.nms_threshold, max_keep=cfg.post_nms_top_n)
    return boxes[keep], prob[keep]


def propose(scores, deltas, anchors, cfg: ProposalConfig, image_size) -> list[ScoredBox]:
    boxes, prob = propose_arrays(scores, deltas, anchors, cfg, image_size)
    return [ScoredBox(Box(*b), "object", float(min(max(p, 0.0), 1.0))) for b, p in zip(boxes.tolist(), prob)]
