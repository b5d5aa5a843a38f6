"""Box arithmetic: IoU, anchors, regression deltas, NMS and clipping.

Boxes are ``(x_min, y_min, x_max, y_max)`` in continuous pixel coordinates.
The scalar helpers take :class:`Box` values; the ``*_array`` variants work on
``(N, 4)`` float arrays and are what the detector uses internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_LABELS = ("table", "figure", "equation")

# log-space clamp applied to dw/dh before exponentiation
DELTA_CLAMP = math.log(1000.0 / 16)


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_valid(self) -> bool:
        return (
            all(math.isfinite(v) for v in self)
            and self.x_min <= self.x_max
            and self.y_min <= self.y_max
        )

    def scaled(self, sx: float, sy: float) -> "Box":
        return Box(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)


class BoxDelta(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    label: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


class LabelSet:
    """Ordered class names with stable integer ids (0 is reserved for background
    by the detector, so class ``i`` of the set maps to detector index ``i + 1``)."""

    def __init__(self, names: Sequence[str] = DEFAULT_LABELS):
        names = tuple(names)
        if not names:
            raise ValueError("label set must not be empty")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate labels in {names}")
        self.names = names
        self._ids = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name):
        return name in self._ids

    def __eq__(self, other):
        return isinstance(other, LabelSet) and self.names == other.names

    def __repr__(self):
        return f"LabelSet({list(self.names)})"

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise KeyError(f"unknown label {name!r}; known: {list(self.names)}") from None


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor tiling. ``ratios`` are height/width; the default reciprocals
    1..1/5 give the wide anchors that tables and equations need."""

    scales: tuple = (8.0, 16.0, 32.0, 64.0, 128.0, 256.0)
    ratios: tuple = (1.0, 1 / 2, 1 / 3, 1 / 4, 1 / 5)
    stride: int = 16

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ValueError("anchor config needs at least one scale and one ratio")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.ratios):
            raise ValueError("anchor scales and ratios must be positive")
        if self.stride < 1:
            raise ValueError("anchor stride must be a positive integer")

    @property
    def k(self) -> int:
        return len(self.scales) * len(self.ratios)

    def base_sizes(self) -> np.ndarray:
        """(k, 2) array of (width, height), scale-major."""
        out = []
        for s in self.scales:
            for r in self.ratios:
                out.append((s / math.sqrt(r), s * math.sqrt(r)))
        return np.array(out, dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = Box(*a).area + Box(*b).area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def anchor_array(cfg: AnchorConfig, feature_h: int, feature_w: int) -> np.ndarray:
    """Anchors as a (k, H, W, 4) array, matching the RPN output layout."""
    if feature_h < 1 or feature_w < 1:
        raise ValueError(f"feature map must be at least 1x1, got {feature_h}x{feature_w}")
    sizes = cfg.base_sizes()
    cy = (np.arange(feature_h, dtype=np.float64) + 0.5) * cfg.stride
    cx = (np.arange(feature_w, dtype=np.float64) + 0.5) * cfg.stride
    half_w = sizes[:, 0, None, None] / 2
    half_h = sizes[:, 1, None, None] / 2
    cxg = np.broadcast_to(cx[None, None, :], (1, feature_h, feature_w))
    cyg = np.broadcast_to(cy[None, :, None], (1, feature_h, feature_w))
    return np.stack([cxg - half_w, cyg - half_h, cxg + half_w, cyg + half_h], axis=-1)


def generate_anchors(cfg: AnchorConfig, feature_h: int, feature_w: int) -> list[Box]:
    return [Box(*row) for row in anchor_array(cfg, feature_h, feature_w).reshape(-1, 4).tolist()]


def _centers_sizes(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_array(anchors: np.ndarray, targets: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    ax, ay, aw, ah = _centers_sizes(anchors)
    tx, ty, tw, th = _centers_sizes(targets)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("cannot encode against a zero-size anchor")
    if np.any(tw <= 0) or np.any(th <= 0):
        raise ValueError("cannot encode a zero-size target")
    wx, wy, ww, wh = weights
    return np.stack(
        [wx * (tx - ax) / aw, wy * (ty - ay) / ah, ww * np.log(tw / aw), wh * np.log(th / ah)],
        axis=-1,
    )


def decode_array(anchors: np.ndarray, deltas: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0),
                 clamp: float = DELTA_CLAMP) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    ax, ay, aw, ah = _centers_sizes(anchors)
    wx, wy, ww, wh = weights
    dx = deltas[..., 0] / wx
    dy = deltas[..., 1] / wy
    dw = np.minimum(deltas[..., 2] / ww, clamp)
    dh = np.minimum(deltas[..., 3] / wh, clamp)
    cx = ax + dx * aw
    cy = ay + dy * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode_delta(anchor: Box, target: Box) -> BoxDelta:
    return BoxDelta(*encode_array(np.array(anchor), np.array(target)).tolist())


def decode_delta(anchor: Box, delta: BoxDelta, clamp: float = DELTA_CLAMP) -> Box:
    return Box(*decode_array(np.array(anchor), np.array(delta), clamp=clamp).tolist())


def clip_array(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[..., 0::2] = np.clip(out[..., 0::2], 0, width)
    out[..., 1::2] = np.clip(out[..., 1::2], 0, height)
    return out


def clip_box(b: Box, width: float, height: float) -> Box:
    if width <= 0 or height <= 0:
        raise ValueError("clip extent must be positive")
    return Box(*clip_array(np.array(b), width, height).tolist())


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS over one class. Returns kept indices, highest score first;
    equal scores keep the lower index first."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    boxes = boxes[order]
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in range(len(boxes)):
        if suppressed[i]:
            continue
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        suppressed[i + 1:] |= iou_matrix(boxes[i], boxes[i + 1:])[0] > iou_threshold
    return order[np.array(keep, dtype=np.int64)]


def nms(boxes: list[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Class-wise greedy suppression; output sorted by descending score."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside [0, 1]")
    kept = []
    for label in dict.fromkeys(b.label for b in boxes):
        idx = [i for i, b in enumerate(boxes) if b.label == label]
        arr = np.array([boxes[i].box for i in idx], dtype=np.float64)
        sc = np.array([boxes[i].score for i in idx])
        kept.extend(idx[j] for j in nms_indices(arr, sc, iou_threshold))
    kept.sort(key=lambda i: (-boxes[i].score, i))
    return [boxes[i] for i in kept]
