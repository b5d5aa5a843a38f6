"""Drawing detections onto page images (table blue, figure green, equation red)."""
from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageDraw

from godet.data.documents import DocumentImage
from godet.geometry import ScoredBox

LABEL_COLORS = {
    "table": (0, 0, 255),
    "figure": (0, 255, 0),
    "equation": (255, 0, 0),
}
FALLBACK_COLOR = (255, 0, 255)
BORDER = 3


def _as_triplet(det):
    if isinstance(det, ScoredBox):
        return det.box, det.label, det.score
    box, label = det[0], det[1]
    return box, label, (det[2] if len(det) > 2 else None)


def border_band(box, width: int, height: int, thickness: int = BORDER) -> np.ndarray:
    """Boolean (H, W) mask of the ``thickness``-pixel band just inside ``box``."""
    x0 = max(int(math.floor(box[0])), 0)
    y0 = max(int(math.floor(box[1])), 0)
    x1 = min(int(math.ceil(box[2])), width)
    y1 = min(int(math.ceil(box[3])), height)
    mask = np.zeros((height, width), dtype=bool)
    if x1 <= x0 or y1 <= y0:
        return mask
    mask[y0:y1, x0:x1] = True
    mask[y0 + thickness:y1 - thickness, x0 + thickness:x1 - thickness] = False
    return mask


def render(pixels, detections) -> DocumentImage:
    """Outline each detection; ground-truth style ``(box, label)`` pairs get no score text.

    Drawing order is ascending score, so higher-scoring boxes end up on top.
    """
    if isinstance(pixels, DocumentImage):
        pixels = pixels.pixels
    out = np.array(pixels, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    items = [_as_triplet(d) for d in detections]
    items.sort(key=lambda t: -1.0 if t[2] is None else t[2])
    for box, label, score in items:
        color = LABEL_COLORS.get(label, FALLBACK_COLOR)
        out[border_band(box, w, h)] = color
        if score is not None:
            img = Image.fromarray(out)
            ImageDraw.Draw(img).text((max(box[0], 0), max(box[1] - 12, 0)), f"{label} {score:.2f}", fill=color)
            out = np.asarray(img).copy()
    return DocumentImage(out)
