"""Resizing document images to the fixed network input."""
from __future__ import annotations

import numpy as np

from godet.geometry import Box

INPUT_SIZE = 600


def _axis(in_size: int, out_size: int):
    # half-pixel centres, edge clamped
    pos = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    pos = np.clip(pos, 0.0, in_size - 1)
    p0 = np.floor(pos).astype(np.int64)
    p1 = np.minimum(p0 + 1, in_size - 1)
    return p0, p1, pos - p0


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W[, C]) array; returns float64."""
    img = np.asarray(pixels, dtype=np.float64)
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError(f"cannot resize an empty {w}x{h} image")
    y0, y1, fy = _axis(h, out_h)
    x0, x1, fx = _axis(w, out_w)
    extra = (None,) * (img.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    rows = img[y0] * (1 - fy) + img[y1] * fy
    fx = fx[(None, slice(None)) + extra]
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def preprocess_pixels(pixels: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, size, size) float64 in [0, 1]."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise ValueError(f"expected a non-empty HxWx3 image, got shape {pixels.shape}")
    if pixels.shape[:2] == (size, size):
        out = pixels.astype(np.float64)
    else:
        out = resize_bilinear(pixels, size, size)
    return np.ascontiguousarray(out.transpose(2, 0, 1)) / 255.0


def scale_boxes(boxes, width: int, height: int, size: int = INPUT_SIZE) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return boxes * np.array([size / width, size / height, size / width, size / height])


def preprocess(doc, size: int = INPUT_SIZE):
    """Resize an :class:`~godet.data.AnnotatedDocument` to the network input.

    Returns ``(tensor (3, size, size), [(Box, label), ...])`` with boxes in the
    resized frame.
    """
    pixels = doc.pixels()
    h, w = pixels.shape[:2]
    if h == 0 or w == 0:
        raise ValueError(f"{doc.image_id}: zero-dimension image")
    tensor = preprocess_pixels(pixels, size)
    sx, sy = size / w, size / h
    return tensor, [(Box(*a.box).scaled(sx, sy), a.label) for a in doc.annotations]
