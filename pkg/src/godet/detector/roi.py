"""Fixed-size RoI feature extraction: quantized max pooling and bilinear RoIAlign.

RoIs are given in feature-map coordinates, where cell ``(i, j)`` covers
``[j, j+1) x [i, i+1)`` and its value sits at the cell center.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from godet.geometry import Box


@dataclass(frozen=True)
class RoiConfig:
    mode: str = "align"
    output_size: tuple = (7, 7)
    samples_per_bin: int = 2

    def __post_init__(self):
        if self.mode not in ("pool", "align"):
            raise ValueError(f"roi mode must be 'pool' or 'align', got {self.mode!r}")
        if min(self.output_size) < 1:
            raise ValueError("roi output size must be >= 1")
        if self.samples_per_bin < 1:
            raise ValueError("samples_per_bin must be >= 1")


def _axis_weights(lo: np.ndarray, hi: np.ndarray, bins: int, samples: int, size: int) -> np.ndarray:
    """(R, bins, size) averaged 1-D interpolation weights for each RoI along one axis."""
    r = lo.shape[0]
    step = (hi - lo) / bins
    offs = (np.arange(bins)[:, None] + (np.arange(samples)[None, :] + 0.5) / samples).reshape(-1)
    # continuous coordinate -> grid coordinate (cell centers at integer + 0.5)
    pos = lo[:, None] + offs[None, :] * step[:, None] - 0.5
    pos = np.clip(pos, 0.0, size - 1)
    p0 = np.floor(pos).astype(np.int64)
    p1 = np.minimum(p0 + 1, size - 1)
    frac = pos - p0
    w = np.zeros((r, bins * samples, size))
    ridx = np.arange(r)[:, None]
    sidx = np.arange(bins * samples)[None, :]
    np.add.at(w, (ridx, sidx, p0), 1.0 - frac)
    np.add.at(w, (ridx, sidx, p1), frac)
    return w.reshape(r, bins, samples, size).mean(axis=2)


def roi_align_batch(features: np.ndarray, rois: np.ndarray, cfg: RoiConfig):
    """Average of ``samples_per_bin**2`` bilinear samples per bin.

    Because the sample grid in a bin is a Cartesian product, the averaged
    bilinear weights factor into a row matrix and a column matrix per RoI, so
    ``out[r, c] = Ay[r] @ features[c] @ Ax[r].T``.
    Returns ``(out (R, C, oh, ow), cache)``.
    """
    c, h, w = features.shape
    oh, ow = cfg.output_size
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    r = rois.shape[0]
    if r == 0:
        return np.zeros((0, c, oh, ow)), (features.shape, None, None)
    s = cfg.samples_per_bin
    ay = _axis_weights(rois[:, 1], rois[:, 3], oh, s, h)  # (R, oh, H)
    ax = _axis_weights(rois[:, 0], rois[:, 2], ow, s, w)  # (R, ow, W)
    t = (ay.reshape(r * oh, h) @ features.transpose(1, 0, 2).reshape(h, c * w)).reshape(r, oh * c, w)
    out = t @ ax.transpose(0, 2, 1)  # (R, oh*C, ow)
    out = out.reshape(r, oh, c, ow).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(out), (features.shape, ay, ax)


def roi_align_batch_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, ay, ax = cache
    c, h, w = shape
    if ay is None:
        return np.zeros(shape)
    r, _, oh, ow = dout.shape
    d = dout.transpose(0, 2, 1, 3).reshape(r, oh * c, ow)
    dt = d @ ax  # (R, oh*C, W)
    dt = dt.reshape(r * oh, c * w)
    df = ay.reshape(r * oh, h).T @ dt  # (H, C*W)
    return df.reshape(h, c, w).transpose(1, 0, 2)


def roi_align(features: np.ndarray, roi: Box, cfg: RoiConfig) -> np.ndarray:
    out, _ = roi_align_batch(features, np.array([roi], dtype=np.float64), cfg)
    return out[0]


def _quantized_bins(lo: float, hi: float, bins: int, size: int):
    start = int(round(lo))
    end = max(int(round(hi)), start + 1)
    step = (end - start) / bins
    edges = []
    for i in range(bins):
        a = start + int(math.floor(i * step))
        b = start + int(math.ceil((i + 1) * step))
        a = min(max(a, 0), size - 1)
        b = max(min(b, size), a + 1)  # empty bin after clipping -> nearest cell
        edges.append((a, b))
    return edges


def roi_pool_batch(features: np.ndarray, rois: np.ndarray, cfg: RoiConfig):
    """Quantized max pooling. Returns ``(out (R, C, oh, ow), cache)``."""
    c, h, w = features.shape
    oh, ow = cfg.output_size
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    out = np.zeros((len(rois), c, oh, ow))
    argmax = np.zeros((len(rois), c, oh, ow), dtype=np.int64)
    flat = features.reshape(c, h * w)
    for n, (x0, y0, x1, y1) in enumerate(rois):
        ybins = _quantized_bins(y0, y1, oh, h)
        xbins = _quantized_bins(x0, x1, ow, w)
        for i, (ya, yb) in enumerate(ybins):
            for j, (xa, xb) in enumerate(xbins):
                idx = (np.arange(ya, yb)[:, None] * w + np.arange(xa, xb)[None, :]).reshape(-1)
                vals = flat[:, idx]
                k = vals.argmax(axis=1)
                out[n, :, i, j] = vals[np.arange(c), k]
                argmax[n, :, i, j] = idx[k]
    return out, (features.shape, argmax)


def roi_pool_batch_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, argmax = cache
    c, h, w = shape
    grad = np.zeros((c, h * w))
    chan = np.broadcast_to(np.arange(c)[None, :, None, None], argmax.shape)
    np.add.at(grad, (chan.reshape(-1), argmax.reshape(-1)), dout.reshape(-1))
    return grad.reshape(shape)


def roi_pool(features: np.ndarray, roi: Box, cfg: RoiConfig) -> np.ndarray:
    out, _ = roi_pool_batch(features, np.array([roi], dtype=np.float64), cfg)
    return out[0]


def extract(features: np.ndarray, rois: np.ndarray, cfg: RoiConfig):
    if cfg.mode == "align":
        return roi_align_batch(features, rois, cfg)
    return roi_pool_batch(features, rois, cfg)


def extract_backward(dout: np.ndarray, cache, cfg: RoiConfig) -> np.ndarray:
    if cfg.mode == "align":
        return roi_align_batch_backward(dout, cache)
    return roi_pool_batch_backward(dout, cache)
