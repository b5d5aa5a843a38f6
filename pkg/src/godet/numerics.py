"""Dense float64 kernels with explicit backward passes, gradient checking and SGD.

Tensors are plain ``numpy.ndarray`` objects in float64. Every differentiable op
comes as a forward function returning ``(output, cache)`` plus a matching
``*_backward`` taking the upstream gradient and that cache.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    velocity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class TrainHyperparams:
    learning_rate: float = 0.001
    decay_factor: float = 0.1
    decay_every_epochs: int = 5
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 20

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


def lr_schedule(hp: TrainHyperparams, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return hp.learning_rate * hp.decay_factor ** (epoch // hp.decay_every_epochs)


def sgd_step(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    """``value -= lr * grad`` (heavy-ball when ``momentum > 0``), then zero grads."""
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.value
        if momentum:
            if p.velocity is None:
                p.velocity = np.zeros_like(p.value)
            p.velocity *= momentum
            p.velocity += g
            g = p.velocity
        p.value -= lr * g
        p.zero_grad()


# -- convolution -------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0):
    """Cross-correlation of NCHW ``x`` with OIhw ``w``. Returns ``(y, cache)``."""
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.shape}")
    n, c, h, wd = x.shape
    f, c_w, kh, kw = w.shape
    if c != c_w:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weights expect {c_w}")
    if b.shape != (f,):
        raise ValueError(f"conv2d bias shape {b.shape} does not match {f} output channels")
    if h + 2 * padding < kh:
        raise ValueError(f"conv2d kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if wd + 2 * padding < kw:
        raise ValueError(f"conv2d kernel width {kw} exceeds padded input width {wd + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if kh == stride and kw == stride and padding == 0:
        # non-overlapping patches: a reshape, no window copy
        cols = xp[:, :, : ho * kh, : wo * kw].reshape(n, c, ho, kh, wo, kw)
        cols = cols.transpose(0, 2, 4, 1, 3, 5).reshape(n * ho * wo, c * kh * kw)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    y = cols @ w.reshape(f, -1).T + b
    y = y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (x.shape, cols, w, stride, padding)


def conv2d_backward(dy: np.ndarray, cache, need_dx: bool = True):
    """Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false."""
    x_shape, cols, w, stride, padding = cache
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    _, _, ho, wo = dy.shape
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dy2 @ w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=DTYPE)
    if kh == stride and kw == stride and padding == 0:
        dxp[:, :, : ho * kh, : wo * kw] = dcols.transpose(0, 3, 1, 4, 2, 5).reshape(n, c, ho * kh, wo * kw)
    else:
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
    return dx, dw, db


# -- pointwise and pooling ---------------------------------------------------

def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def max_pool2d(x: np.ndarray, window: int, stride: int | None = None):
    """Window-wise maximum over NCHW input (no padding)."""
    stride = stride or window
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg, window, stride)


def max_pool2d_backward(dy: np.ndarray, cache) -> np.ndarray:
    x_shape, arg, window, stride = cache
    n, c, h, w = x_shape
    _, _, ho, wo = dy.shape
    rows = (np.arange(ho)[:, None] * stride + arg // window).reshape(n, c, ho, wo)
    colsi = (np.arange(wo)[None, :] * stride + arg % window).reshape(n, c, ho, wo)
    dx = np.zeros(x_shape, dtype=DTYPE)
    flat_idx = rows * w + colsi
    dxf = dx.reshape(n * c, h * w)
    np.add.at(dxf, (np.arange(n * c)[:, None], flat_idx.reshape(n * c, -1)), dy.reshape(n * c, -1))
    return dx


# -- bilinear sampling -------------------------------------------------------

def bilinear_weights(height: int, width: int, x, y):
    """Corner indices and weights for sampling at grid coordinates ``(x, y)``.

    Stored value ``f[i, j]`` sits at ``(x=j, y=i)``. Coordinates outside the
    grid are clamped to the edge. Returns ``(y0, x0, y1, x1, wy, wx)`` arrays.
    """
    x = np.clip(np.asarray(x, dtype=DTYPE), 0.0, width - 1)
    y = np.clip(np.asarray(y, dtype=DTYPE), 0.0, height - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    return y0, x0, y1, x1, y - y0, x - x0


def bilinear_sample(feature: np.ndarray, x: float, y: float, channel: int = 0) -> float:
    """Interpolate channel ``channel`` of a CHW (or HW) map at ``(x, y)``."""
    f = feature if feature.ndim == 2 else feature[channel]
    y0, x0, y1, x1, wy, wx = bilinear_weights(f.shape[0], f.shape[1], x, y)
    return float(
        (1 - wy) * (1 - wx) * f[y0, x0] + (1 - wy) * wx * f[y0, x1]
        + wy * (1 - wx) * f[y1, x0] + wy * wx * f[y1, x1]
    )


def bilinear_sample_backward(feature_shape, x: float, y: float, channel: int = 0,
                             upstream: float = 1.0) -> np.ndarray:
    """Gradient of :func:`bilinear_sample` with respect to the feature values."""
    grad = np.zeros(feature_shape, dtype=DTYPE)
    g = grad if grad.ndim == 2 else grad[channel]
    y0, x0, y1, x1, wy, wx = bilinear_weights(g.shape[0], g.shape[1], x, y)
    g[y0, x0] += upstream * (1 - wy) * (1 - wx)
    g[y0, x1] += upstream * (1 - wy) * wx
    g[y1, x0] += upstream * wy * (1 - wx)
    g[y1, x1] += upstream * wy * wx
    return grad


# -- dense layers and losses -------------------------------------------------

def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Affine map ``x @ w.T + b`` with ``w`` shaped (out, in)."""
    x2 = x.reshape(1, -1) if x.ndim == 1 else x
    if x2.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input width {x2.shape[1]} != weight input dim {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    y = x2 @ w.T + b
    return (y[0] if x.ndim == 1 else y), (x, w)


def linear_backward(dy: np.ndarray, cache):
    x, w = cache
    dy2 = dy.reshape(1, -1) if dy.ndim == 1 else dy
    x2 = x.reshape(1, -1) if x.ndim == 1 else x
    dx = dy2 @ w
    return dx.reshape(x.shape), dy2.T @ x2, dy2.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target, weights=None):
    """Mean negative log-likelihood. ``logits`` is (C,) or (N, C).

    ``weights`` (N,) rescales each row's contribution; the result is the
    weighted sum divided by N. Returns ``(loss, dlogits)``.
    """
    single = logits.ndim == 1
    lg = logits.reshape(1, -1) if single else logits
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, c = lg.shape
    if np.any(t < 0) or np.any(t >= c):
        raise ValueError(f"target index out of range for {c} classes")
    z = lg - lg.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), t]
    wts = np.ones(n) if weights is None else np.asarray(weights, dtype=DTYPE)
    loss = float((wts * nll).sum() / n)
    d = np.exp(z - logsum[:, None])
    d[np.arange(n), t] -= 1.0
    d *= (wts / n)[:, None]
    return loss, (d[0] if single else d)


def smooth_l1(x: np.ndarray, beta: float = 1.0):
    """Summed Huber-style loss with transition at ``|x| = beta``. Returns ``(loss, dx)``."""
    x = np.asarray(x, dtype=DTYPE)
    ax = np.abs(x)
    small = ax < beta
    loss = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta).sum()
    grad = np.where(small, x / beta, np.sign(x))
    return float(loss), grad


# -- gradient checking -------------------------------------------------------

REL_ERROR_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_ERROR_FLOOR) -> float:
    """Max over elements of ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, epsilon: float = 1e-5,
                     indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    grad = np.zeros_like(x, dtype=DTYPE)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + epsilon
        fp = f(x)
        flat[i] = old - epsilon
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * epsilon)
    return grad


def finite_diff_check(op: Callable[[np.ndarray], tuple], x: np.ndarray, epsilon: float = 1e-5) -> float:
    """Max relative error between ``op``'s analytic gradient and central differences.

    ``op(x)`` must return ``(scalar_value, gradient_wrt_x)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(x, dtype=DTYPE, copy=True)
    _, analytic = op(x.copy())
    numeric = numeric_gradient(lambda v: op(v)[0], x, epsilon)
    return relative_error(analytic, numeric)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
