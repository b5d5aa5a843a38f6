"""Finite-difference self-check of every differentiable op and the toy detector loss.

Each suite builds a small random problem, compares the analytic gradient with
central differences and returns the max relative error. Inputs are chosen
away from kinks (ReLU at 0, smooth L1 at |x| = beta, pooling ties).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from godet import numerics as nx
from godet.detector.roi import RoiConfig, roi_align_batch, roi_align_batch_backward

TOLERANCE = 1e-3
EPSILON = 1e-5


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _projection(rng, shape):
    """Random upstream gradient so a tensor-valued op becomes a scalar loss."""
    return rng.standard_normal(shape)


def check_conv2d(rng) -> float:
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    stride, pad = 2, 1
    y, _ = nx.conv2d(x, w, b, stride, pad)
    g = _projection(rng, y.shape)

    def wrt(which):
        def op(v):
            args = {"x": x, "w": w, "b": b}
            args[which] = v
            y, cache = nx.conv2d(args["x"], args["w"], args["b"], stride, pad)
            grads = dict(zip(("x", "w", "b"), nx.conv2d_backward(g, cache)))
            return float((y * g).sum()), grads[which]
        return op

    return max(nx.finite_diff_check(wrt(k), v, EPSILON) for k, v in (("x", x), ("w", w), ("b", b)))


def check_linear(rng) -> float:
    x = rng.standard_normal((5, 6))
    w = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    g = _projection(rng, (5, 3))

    def wrt(idx):
        def op(v):
            args = [x, w, b]
            args[idx] = v
            y, cache = nx.linear(*args)
            return float((y * g).sum()), nx.linear_backward(g, cache)[idx]
        return op

    return max(nx.finite_diff_check(wrt(i), v, EPSILON) for i, v in enumerate((x, w, b)))


def check_max_pool2d(rng) -> float:
    # a permutation keeps every window free of ties
    x = rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.1
    y, _ = nx.max_pool2d(x, 2, 2)
    g = _projection(rng, y.shape)

    def op(v):
        y, cache = nx.max_pool2d(v, 2, 2)
        return float((y * g).sum()), nx.max_pool2d_backward(g, cache)

    return nx.finite_diff_check(op, x, EPSILON)


def check_bilinear_sample(rng) -> float:
    f = rng.standard_normal((2, 5, 6))
    errs = []
    for _ in range(5):
        x, y = rng.uniform(0.1, 4.9), rng.uniform(0.1, 3.9)
        x, y = x + 0.01 * (x % 1 < 0.02), y + 0.01 * (y % 1 < 0.02)

        def op(v, x=x, y=y):
            return nx.bilinear_sample(v, x, y, 1), nx.bilinear_sample_backward(v.shape, x, y, 1)

        errs.append(nx.finite_diff_check(op, f, EPSILON))
    return max(errs)


def check_roi_align(rng) -> float:
    feats = rng.standard_normal((3, 6, 7))
    rois = np.array([[0.7, 1.2, 5.3, 4.9], [2.1, 0.4, 6.6, 5.5], [-0.5, 2.0, 3.0, 7.5]])
    cfg = RoiConfig("align", (3, 2), 2)
    out, _ = roi_align_batch(feats, rois, cfg)
    g = _projection(rng, out.shape)

    def op(v):
        out, cache = roi_align_batch(v, rois, cfg)
        return float((out * g).sum()), roi_align_batch_backward(g, cache)

    return nx.finite_diff_check(op, feats, EPSILON)


def check_softmax_cross_entropy(rng) -> float:
    logits = rng.standard_normal((6, 4)) * 2
    target = rng.integers(0, 4, size=6)
    weights = rng.uniform(0.5, 2.0, size=6)
    return max(
        nx.finite_diff_check(lambda v: nx.softmax_cross_entropy(v, target), logits, EPSILON),
        nx.finite_diff_check(lambda v: nx.softmax_cross_entropy(v, target, weights), logits, EPSILON),
        nx.finite_diff_check(lambda v: nx.softmax_cross_entropy(v, target[0]), logits[0], EPSILON),
    )


def check_smooth_l1(rng) -> float:
    x = rng.uniform(-3, 3, size=40)
    x = x[np.abs(np.abs(x) - 1.0) > 0.01]
    return max(
        nx.finite_diff_check(lambda v: nx.smooth_l1(v), x, EPSILON),
        nx.finite_diff_check(lambda v: nx.smooth_l1(v, beta=0.5),
                             x[np.abs(np.abs(x) - 0.5) > 0.01], EPSILON),
    )


def check_toy_detector(rng) -> float:
    """End-to-end loss of a toy detector with respect to every parameter."""
    from godet.detector.model import DetectorModel, toy_config
    from godet.detector.targets import MatchConfig
    from godet.detector.train import image_losses

    model = DetectorModel(toy_config(), seed=int(rng.integers(1 << 31)))
    # larger head weights so the regression and class terms carry real gradient
    for name in ("rpn.cls.weight", "rpn.reg.weight", "head.cls.weight", "head.reg.weight"):
        model[name][...] = rng.standard_normal(model[name].shape) * 0.3
    image = rng.uniform(0, 1, size=(3, 8, 8))
    gts = np.array([[0.5, 1.0, 5.0, 6.5], [3.0, 2.0, 7.5, 7.0]])
    classes = np.array([0, 2])
    proposals = np.array([[0.0, 0.0, 5.0, 6.0], [3.5, 2.5, 7.0, 7.5], [1.0, 1.0, 4.0, 3.0]])
    match = MatchConfig(positive_iou=0.5, negative_iou=0.2, rpn_batch=16, head_batch=8, head_positive_fraction=0.5)
    seed = int(rng.integers(1 << 31))

    def loss():
        return image_losses(model, image, gts, classes, match, np.random.default_rng(seed),
                            proposals=proposals, grad_scale=None).total

    model.zero_grad()
    image_losses(model, image, gts, classes, match, np.random.default_rng(seed), proposals=proposals)
    worst = 0.0
    for p in model.parameters():
        analytic = p.grad.copy()
        numeric = nx.numeric_gradient(lambda _: loss(), p.value, EPSILON)
        worst = max(worst, nx.relative_error(analytic, numeric))
    model.zero_grad()
    return worst


SUITES = {
    "conv2d": check_conv2d,
    "linear": check_linear,
    "max_pool2d": check_max_pool2d,
    "bilinear_sample": check_bilinear_sample,
    "roi_align": check_roi_align,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "smooth_l1": check_smooth_l1,
    "toy_detector": check_toy_detector,
}


def run_suites(seed: int = 0, names=None) -> list[SuiteResult]:
    out = []
    for name in names or SUITES:
        if name not in SUITES:
            raise KeyError(f"unknown gradcheck suite {name!r}; choose from {sorted(SUITES)}")
        t = time.perf_counter()
        err = SUITES[name](np.random.default_rng([seed, len(out)]))
        out.append(SuiteResult(name, err, time.perf_counter() - t))
    return out
