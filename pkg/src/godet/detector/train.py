"""Losses, the SGD training loop, and checkpoint fine-tuning."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from godet import numerics as nx
from godet.checkpoint import atomic_write_bytes
from godet.errors import DataError
from godet.geometry import anchor_array
from godet.detector.model import (
    DetectorModel,
    ModelConfig,
    backbone_backward,
    backbone_forward,
    detection_head,
    detection_head_backward,
    roi_features,
    roi_features_backward,
    rpn_backward,
    rpn_forward,
)
from godet.detector.preprocess import preprocess_pixels, scale_boxes
from godet.detector.proposals import TRAIN_PROPOSALS, ProposalConfig, propose_arrays
from godet.detector.targets import (
    NEGATIVE,
    POSITIVE,
    MatchConfig,
    assign_anchor_labels,
    sample_rois,
    subsample_anchor_labels,
)

log = logging.getLogger(__name__)

LOSS_TERMS = ("rpn_cls", "rpn_reg", "head_cls", "head_reg")


@dataclass
class LossBreakdown:
    rpn_cls: float = 0.0
    rpn_reg: float = 0.0
    head_cls: float = 0.0
    head_reg: float = 0.0

    @property
    def total(self) -> float:
        return self.rpn_cls + self.rpn_reg + self.head_cls + self.head_reg


@dataclass
class TrainingSample:
    image_id: str
    pixels: np.ndarray  # (S, S, 3) uint8, already at network input size
    boxes: np.ndarray  # (G, 4) in input pixels
    classes: np.ndarray  # (G,) label ids
    _targets: dict = field(default_factory=dict, repr=False, compare=False)

    def anchor_targets(self, anchors: np.ndarray, match: MatchConfig):
        """Unsampled anchor labels and deltas, memoized per anchor layout."""
        key = (anchors.shape, match.positive_iou, match.negative_iou)
        if key not in self._targets:
            self._targets[key] = assign_anchor_labels(anchors, self.boxes, match)
        return self._targets[key]

    def tensor(self) -> np.ndarray:
        return preprocess_pixels(self.pixels, self.pixels.shape[0])


def prepare_dataset(docs, labels, size: int = 600) -> list[TrainingSample]:
    """Resize documents once and map labels to ids; label errors name the image."""
    from godet.detector.preprocess import resize_bilinear

    out = []
    for doc in docs:
        unknown = sorted({l for l in doc.labels() if l not in labels})
        if unknown:
            raise DataError(f"{doc.image_id}: labels {unknown} not in model label set {list(labels)}")
        try:
            pixels = doc.pixels()
        except (OSError, ValueError) as exc:
            raise DataError(f"{doc.image_id}: cannot read image {doc.image_path}: {exc}") from None
        h, w = pixels.shape[:2]
        if (w, h) != (doc.width, doc.height):
            raise DataError(
                f"{doc.image_id}: image is {w}x{h} but annotations declare {doc.width}x{doc.height}"
            )
        resized = pixels if (h, w) == (size, size) else np.clip(np.rint(resize_bilinear(pixels, size, size)), 0, 255)
        boxes = scale_boxes(doc.boxes(), w, h, size)
        classes = np.array([labels.id(l) for l in doc.labels()], dtype=np.int64)
        out.append(TrainingSample(doc.image_id, resized.astype(np.uint8), boxes, classes))
    return out


_ANCHOR_CACHE: dict = {}


def anchors_for(model: DetectorModel, feat_h: int, feat_w: int) -> np.ndarray:
    key = (model.config.anchors, feat_h, feat_w)
    if key not in _ANCHOR_CACHE:
        _ANCHOR_CACHE[key] = anchor_array(model.config.anchors, feat_h, feat_w).reshape(-1, 4)
    return _ANCHOR_CACHE[key]


def image_losses(model: DetectorModel, image: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                 match: MatchConfig, rng: np.random.Generator, proposal_cfg: ProposalConfig = TRAIN_PROPOSALS,
                 proposals: np.ndarray | None = None, grad_scale: float | None = 1.0,
                 anchor_targets=None) -> LossBreakdown:
    """Forward pass on one image; when ``grad_scale`` is not None, also accumulate
    ``grad_scale * d(total)/d(params)`` into the model's parameter grads.

    ``proposals`` overrides the RPN proposals fed to the head (the RPN losses
    are still computed), which keeps the loss a smooth function of the
    parameters for gradient checks. ``anchor_targets`` is a precomputed,
    unsampled ``(labels, deltas)`` pair for this image's anchors.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    feats, bcache = backbone_forward(model, image)
    scores, deltas, rcache = rpn_forward(model, feats)
    k, fh, fw, _ = scores.shape
    anchors = anchors_for(model, fh, fw)
    if anchor_targets is None:
        anchor_targets = assign_anchor_labels(anchors, gt_boxes, match)
    labels, targets = anchor_targets
    labels = subsample_anchor_labels(labels, match, rng)
    flat_scores = scores.reshape(-1, 2)
    flat_deltas = deltas.reshape(-1, 4)
    sampled = np.flatnonzero(labels >= NEGATIVE)
    pos = np.flatnonzero(labels == POSITIVE)
    losses = LossBreakdown()
    dscores = np.zeros_like(flat_scores)
    ddeltas = np.zeros_like(flat_deltas)
    if len(sampled):
        losses.rpn_cls, d = nx.softmax_cross_entropy(flat_scores[sampled], labels[sampled])
        dscores[sampled] = d
    if len(pos):
        loss, d = nx.smooth_l1(flat_deltas[pos] - targets[pos])
        losses.rpn_reg = loss / len(pos)
        ddeltas[pos] = d / len(pos)

    if proposals is None:
        h, w = image.shape[1:]
        proposals, _ = propose_arrays(scores, deltas, anchors.reshape(k, fh, fw, 4), proposal_cfg, (w, h))
    rois, roi_cls, roi_deltas = sample_rois(proposals, gt_boxes, gt_classes, match, rng)
    rf, fcache = roi_features(model, feats, rois)
    logits, pdeltas, hcache = detection_head(model, rf)
    losses.head_cls, dlogits = nx.softmax_cross_entropy(logits, roi_cls)
    dpdeltas = np.zeros_like(pdeltas)
    fg = np.flatnonzero(roi_cls > 0)
    if len(fg):
        sel = pdeltas[fg, roi_cls[fg] - 1]
        loss, d = nx.smooth_l1(sel - roi_deltas[fg])
        losses.head_reg = loss / len(fg)
        dpdeltas[fg, roi_cls[fg] - 1] = d / len(fg)

    if grad_scale is not None:
        drf = detection_head_backward(model, dlogits * grad_scale, dpdeltas * grad_scale, hcache)
        dfeat = roi_features_backward(model, drf, fcache)
        dfeat += rpn_backward(model, (dscores * grad_scale).reshape(scores.shape),
                              (ddeltas * grad_scale).reshape(deltas.shape), rcache)
        backbone_backward(model, dfeat, bcache)
    return losses


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    rpn_cls: float
    rpn_reg: float
    head_cls: float
    head_reg: float

    @property
    def total(self) -> float:
        return self.rpn_cls + self.rpn_reg + self.head_cls + self.head_reg


@dataclass
class LossTrace:
    records: list = field(default_factory=list)

    CSV_HEADER = ("epoch", "lr", "rpn_cls", "rpn_reg", "head_cls", "head_reg", "total")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_HEADER)
        for r in self.records:
            writer.writerow([r.epoch, repr(r.lr)] + [f"{v:.8f}" for v in
                                                   (r.rpn_cls, r.rpn_reg, r.head_cls, r.head_reg, r.total)])
        return buf.getvalue()

    def save(self, path):
        atomic_write_bytes(path, self.to_csv().encode("utf-8"))

    @classmethod
    def from_csv(cls, text: str) -> "LossTrace":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["rpn_cls"]), float(r["rpn_reg"]),
                                float(r["head_cls"]), float(r["head_reg"])) for r in rows])


def train(model: DetectorModel, dataset: list[TrainingSample], hp: nx.TrainHyperparams,
          match: MatchConfig = MatchConfig(), seed: int = 0, checkpoint_dir=None,
          proposal_cfg: ProposalConfig = TRAIN_PROPOSALS, start_epoch: int = 0, on_epoch=None):
    """Mini-batch SGD over ``hp.epochs`` epochs. Deterministic given ``seed``.

    Returns ``(model, LossTrace)``. When ``checkpoint_dir`` is set, writes
    ``epoch_NNN.ckpt`` and ``last.ckpt`` after every epoch plus ``loss.csv``.
    """
    if not dataset:
        raise DataError("training set is empty")
    rng = np.random.default_rng(seed)
    trace = LossTrace()
    params = model.parameters()
    model.zero_grad()
    for epoch in range(start_epoch, start_epoch + hp.epochs):
        lr = nx.lr_schedule(hp, epoch - start_epoch)
        order = rng.permutation(len(dataset))
        sums = np.zeros(4)
        for b in range(0, len(order), hp.batch_size):
            batch = order[b:b + hp.batch_size]
            for i in batch:
                s = dataset[i]
                tensor = s.tensor()
                feat_hw = model.config.backbone.feature_size(tensor.shape[1])
                targets = s.anchor_targets(anchors_for(model, feat_hw, feat_hw), match)
                losses = image_losses(model, tensor, s.boxes, s.classes, match, rng, proposal_cfg,
                                      grad_scale=1.0 / len(batch), anchor_targets=targets)
                sums += [losses.rpn_cls, losses.rpn_reg, losses.head_cls, losses.head_reg]
            nx.sgd_step(params, lr, hp.momentum, hp.weight_decay)
        means = sums / len(dataset)
        rec = EpochRecord(epoch, lr, *means.tolist())
        trace.records.append(rec)
        log.info("epoch %d lr %.2e loss %.4f (rpn %.4f/%.4f head %.4f/%.4f)", epoch, lr, rec.total, *means)
        if checkpoint_dir is not None:
            meta = {"epoch": epoch, "seed": seed}
            model.save(os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.ckpt"), meta)
            model.save(os.path.join(checkpoint_dir, "last.ckpt"), meta)
            trace.save(os.path.join(checkpoint_dir, "loss.csv"))
        if on_epoch is not None:
            on_epoch(model, rec)
    return model, trace


def model_for_labels(checkpoint, labels, seed: int = 0) -> tuple[DetectorModel, bool]:
    """Load ``checkpoint``; if its label set differs from ``labels``, rebuild the
    class-dependent head layers. Returns ``(model, head_reinitialized)``."""
    src = DetectorModel.load(checkpoint) if not isinstance(checkpoint, DetectorModel) else checkpoint
    labels = tuple(labels)
    if tuple(src.labels) == labels:
        return src, False
    cfg = src.config
    new = DetectorModel(ModelConfig(cfg.backbone, cfg.anchors, cfg.roi, labels, cfg.rpn_channels,
                                    cfg.head_hidden, cfg.input_size), seed=seed)
    tensors = {n: p.value for n, p in src.params.items()}
    new.load_tensors(tensors, "checkpoint", skip=("head.cls.weight", "head.cls.bias",
                                                  "head.reg.weight", "head.reg.bias"))
    return new, True


def fine_tune(checkpoint, dataset: list[TrainingSample], hp: nx.TrainHyperparams, labels=None,
              match: MatchConfig = MatchConfig(), seed: int = 0, checkpoint_dir=None,
              proposal_cfg: ProposalConfig = TRAIN_PROPOSALS):
    """Continue training from a checkpoint (path or model) on a new dataset."""
    if labels is None:
        src = DetectorModel.load(checkpoint) if not isinstance(checkpoint, DetectorModel) else checkpoint
        labels = tuple(src.labels)
        checkpoint = src
    model, reinit = model_for_labels(checkpoint, labels, seed)
    if reinit:
        log.info("label set changed to %s; head class layers reinitialized", list(labels))
    return train(model, dataset, hp, match, seed, checkpoint_dir, proposal_cfg)
