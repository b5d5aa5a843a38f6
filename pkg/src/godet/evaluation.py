"""IoU-thresholded matching, VOC all-point AP, mAP, precision/recall/F1 and IoU sweeps."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from godet.checkpoint import atomic_write_bytes
from godet.errors import DataError
from godet.geometry import Box, ScoredBox, iou_matrix

DEFAULT_SCORE_CUTOFF = 0.5


@dataclass
class ClassMetrics:
    ap: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class EvalReport:
    iou_threshold: float
    classes: dict = field(default_factory=dict)  # label -> ClassMetrics
    score_threshold: float = DEFAULT_SCORE_CUTOFF
    curves: dict = field(default_factory=dict, repr=False, compare=False)  # label -> (recall, precision)

    @property
    def map(self) -> float:
        return mean_ap([m.ap for m in self.classes.values()])

    @property
    def ave_f1(self) -> float:
        return float(np.mean([m.f1 for m in self.classes.values()]))

    TSV_HEADER = ("iou_threshold", "class", "ap", "precision", "recall", "f1", "tp", "fp", "fn")

    def rows(self):
        for label, m in self.classes.items():
            yield (self.iou_threshold, label, m.ap, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn)
        tot = [sum(getattr(m, k) for m in self.classes.values()) for k in ("tp", "fp", "fn")]
        yield (self.iou_threshold, "mean", self.map, float("nan"), float("nan"), self.ave_f1, *tot)

    def format_table(self) -> str:
        labels = list(self.classes)
        head = f"{'IoU':<6}" + "".join(f"{'AP ' + l:>14}" for l in labels) + f"{'mAP':>8}"
        head += "".join(f"{'F1 ' + l:>14}" for l in labels) + f"{'Ave F1':>8}"
        line = f"{self.iou_threshold:<6.2f}" + "".join(f"{self.classes[l].ap:>14.3f}" for l in labels)
        line += f"{self.map:>8.3f}" + "".join(f"{self.classes[l].f1:>14.3f}" for l in labels)
        line += f"{self.ave_f1:>8.3f}"
        detail = [f"{'class':<10}{'P':>8}{'R':>8}{'F1':>8}{'TP':>6}{'FP':>6}{'FN':>6}"]
        for l, m in self.classes.items():
            detail.append(f"{l:<10}{m.precision:>8.3f}{m.recall:>8.3f}{m.f1:>8.3f}{m.tp:>6}{m.fp:>6}{m.fn:>6}")
        return "\n".join([head, line, "", *detail])


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def reports_to_tsv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(EvalReport.TSV_HEADER)
    for r in reports:
        for row in r.rows():
            w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def reports_from_tsv(text: str) -> list[EvalReport]:
    out: dict[float, EvalReport] = {}
    for row in csv.DictReader(io.StringIO(text), delimiter="\t"):
        thr = float(row["iou_threshold"])
        rep = out.setdefault(thr, EvalReport(thr))
        if row["class"] == "mean":
            continue
        rep.classes[row["class"]] = ClassMetrics(
            float(row["ap"]), float(row["precision"]), float(row["recall"]), float(row["f1"]),
            int(row["tp"]), int(row["fp"]), int(row["fn"]),
        )
    return list(out.values())


# -- primitives --------------------------------------------------------------

def precision_recall_f1(tp: int, fp: int, fn: int):
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, f1_score(p, r)


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def mean_ap(per_class_ap) -> float:
    vals = list(per_class_ap)
    if not vals:
        raise ValueError("mean_ap needs at least one class")
    return float(sum(vals) / len(vals))


def pr_curve(flags, n_gt: int):
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt if n_gt else np.zeros(len(flags))
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def average_precision(flags, n_gt: int) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if n_gt == 0 or len(flags) == 0:
        return 0.0
    recall, precision = pr_curve(flags, n_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


# -- matching ----------------------------------------------------------------

def _ordered(preds, label):
    """All predictions of ``label`` as ``(image_id, box, score)``, descending score, stable."""
    items = []
    for image_id, dets in preds.items():
        for d in dets:
            if d.label == label:
                items.append((image_id, d.box, d.score))
    order = sorted(range(len(items)), key=lambda i: -items[i][2])
    return [items[i] for i in order]


def match_detections(preds: dict, gts: dict, iou_threshold: float, label: str):
    """Greedy VOC matching for one class.

    ``preds`` maps image id to a list of :class:`ScoredBox`; ``gts`` maps image
    id to a list of ``(Box, label)``. Returns ``(flags, scores, fn)`` where
    ``flags[i]`` says whether the i-th highest-scoring prediction is a TP.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold {iou_threshold} outside (0, 1]")
    gt_boxes = {
        image_id: np.array([b for b, l in items if l == label], dtype=np.float64).reshape(-1, 4)
        for image_id, items in gts.items()
    }
    used = {image_id: np.zeros(len(b), dtype=bool) for image_id, b in gt_boxes.items()}
    flags, scores = [], []
    for image_id, box, score in _ordered(preds, label):
        scores.append(score)
        boxes = gt_boxes.get(image_id)
        if boxes is None or len(boxes) == 0:
            flags.append(False)
            continue
        ious = iou_matrix(np.asarray(box, dtype=np.float64), boxes)[0]
        ious[used[image_id]] = -1.0
        j = int(np.argmax(ious))  # first index wins ties
        if ious[j] >= iou_threshold:
            used[image_id][j] = True
            flags.append(True)
        else:
            flags.append(False)
    fn = int(sum((~u).sum() for u in used.values()))
    return flags, scores, fn


def _check_labels(preds: dict, labels):
    seen = {d.label for dets in preds.values() for d in dets}
    unknown = sorted(seen - set(labels))
    if unknown:
        raise DataError(f"predictions use labels {unknown} outside the label set {list(labels)}")


def evaluate(preds: dict, gts: dict, iou_threshold: float = 0.5, labels=None,
             score_threshold: float = DEFAULT_SCORE_CUTOFF) -> EvalReport:
    """AP over the full ranking; P/R/F1 and counts over predictions scoring at least ``score_threshold``."""
    if labels is None:
        labels = list(dict.fromkeys(l for items in gts.values() for _, l in items))
    labels = list(labels)
    _check_labels(preds, labels)
    operating = {i: [d for d in dets if d.score >= score_threshold] for i, dets in preds.items()}
    report = EvalReport(iou_threshold, score_threshold=score_threshold)
    for label in labels:
        n_gt = sum(1 for items in gts.values() for _, l in items if l == label)
        flags, _, _ = match_detections(preds, gts, iou_threshold, label)
        ap = average_precision(flags, n_gt)
        op_flags, _, fn = match_detections(operating, gts, iou_threshold, label)
        tp = int(sum(op_flags))
        fp = len(op_flags) - tp
        p, r, f1 = precision_recall_f1(tp, fp, fn)
        report.classes[label] = ClassMetrics(ap, p, r, f1, tp, fp, fn)
        report.curves[label] = pr_curve(flags, n_gt)
    return report


def threshold_sweep(preds: dict, gts: dict, thresholds, labels=None,
                    score_threshold: float = DEFAULT_SCORE_CUTOFF) -> list[EvalReport]:
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ValueError("IoU thresholds must be sorted ascending")
    return [evaluate(preds, gts, t, labels, score_threshold) for t in thresholds]


# -- prediction files --------------------------------------------------------

PREDICTION_FIELDS = ("image_id", "label", "score", "x_min", "y_min", "x_max", "y_max")


def predictions_to_jsonl(preds: dict) -> str:
    lines = []
    for image_id, dets in preds.items():
        for d in dets:
            rec = {"image_id": image_id, "label": d.label, "score": d.score}
            rec.update(zip(("x_min", "y_min", "x_max", "y_max"), (float(v) for v in d.box)))
            lines.append(json.dumps(rec))
    return "".join(l + "\n" for l in lines)


def write_predictions(path, preds: dict) -> None:
    atomic_write_bytes(path, predictions_to_jsonl(preds).encode("utf-8"))


def read_predictions(path, image_ids=()) -> dict:
    """Parse newline-delimited detection records; ``image_ids`` seeds empty entries."""
    preds: dict = {i: [] for i in image_ids}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                missing = [k for k in PREDICTION_FIELDS if k not in rec]
                if missing:
                    raise DataError(f"{path}:{lineno}: missing fields {missing}")
                det = ScoredBox(Box(*(float(rec[k]) for k in ("x_min", "y_min", "x_max", "y_max"))),
                                str(rec["label"]), float(rec["score"]))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            preds.setdefault(str(rec["image_id"]), []).append(det)
    return preds


def ground_truth_from_manifest(manifest) -> dict:
    return {doc.image_id: [(a.box, a.label) for a in doc.annotations] for doc in manifest.entries}
