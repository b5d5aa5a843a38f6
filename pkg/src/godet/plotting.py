"""Matplotlib figures for reports: PR curves, IoU sweeps and loss traces."""
from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from godet.checkpoint import atomic_write_bytes  # noqa: E402


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_pr_curves(report, path):
    """Precision-recall curve per class at the report's IoU threshold."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (recall, precision) in report.curves.items():
        ap = report.classes[label].ap
        ax.step(recall, precision, where="post", label=f"{label} (AP {ap:.3f})")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"IoU {report.iou_threshold:.2f}, mAP {report.map:.3f}")
    ax.legend(loc="lower left", fontsize=8)
    _save(fig, path)


def plot_sweep(reports, path):
    """Per-class AP and mAP as a function of the IoU threshold."""
    thresholds = [r.iou_threshold for r in reports]
    fig, ax = plt.subplots(figsize=(5, 4))
    labels = list(reports[0].classes) if reports else []
    for label in labels:
        ax.plot(thresholds, [r.classes[label].ap for r in reports], marker="o", label=label)
    ax.plot(thresholds, [r.map for r in reports], marker="s", color="black", linewidth=2, label="mAP")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_loss_trace(trace, path):
    """Loss terms per epoch, with the learning rate on a secondary axis."""
    epochs = [r.epoch for r in trace.records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for term in ("rpn_cls", "rpn_reg", "head_cls", "head_reg", "total"):
        ax.plot(epochs, [getattr(r, term) for r in trace.records], label=term,
                linewidth=2 if term == "total" else 1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    lr_ax = ax.twinx()
    lr_ax.plot(epochs, [r.lr for r in trace.records], color="gray", linestyle=":")
    lr_ax.set_yscale("log")
    lr_ax.set_ylabel("learning rate")
    _save(fig, path)
