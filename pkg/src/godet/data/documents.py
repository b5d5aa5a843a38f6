"""Annotated documents and the canonical JSON dataset manifest.

Manifest schema (``format = "godet-manifest"``, ``version = 1``)::

    {
      "format": "godet-manifest",
      "version": 1,
      "name": "pod-synth",
      "labels": ["table", "figure", "equation"],
      "split": "train",                      # "train", "test" or "all"
      "entries": [
        {
          "id": "page-0001",
          "image": "images/page-0001.png",   # relative to the manifest file
          "width": 612,
          "height": 792,
          "annotations": [
            {"label": "table", "box": [x_min, y_min, x_max, y_max]}
          ]
        }
      ]
    }
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from godet.checkpoint import atomic_write_bytes
from godet.errors import ManifestError
from godet.geometry import DEFAULT_LABELS, Box, clip_box

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "godet-manifest"
MANIFEST_VERSION = 1
SPLITS = ("train", "test", "all")


@dataclass(frozen=True)
class Annotation:
    box: Box
    label: str


@dataclass
class DocumentImage:
    pixels: np.ndarray  # (H, W, 3) uint8

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def save(self, path) -> None:
        save_png(path, self.pixels)


@dataclass
class AnnotatedDocument:
    image_id: str
    width: int
    height: int
    annotations: list = field(default_factory=list)
    image_path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False, compare=False)

    def pixels(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise ManifestError(f"{self.image_id}: document has neither pixels nor an image path")
        return load_png(self.image_path)

    def boxes(self) -> np.ndarray:
        return np.array([a.box for a in self.annotations], dtype=np.float64).reshape(-1, 4)

    def labels(self) -> list:
        return [a.label for a in self.annotations]


@dataclass
class DatasetManifest:
    name: str
    labels: tuple = DEFAULT_LABELS
    split: str = "all"
    entries: list = field(default_factory=list)
    root: str = field(default=".", compare=False)
    clipped: int = field(default=0, compare=False)

    def __len__(self):
        return len(self.entries)

    def subset(self, entries, split: str) -> "DatasetManifest":
        return replace(self, entries=list(entries), split=split, clipped=0)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(path, pixels: np.ndarray) -> None:
    import io

    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def _require(obj, key, where, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise ManifestError(f"{where}: missing field '{key}'")
    val = obj[key]
    if kind is float:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool) and math.isfinite(val)
    elif kind is int:
        ok = isinstance(val, int) and not isinstance(val, bool)
    else:
        ok = isinstance(val, kind)
    if not ok:
        raise ManifestError(f"{where}.{key}: expected {kind.__name__}, got {type(val).__name__}")
    return val


def manifest_from_dict(data: dict, root: str = ".", source: str = "<manifest>",
                       check_images: bool = True) -> DatasetManifest:
    if _require(data, "format", source, str) != MANIFEST_FORMAT:
        raise ManifestError(f"{source}.format: expected {MANIFEST_FORMAT!r}")
    version = _require(data, "version", source, int)
    if version != MANIFEST_VERSION:
        raise ManifestError(f"{source}.version: unsupported version {version}")
    name = _require(data, "name", source, str)
    labels = tuple(_require(data, "labels", source, list))
    if not labels or not all(isinstance(l, str) for l in labels) or len(set(labels)) != len(labels):
        raise ManifestError(f"{source}.labels: expected a non-empty list of distinct strings")
    split = _require(data, "split", source, str)
    if split not in SPLITS:
        raise ManifestError(f"{source}.split: expected one of {SPLITS}, got {split!r}")
    entries = []
    clipped = 0
    missing = []
    seen = set()
    for i, raw in enumerate(_require(data, "entries", source, list)):
        where = f"{source}: entries[{i}]"
        image_id = _require(raw, "id", where, str)
        if image_id in seen:
            raise ManifestError(f"{where}.id: duplicate image id {image_id!r}")
        seen.add(image_id)
        rel = _require(raw, "image", where, str)
        width = _require(raw, "width", where, int)
        height = _require(raw, "height", where, int)
        if width < 1 or height < 1:
            raise ManifestError(f"{where}: image size must be positive, got {width}x{height}")
        path = os.path.normpath(rel if os.path.isabs(rel) else os.path.join(root, rel))
        if check_images and not os.path.exists(path):
            missing.append(path)
        anns = []
        for j, a in enumerate(_require(raw, "annotations", where, list)):
            aw = f"{where}.annotations[{j}]"
            label = _require(a, "label", aw, str)
            if label not in labels:
                raise ManifestError(f"{aw}.label: {label!r} not in label set {list(labels)}")
            coords = _require(a, "box", aw, list)
            if len(coords) != 4 or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in coords
            ):
                raise ManifestError(f"{aw}.box: expected 4 finite numbers")
            box = Box(*(float(v) for v in coords))
            if box.x_min > box.x_max or box.y_min > box.y_max:
                raise ManifestError(f"{aw}.box: min exceeds max in {list(box)}")
            fixed = clip_box(box, width, height)
            if fixed != box:
                clipped += 1
            anns.append(Annotation(fixed, label))
        entries.append(AnnotatedDocument(image_id, width, height, anns, path))
    if missing:
        raise ManifestError(f"{source}: missing image files: " + ", ".join(missing))
    if clipped:
        log.warning("%s: clipped %d out-of-bounds boxes", source, clipped)
    return DatasetManifest(name, labels, split, entries, root, clipped)


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ManifestError(f"{path}: {exc.strerror}") from None
    return manifest_from_dict(data, os.path.dirname(os.path.abspath(path)), path, check_images)


def manifest_to_dict(manifest: DatasetManifest, root: str | None = None) -> dict:
    root = os.path.abspath(root or manifest.root)
    entries = []
    for doc in manifest.entries:
        image = doc.image_path or f"{doc.image_id}.png"
        if os.path.isabs(image):
            image = os.path.relpath(image, root)
        entries.append({
            "id": doc.image_id,
            "image": image.replace(os.sep, "/"),
            "width": doc.width,
            "height": doc.height,
            "annotations": [{"label": a.label, "box": [float(v) for v in a.box]} for a in doc.annotations],
        })
    return {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "name": manifest.name,
        "labels": list(manifest.labels),
        "split": manifest.split,
        "entries": entries,
    }


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = os.fspath(path)
    root = os.path.dirname(os.path.abspath(path))
    text = json.dumps(manifest_to_dict(manifest, root), indent=1)
    atomic_write_bytes(path, (text + "\n").encode("utf-8"))


def split(manifest: DatasetManifest, train_fraction: float, seed: int = 0):
    """Deterministic shuffled partition into ``(train, test)`` manifests."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(manifest.entries))
    n_train = int(round(len(order) * train_fraction))
    train = [manifest.entries[i] for i in sorted(order[:n_train])]
    test = [manifest.entries[i] for i in sorted(order[n_train:])]
    return manifest.subset(train, "train"), manifest.subset(test, "test")
