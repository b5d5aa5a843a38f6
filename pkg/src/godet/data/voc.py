"""Pascal-VOC style per-image XML ground truth, converted to and from manifests."""
from __future__ import annotations

import os
import xml.etree.ElementTree as ET
from glob import glob

from godet.checkpoint import atomic_write_bytes
from godet.data.documents import AnnotatedDocument, Annotation, DatasetManifest
from godet.errors import DataError
from godet.geometry import DEFAULT_LABELS, Box, clip_box


def _text(node, path, where):
    child = node.find(path)
    if child is None or child.text is None:
        raise DataError(f"{where}: missing <{path}>")
    return child.text.strip()


def _number(node, path, where, cast=float):
    raw = _text(node, path, where)
    try:
        return cast(float(raw)) if cast is int else cast(raw)
    except ValueError:
        raise DataError(f"{where}: <{path}> is not a number: {raw!r}") from None


def import_voc_xml(directory, labels=DEFAULT_LABELS, name: str | None = None,
                   image_dir: str | None = None) -> DatasetManifest:
    """Read every ``*.xml`` in ``directory`` into a manifest.

    Image paths come from ``<filename>`` resolved against ``image_dir``
    (default: the XML directory). Unknown class names raise with a listing.
    """
    directory = os.fspath(directory)
    image_dir = image_dir or directory
    labels = tuple(labels)
    entries = []
    unknown: dict[str, list[str]] = {}
    clipped = 0
    for path in sorted(glob(os.path.join(directory, "*.xml"))):
        try:
            root = ET.parse(path).getroot()
        except ET.ParseError as exc:
            raise DataError(f"{path}: malformed XML: {exc}") from None
        filename = _text(root, "filename", path)
        width = _number(root, "size/width", path, int)
        height = _number(root, "size/height", path, int)
        anns = []
        for i, obj in enumerate(root.findall("object")):
            where = f"{path}: object[{i}]"
            cls = _text(obj, "name", where)
            if cls not in labels:
                unknown.setdefault(cls, []).append(os.path.basename(path))
                continue
            box = Box(*(_number(obj, f"bndbox/{k}", where) for k in ("xmin", "ymin", "xmax", "ymax")))
            if box.x_min > box.x_max or box.y_min > box.y_max:
                raise DataError(f"{where}: inverted box {list(box)}")
            fixed = clip_box(box, width, height)
            clipped += fixed != box
            anns.append(Annotation(fixed, cls))
        image_id = os.path.splitext(os.path.basename(path))[0]
        entries.append(AnnotatedDocument(image_id, width, height, anns,
                                         os.path.normpath(os.path.join(image_dir, filename))))
    if unknown:
        listing = "; ".join(f"{k!r} in {', '.join(v)}" for k, v in sorted(unknown.items()))
        raise DataError(f"{directory}: class names outside {list(labels)}: {listing}")
    return DatasetManifest(name or os.path.basename(os.path.normpath(directory)), labels, "all", entries,
                           os.path.abspath(directory), clipped)


def document_to_voc(doc: AnnotatedDocument) -> bytes:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = os.path.basename(doc.image_path or f"{doc.image_id}.png")
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(doc.width)
    ET.SubElement(size, "height").text = str(doc.height)
    ET.SubElement(size, "depth").text = "3"
    for a in doc.annotations:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = a.label
        ET.SubElement(obj, "difficult").text = "0"
        bb = ET.SubElement(obj, "bndbox")
        for key, val in zip(("xmin", "ymin", "xmax", "ymax"), a.box):
            ET.SubElement(bb, key).text = repr(float(val))
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


def export_voc_xml(manifest: DatasetManifest, directory) -> list[str]:
    """Write one XML per entry; float coordinates are written exactly (``repr``)."""
    written = []
    for doc in manifest.entries:
        path = os.path.join(directory, f"{doc.image_id}.xml")
        atomic_write_bytes(path, document_to_voc(doc))
        written.append(path)
    return written
