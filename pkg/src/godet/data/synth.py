"""Deterministic synthetic document pages with exact ground-truth boxes.

Body text is drawn as gray word bars. Tables, figures and equations are each
rendered on their own canvas, cropped to their ink, and pasted into a one- or
two-column flow layout, so every ground-truth box is the exact ink extent of
its object.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image, ImageDraw

from godet.data.documents import AnnotatedDocument, Annotation, DatasetManifest, save_manifest, save_png
from godet.geometry import DEFAULT_LABELS, Box

INK_LEVEL = 250  # a pixel is ink when any channel is below this

PALETTE = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189), (255, 127, 14), (23, 190, 207)]


@dataclass(frozen=True)
class SynthConfig:
    page_width: int = 612
    page_height: int = 792
    margin: int = 40
    gutter: int = 20
    column_mix: tuple = ((1, 0.5), (2, 0.5))
    table_count: tuple = (0, 2)
    figure_count: tuple = (0, 2)
    equation_count: tuple = (0, 3)
    table_styles: tuple = (("ruled", 0.4), ("unruled", 0.3), ("alternating", 0.3))
    figure_styles: tuple = (("plot", 0.5), ("blobs", 0.5))
    equation_styles: tuple = (("inline", 0.6), ("fraction", 0.4))
    text_gray: tuple = (110, 160)
    seed: int = 0

    def __post_init__(self):
        for name in ("table_count", "figure_count", "equation_count"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (min, max) range, got {(lo, hi)}")
        for name in ("column_mix", "table_styles", "figure_styles", "equation_styles"):
            total = sum(p for _, p in getattr(self, name))
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"{name} probabilities sum to {total}, not 1")
        if self.page_width < 2 * self.margin + 40 or self.page_height < 2 * self.margin + 40:
            raise ValueError("page too small for its margins")


SYNTH_PRESETS = {
    "base": SynthConfig(),
    # shifted domain: square pages, darker text, mostly borderless tables, chart panels, display fractions
    "shifted": SynthConfig(
        page_width=700,
        page_height=700,
        margin=30,
        column_mix=((1, 0.3), (2, 0.7)),
        table_styles=(("ruled", 0.1), ("unruled", 0.5), ("alternating", 0.4)),
        figure_styles=(("plot", 0.2), ("blobs", 0.8)),
        equation_styles=(("inline", 0.3), ("fraction", 0.7)),
        text_gray=(60, 100),
    ),
}


def _choose(rng, mix):
    names = [n for n, _ in mix]
    probs = np.array([p for _, p in mix], dtype=np.float64)
    return names[int(rng.choice(len(names), p=probs / probs.sum()))]


def _ri(rng, lo, hi) -> int:
    return int(rng.integers(lo, hi + 1))


# -- object renderers --------------------------------------------------------

def _word_bars(draw, rng, x0, x1, y, h, color, gap=(3, 5), word=(8, 34)):
    x = x0
    while x < x1:
        w = _ri(rng, *word)
        end = min(x + w, x1)
        if end - x >= 3:
            draw.rectangle([x, y, end - 1, y + h - 1], fill=color)
        x = end + _ri(rng, *gap)


def _render_table(rng, w, h, style):
    img = Image.new("RGB", (w, h), "white")
    d = ImageDraw.Draw(img)
    rows = max(3, min(10, h // 18))
    cols = _ri(rng, 2, max(2, min(6, w // 50)))
    weights = rng.uniform(0.6, 1.4, cols)
    xs = np.concatenate([[0], np.cumsum(weights / weights.sum() * (w - 1))]).round().astype(int)
    ys = np.linspace(0, h - 1, rows + 1).round().astype(int)
    if style == "alternating":
        shade = _ri(rng, 205, 230)
        for r in range(rows):
            if r % 2 == 0:
                d.rectangle([0, ys[r], w - 1, ys[r + 1]], fill=(shade, shade, shade))
    for r in range(rows):
        bar_h = 6 if r == 0 else 5
        tone = 20 if r == 0 else _ri(rng, 50, 80)
        cy = (ys[r] + ys[r + 1]) // 2 - bar_h // 2
        for c in range(cols):
            cx0, cx1 = xs[c] + 5, xs[c + 1] - 5
            if cx1 - cx0 < 6:
                continue
            length = int((cx1 - cx0) * rng.uniform(0.35, 0.95))
            d.rectangle([cx0, cy, cx0 + length, cy + bar_h - 1], fill=(tone, tone, tone))
    if style == "ruled":
        for y in ys:
            d.line([(0, y), (w - 1, y)], fill=(0, 0, 0), width=1)
        for x in xs:
            d.line([(x, 0), (x, h - 1)], fill=(0, 0, 0), width=1)
    elif style == "unruled" and rng.random() < 0.6:
        d.rectangle([0, 0, w - 1, 1], fill=(0, 0, 0))
        d.rectangle([0, h - 2, w - 1, h - 1], fill=(0, 0, 0))
        d.line([(0, ys[1]), (w - 1, ys[1])], fill=(0, 0, 0), width=1)
    return img


def _render_figure(rng, w, h, style):
    img = Image.new("RGB", (w, h), "white")
    d = ImageDraw.Draw(img)
    if style == "plot":
        ox, oy = 8, h - 9
        d.line([(ox, 2), (ox, oy)], fill=(0, 0, 0), width=2)
        d.line([(ox, oy), (w - 3, oy)], fill=(0, 0, 0), width=2)
        for t in np.linspace(ox, w - 3, _ri(rng, 4, 8))[1:]:
            d.line([(int(t), oy), (int(t), oy + 5)], fill=(0, 0, 0), width=1)
        for t in np.linspace(2, oy, _ri(rng, 3, 6))[:-1]:
            d.line([(ox - 5, int(t)), (ox, int(t))], fill=(0, 0, 0), width=1)
        xs = np.linspace(ox + 3, w - 6, 40)
        for k in range(_ri(rng, 1, 3)):
            f = rng.uniform(0.5, 3.0)
            ph = rng.uniform(0, 2 * math.pi)
            base = rng.uniform(0.3, 0.7)
            amp = rng.uniform(0.1, 0.3)
            ys = oy - (base + amp * np.sin(f * np.linspace(0, 2 * math.pi, 40) + ph)) * (oy - 6)
            color = PALETTE[int(rng.integers(len(PALETTE)))]
            d.line(list(zip(xs.tolist(), ys.tolist())), fill=color, width=2)
            if rng.random() < 0.5:
                for x, y in list(zip(xs, ys))[::6]:
                    d.ellipse([x - 2, y - 2, x + 2, y + 2], fill=color)
    else:
        if rng.random() < 0.5:
            d.rectangle([0, 0, w - 1, h - 1], outline=(0, 0, 0), width=1)
        kind = _ri(rng, 0, 2)
        if kind == 0:  # bar chart
            n = _ri(rng, 3, 9)
            bw = (w - 12) / n
            d.line([(4, h - 5), (w - 5, h - 5)], fill=(0, 0, 0), width=2)
            for i in range(n):
                top = int(rng.uniform(0.1, 0.8) * (h - 12)) + 4
                color = PALETTE[i % len(PALETTE)]
                d.rectangle([int(6 + i * bw + 2), top, int(6 + (i + 1) * bw - 2), h - 6], fill=color)
        elif kind == 1:  # scatter / blobs
            for _ in range(_ri(rng, 6, 25)):
                r = rng.uniform(3, max(4, min(w, h) / 6))
                cx, cy = rng.uniform(r + 2, w - r - 2), rng.uniform(r + 2, h - r - 2)
                color = PALETTE[int(rng.integers(len(PALETTE)))]
                d.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
        else:  # pie
            r = min(w, h) / 2 - 4
            cx, cy = w / 2, h / 2
            cuts = np.sort(rng.uniform(0, 360, _ri(rng, 2, 5)))
            edges = np.concatenate([cuts, [cuts[0] + 360]])
            for i in range(len(cuts)):
                d.pieslice([cx - r, cy - r, cx + r, cy + r], edges[i], edges[i + 1],
                           fill=PALETTE[i % len(PALETTE)], outline=(0, 0, 0))
    return img


def _glyph_run(d, rng, x, x_end, base, size):
    while x < x_end - 4:
        kind = rng.random()
        gw = _ri(rng, 3, 8)
        if kind < 0.12 and x + 10 < x_end:  # "="
            d.rectangle([x, base - size // 2 - 2, x + 8, base - size // 2 - 1], fill=(0, 0, 0))
            d.rectangle([x, base - size // 2 + 2, x + 8, base - size // 2 + 3], fill=(0, 0, 0))
            x += 13
            continue
        gh = _ri(rng, size - 4, size)
        d.rectangle([x, base - gh, x + gw - 1, base - 1], fill=(0, 0, 0))
        if kind > 0.8:  # superscript
            d.rectangle([x + gw + 1, base - size - 3, x + gw + 4, base - size + 2], fill=(0, 0, 0))
            gw += 5
        x += gw + _ri(rng, 2, 4)
    return x


def _render_equation(rng, w, h, style):
    img = Image.new("RGB", (w, h), "white")
    d = ImageDraw.Draw(img)
    if style == "inline":
        _glyph_run(d, rng, 2, w - 2, h - 3, h - 6)
    else:
        mid = h // 2
        split_x = int(w * rng.uniform(0.25, 0.45))
        _glyph_run(d, rng, 2, split_x, mid + 6, 11)
        fx0 = split_x + 6
        d.rectangle([fx0, mid, w - 3, mid + 1], fill=(0, 0, 0))
        num_w = int((w - 3 - fx0) * rng.uniform(0.5, 0.95))
        off = (w - 3 - fx0 - num_w) // 2
        _glyph_run(d, rng, fx0 + off, fx0 + off + num_w, mid - 3, 10)
        den_w = int((w - 3 - fx0) * rng.uniform(0.4, 0.95))
        off = (w - 3 - fx0 - den_w) // 2
        _glyph_run(d, rng, fx0 + off, fx0 + off + den_w, mid + 15, 10)
    return img


def ink_mask(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels) < INK_LEVEL).any(axis=-1)


def _crop_to_ink(img: Image.Image):
    arr = np.asarray(img)
    mask = ink_mask(arr)
    if not mask.any():
        return None
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    return arr[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]


# -- layout ------------------------------------------------------------------

@dataclass
class _Column:
    x0: int
    x1: int
    y: int
    y_end: int

    @property
    def width(self):
        return self.x1 - self.x0


def _object_size(rng, label, style, col_w):
    if label == "table":
        w = int(col_w * rng.uniform(0.6, 1.0))
        h = _ri(rng, 3, 9) * _ri(rng, 16, 22)
    elif label == "figure":
        w = int(col_w * rng.uniform(0.45, 0.9))
        h = int(np.clip(w * rng.uniform(0.5, 0.9), 60, 260))
    else:
        w = max(60, int(col_w * rng.uniform(0.3, 0.7)))
        h = _ri(rng, 20, 26) if style == "inline" else _ri(rng, 34, 40)
    return min(w, col_w), h


def _paragraph(draw, rng, col: _Column, lines: int, gray, line_h, pitch) -> int:
    """Draw up to ``lines`` text lines at the column cursor; returns lines drawn."""
    drawn = 0
    for i in range(lines):
        if col.y + line_h > col.y_end:
            break
        end = col.x1 if i < lines - 1 else col.x0 + int(col.width * rng.uniform(0.3, 0.9))
        tone = _ri(rng, *gray)
        _word_bars(draw, rng, col.x0, end, col.y, line_h, (tone, tone, tone))
        col.y += pitch
        drawn += 1
    return drawn


def _try_layout(cfg: SynthConfig, rng, objects):
    page = Image.new("RGB", (cfg.page_width, cfg.page_height), "white")
    draw = ImageDraw.Draw(page)
    ncols = int(_choose(rng, cfg.column_mix))
    usable = cfg.page_width - 2 * cfg.margin
    col_w = (usable - cfg.gutter * (ncols - 1)) // ncols
    columns = [
        _Column(cfg.margin + i * (col_w + cfg.gutter), cfg.margin + i * (col_w + cfg.gutter) + col_w,
                cfg.margin, cfg.page_height - cfg.margin)
        for i in range(ncols)
    ]
    line_h = _ri(rng, 5, 7)
    pitch = line_h + _ri(rng, 6, 8)
    block_gap = _ri(rng, 10, 16)
    annotations = []
    ci = 0
    _paragraph(draw, rng, columns[0], _ri(rng, 1, 6), cfg.text_gray, line_h, pitch)
    for label, style in objects:
        w, h = _object_size(rng, label, style, col_w)
        crop = None
        while ci < len(columns):
            col = columns[ci]
            if col.y + block_gap + h + block_gap <= col.y_end:
                break
            ci += 1
        else:
            return None
        col = columns[ci]
        col.y += block_gap if col.y > cfg.margin else 0
        renderer = {"table": _render_table, "figure": _render_figure, "equation": _render_equation}[label]
        crop = _crop_to_ink(renderer(rng, w, h, style))
        if crop is None:
            return None
        ch, cw = crop.shape[:2]
        x = col.x0 + (col.width - cw) // 2 if label == "equation" else col.x0 + _ri(rng, 0, col.width - cw)
        page.paste(Image.fromarray(crop), (x, col.y))
        annotations.append(Annotation(Box(float(x), float(col.y), float(x + cw), float(col.y + ch)), label))
        col.y += ch + block_gap
        _paragraph(draw, rng, col, _ri(rng, 2, 8), cfg.text_gray, line_h, pitch)
        col.y += block_gap
    # fill what is left with text
    for col in columns[ci:]:
        _paragraph(draw, rng, col, 10_000, cfg.text_gray, line_h, pitch)
    return np.asarray(page, dtype=np.uint8).copy(), annotations


def synth_page(cfg: SynthConfig, index: int, attempts: int = 25) -> AnnotatedDocument:
    """Page ``index`` of the corpus defined by ``cfg`` (pure in ``(cfg, index)``)."""
    rng = np.random.default_rng([cfg.seed, index])
    counts = {
        "table": _ri(rng, *cfg.table_count),
        "figure": _ri(rng, *cfg.figure_count),
        "equation": _ri(rng, *cfg.equation_count),
    }
    styles = {"table": cfg.table_styles, "figure": cfg.figure_styles, "equation": cfg.equation_styles}
    objects = [(label, _choose(rng, styles[label])) for label, n in counts.items() for _ in range(n)]
    order = rng.permutation(len(objects))
    objects = [objects[i] for i in order]
    for _ in range(attempts):
        result = _try_layout(cfg, rng, objects)
        if result is not None:
            pixels, annotations = result
            image_id = f"page-{index:05d}"
            return AnnotatedDocument(image_id, cfg.page_width, cfg.page_height, annotations, None, pixels)
    raise ValueError(
        f"page {cfg.page_width}x{cfg.page_height} too small for "
        f"{counts['table']} tables, {counts['figure']} figures, {counts['equation']} equations"
    )


def _write_page(args):
    cfg, index, image_dir = args
    doc = synth_page(cfg, index)
    path = os.path.join(image_dir, f"{doc.image_id}.png")
    save_png(path, doc.image)
    return replace(doc, image_path=path, image=None)


def synth_corpus(cfg: SynthConfig, count: int, out_dir, name: str = "synth", split: str = "all",
                 start: int = 0, jobs: int = 1) -> DatasetManifest:
    """Render pages ``start .. start+count-1`` as PNGs plus ``manifest.json`` under ``out_dir``."""
    out_dir = os.path.abspath(os.fspath(out_dir))
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    tasks = [(cfg, start + i, image_dir) for i in range(count)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            docs = list(pool.map(_write_page, tasks))
    else:
        docs = [_write_page(t) for t in tasks]
    manifest = DatasetManifest(name, DEFAULT_LABELS, split, docs, out_dir)
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest
