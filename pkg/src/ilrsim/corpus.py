"""Procedural synthetic traffic-sign corpus.

Renders jittered sign images with annotated polygons and ROI boxes, writes
a JSON manifest, and trains the built-in classifier on the result. Renders
are hard-edged (no antialiasing in shape or glyph rasterization) and fully
seeded, so corpora are byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import classifier
from .font5x7 import GLYPH_GAP, GLYPH_H, GLYPH_W, scaled_text_bitmap
from .imaging import AffinePhotometricTransform, Raster, _geometry_matrix, save_image

DEFAULT_CLASS_LIST = [
    "stop",
    "yield",
    "speedLimit25",
    "speedLimit35",
    "speedLimit55",
    "speedLimit85",
    "doNotEnter",
    "schoolZone",
]

_RECT_ASPECT = 76.0 / 61.0  # regulatory plate height/width

DEFAULT_BACKGROUND = (96, 108, 120)


class CorpusError(Exception):
    pass


@dataclass(frozen=True)
class SignSpec:
    label: str
    shape: str  # octagon | rectangle | triangle | circle
    base_color: tuple[int, int, int]
    border_color: tuple[int, int, int]
    glyph_rows: tuple[str, ...]
    physical_width_cm: float

    def __post_init__(self):
        if self.shape not in ("octagon", "rectangle", "triangle", "circle"):
            raise CorpusError(f"unknown shape {self.shape!r}")
        if not self.physical_width_cm > 0:
            raise CorpusError("physical width must be positive")


DEFAULT_SIGN_SPECS = {
    "stop": SignSpec("stop", "octagon", (178, 34, 52), (240, 240, 240), ("STOP",), 75.0),
    "yield": SignSpec("yield", "triangle", (245, 245, 245), (200, 30, 45), ("YIELD",), 75.0),
    "speedLimit25": SignSpec(
        "speedLimit25", "rectangle", (245, 245, 245), (20, 20, 20), ("SPEED", "LIMIT", "25"), 61.0
    ),
    "speedLimit35": SignSpec(
        "speedLimit35", "rectangle", (245, 245, 245), (20, 20, 20), ("SPEED", "LIMIT", "35"), 61.0
    ),
    "speedLimit55": SignSpec(
        "speedLimit55", "rectangle", (245, 245, 245), (20, 20, 20), ("SPEED", "LIMIT", "55"), 61.0
    ),
    "speedLimit85": SignSpec(
        "speedLimit85", "rectangle", (245, 245, 245), (20, 20, 20), ("SPEED", "LIMIT", "85"), 61.0
    ),
    "doNotEnter": SignSpec(
        "doNotEnter", "circle", (200, 30, 45), (240, 240, 240), ("DO NOT", "ENTER"), 75.0
    ),
    "schoolZone": SignSpec(
        "schoolZone", "rectangle", (205, 75, 25), (15, 15, 15), ("SCHOOL", "ZONE"), 75.0
    ),
}


def _shape_vertices(shape: str, cx: float, cy: float, w: float, h: float) -> np.ndarray:
    """Convex outline vertices, counterclockwise in image coordinates."""
    if shape == "octagon":
        r = w / 2.0
        angles = np.deg2rad(22.5 + 45.0 * np.arange(8))
        rad = r / np.cos(np.deg2rad(22.5))  # circumradius for flat-top octagon
        return np.stack([cx + rad * np.cos(angles), cy + rad * np.sin(angles)], axis=1)
    if shape == "rectangle":
        return np.array(
            [
                [cx - w / 2, cy - h / 2],
                [cx - w / 2, cy + h / 2],
                [cx + w / 2, cy + h / 2],
                [cx + w / 2, cy - h / 2],
            ]
        )
    if shape == "triangle":  # point-down
        return np.array([[cx - w / 2, cy - h / 2], [cx, cy + h / 2], [cx + w / 2, cy - h / 2]])
    if shape == "circle":
        angles = np.deg2rad(np.arange(0, 360, 15.0))
        return np.stack(
            [cx + (w / 2) * np.cos(angles), cy + (h / 2) * np.sin(angles)], axis=1
        )
    raise CorpusError(f"unknown shape {shape!r}")


def _fill_convex(canvas: np.ndarray, verts: np.ndarray, color, inset: float = 0.0) -> np.ndarray:
    """Boolean mask of pixels at least `inset` inside the convex outline;
    paints `color` onto canvas where true."""
    h, w = canvas.shape[:2]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    inside = np.ones((h, w), dtype=bool)
    n = len(verts)
    # Signed area decides orientation so the inward normal is consistent.
    area = 0.0
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    sign = 1.0 if area > 0 else -1.0
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        ex, ey = x1 - x0, y1 - y0
        norm = np.hypot(ex, ey)
        # inward normal (depends on orientation)
        nx, ny = -ey / norm * sign, ex / norm * sign
        inside &= (xs - x0) * nx + (ys - y0) * ny >= inset
    if color is not None:
        canvas[inside] = color
    return inside


def render_sign(
    spec: SignSpec,
    scale: float = 4.0,
    background: tuple[int, int, int] = DEFAULT_BACKGROUND,
    jitter_seed: int = 0,
    jitter_rotation_deg: float = 3.0,
    jitter_scale: float = 0.05,
) -> tuple[Raster, np.ndarray, tuple[int, int, int, int]]:
    """Render one sign; returns (image, sign polygon, ROI box).

    The ROI box is the padded bounding box of the (jittered) polygon,
    clipped to the canvas, given as (x0, y0, x1, y1) exclusive of x1/y1.
    """
    rng = np.random.default_rng(jitter_seed)
    sign_w = spec.physical_width_cm * scale
    sign_h = sign_w * (_RECT_ASPECT if spec.shape == "rectangle" else 1.0)
    margin = 0.22
    cw = int(round(sign_w * (1 + 2 * margin)))
    ch = int(round(sign_h * (1 + 2 * margin)))
    cx, cy = (cw - 1) / 2.0, (ch - 1) / 2.0

    bg_jitter = rng.integers(-12, 13, size=3)
    bg = np.clip(np.asarray(background, dtype=np.int64) + bg_jitter, 0, 255).astype(np.uint8)
    canvas = np.empty((ch, cw, 3), dtype=np.uint8)
    canvas[:] = bg

    verts = _shape_vertices(spec.shape, cx, cy, sign_w, sign_h)
    border_px = max(2.0, 0.045 * sign_w)
    _fill_convex(canvas, verts, np.asarray(spec.border_color, dtype=np.uint8))
    inner = _fill_convex(canvas, verts, np.asarray(spec.base_color, dtype=np.uint8), inset=border_px)

    # Glyph block: centered in the inner region's bounding box. The yield
    # triangle narrows downward, so its text sits higher and smaller.
    if spec.glyph_rows:
        ys, xs = np.nonzero(inner)
        in_w = xs.max() - xs.min() + 1
        in_h = ys.max() - ys.min() + 1
        longest = max(len(row) for row in spec.glyph_rows)
        cell_w = longest * (GLYPH_W + GLYPH_GAP) - GLYPH_GAP
        rows_n = len(spec.glyph_rows)
        cell_h = rows_n * GLYPH_H + (rows_n - 1) * 2
        factor = 0.34 if spec.shape == "triangle" else 0.72
        px = max(1, int(min(factor * in_w / cell_w, factor * in_h / cell_h)))
        block_h = rows_n * GLYPH_H * px + (rows_n - 1) * 2 * px
        block_cy = cy - sign_h / 6.0 if spec.shape == "triangle" else cy
        y0 = int(round(block_cy - block_h / 2.0))
        color = np.asarray(spec.border_color, dtype=np.uint8)
        for r, text in enumerate(spec.glyph_rows):
            bm = scaled_text_bitmap(text, px)
            gx0 = int(round(cx - bm.shape[1] / 2.0))
            gy0 = y0 + r * (GLYPH_H + 2) * px
            sub = canvas[gy0 : gy0 + bm.shape[0], gx0 : gx0 + bm.shape[1]]
            sub[bm[: sub.shape[0], : sub.shape[1]]] = color

    rot = float(rng.uniform(-jitter_rotation_deg, jitter_rotation_deg))
    sc = float(rng.uniform(1 - jitter_scale, 1 + jitter_scale))
    t = AffinePhotometricTransform(rotation_deg=rot, scale_xy=(sc, sc))
    img = Raster(pixels=canvas, scale=scale)
    if rot != 0.0 or sc != 1.0:
        from .imaging import apply_transform

        img = apply_transform(img, t, rng_seed=0)
        fwd = _geometry_matrix(t, cx, cy)
        ones = np.ones((len(verts), 1))
        verts = (np.hstack([verts, ones]) @ fwd.T)[:, :2]

    pad = 6
    x0 = max(0, int(np.floor(verts[:, 0].min())) - pad)
    y0 = max(0, int(np.floor(verts[:, 1].min())) - pad)
    x1 = min(cw, int(np.ceil(verts[:, 0].max())) + pad)
    y1 = min(ch, int(np.ceil(verts[:, 1].max())) + pad)
    return img, verts, (x0, y0, x1, y1)


@dataclass
class CorpusEntry:
    path: str
    label: str
    polygon: np.ndarray
    roi: tuple[int, int, int, int]


@dataclass
class CorpusManifest:
    entries: list[CorpusEntry]
    class_list: list[str]
    render_seed: int
    scale: float = 4.0

    def by_label(self, label: str) -> list[CorpusEntry]:
        return [e for e in self.entries if e.label == label]


def build_corpus(
    class_list: list[str] | None = None,
    per_class: int = 50,
    seed: int = 0,
    out_dir: str = "corpus",
    scale: float = 4.0,
) -> CorpusManifest:
    """Render `per_class` jittered images per class and write a manifest."""
    if per_class < 1:
        raise CorpusError("per_class must be >= 1")
    class_list = list(class_list or DEFAULT_CLASS_LIST)
    os.makedirs(out_dir, exist_ok=True)
    class_seeds = np.random.SeedSequence(seed).spawn(len(class_list))
    entries: list[CorpusEntry] = []
    for ci, label in enumerate(class_list):
        spec = DEFAULT_SIGN_SPECS.get(label)
        if spec is None:
            raise CorpusError(f"no sign spec for class {label!r}")
        child_seeds = class_seeds[ci].generate_state(per_class)
        for i in range(per_class):
            img, poly, roi = render_sign(spec, scale=scale, jitter_seed=int(child_seeds[i]))
            name = f"{label}_{i:04d}.png"
            path = os.path.join(out_dir, name)
            save_image(img, path)
            entries.append(CorpusEntry(path=name, label=label, polygon=poly, roi=roi))
    manifest = CorpusManifest(entries=entries, class_list=class_list, render_seed=seed, scale=scale)
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def save_manifest(manifest: CorpusManifest, path: str) -> None:
    payload = {
        "class_list": manifest.class_list,
        "render_seed": manifest.render_seed,
        "scale": manifest.scale,
        "entries": [
            {
                "path": e.path,
                "label": e.label,
                "polygon": [[float(x), float(y)] for x, y in e.polygon],
                "roi": list(e.roi),
            }
            for e in manifest.entries
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def load_manifest(path: str) -> CorpusManifest:
    with open(path) as fh:
        payload = json.load(fh)
    entries = [
        CorpusEntry(
            path=e["path"],
            label=e["label"],
            polygon=np.asarray(e["polygon"], dtype=np.float64),
            roi=tuple(e["roi"]),
        )
        for e in payload["entries"]
    ]
    return CorpusManifest(
        entries=entries,
        class_list=payload["class_list"],
        render_seed=payload["render_seed"],
        scale=payload.get("scale", 4.0),
    )


def manifest_hash(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def train_builtin_classifier(
    manifest: CorpusManifest, corpus_dir: str, seed: int = 0
) -> tuple[classifier.ClassifierParams, float]:
    """Train the bundled classifier on ROI crops of the corpus.

    Returns (params, training accuracy). Deterministic given the corpus
    and seed.
    """
    from .imaging import load_image
    from .oracle import crop_roi, RoiNoise

    if len(manifest.class_list) < 2:
        raise CorpusError("need at least two classes")
    feats = []
    label_idx = []
    lookup = {lbl: i for i, lbl in enumerate(manifest.class_list)}
    for e in manifest.entries:
        img = load_image(os.path.join(corpus_dir, e.path))
        inp = crop_roi(img, e.roi, RoiNoise(0.0), rng_seed=0)
        feats.append(classifier.features_from_input(inp))
        label_idx.append(lookup[e.label])
    feats = np.asarray(feats)
    label_idx = np.asarray(label_idx)
    return classifier.train(feats, label_idx, tuple(manifest.class_list), seed=seed)
