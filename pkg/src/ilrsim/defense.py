"""Defenses: a two-round masking certifier and a color-frequency speckle
detector.

The certifier classifies an image under single and paired occluding masks
and only certifies a label under unanimous agreement; its four evaluation
metrics quantify how often that agreement is reached, and how often it is
reached on the wrong label. The detector gates flat false-color regions by
high spatial frequency content.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
import math

import numpy as np

from . import classifier
from .imaging import Raster, gaussian_blur, quantize_u8


class DefenseError(Exception):
    pass


MASK_GRID = 6
MASK_FILL = 128


@dataclass(frozen=True)
class MaskSet:
    """Rectangular occlusion masks over the classifier input grid, sized so
    every possible square patch of the estimated size is fully contained in
    at least one mask."""

    masks: tuple[tuple[int, int, int, int], ...]  # (x0, y0, x1, y1), exclusive ends
    grid: tuple[int, int]
    mask_size_px: tuple[int, int]
    stride_px: tuple[int, int]
    est_patch_px: int


def _axis_layout(dim: int, patch: int) -> tuple[int, int, list[int]]:
    """Mask extent, stride, and start positions along one axis.

    The extent guarantees the k-window covering of all dim-patch+1 patch
    positions: size = ceil((dim - patch + 1)/k) + patch - 1.
    """
    size = math.ceil((dim - patch + 1) / MASK_GRID) + patch - 1
    if size > dim:
        raise DefenseError(f"patch {patch} px too large to cover a {dim} px axis")
    span = dim - size
    stride = math.ceil(span / (MASK_GRID - 1)) if span else 0
    starts = [min(i * stride, span) for i in range(MASK_GRID)]
    return size, stride, starts


def build_mask_set(input_px: tuple[int, int], est_patch_px: int) -> MaskSet:
    w, h = input_px
    if est_patch_px >= min(w, h):
        raise DefenseError(f"estimated patch {est_patch_px} px exceeds input {input_px}")
    size_x, stride_x, xs = _axis_layout(w, est_patch_px)
    size_y, stride_y, ys = _axis_layout(h, est_patch_px)
    masks = tuple(
        (x, y, x + size_x, y + size_y) for y in ys for x in xs
    )
    return MaskSet(
        masks=masks,
        grid=(MASK_GRID, MASK_GRID),
        mask_size_px=(size_x, size_y),
        stride_px=(stride_x, stride_y),
        est_patch_px=est_patch_px,
    )


def verify_covering(ms: MaskSet, input_px: tuple[int, int]) -> bool:
    """Exhaustive check: every est_patch square position is fully inside at
    least one mask."""
    w, h = input_px
    p = ms.est_patch_px
    for py in range(h - p + 1):
        for px in range(w - p + 1):
            ok = any(
                x0 <= px and y0 <= py and px + p <= x1 and py + p <= y1
                for x0, y0, x1, y1 in ms.masks
            )
            if not ok:
                return False
    return True


@dataclass(frozen=True)
class CertResult:
    output_label: str
    certified: bool


def _apply_masks(pixels: np.ndarray, boxes) -> np.ndarray:
    out = pixels.copy()
    for x0, y0, x1, y1 in boxes:
        out[y0:y1, x0:x1, :] = MASK_FILL
    return out


class _MaskedClassifier:
    """Classifies masked variants, batching when the oracle supports it."""

    def __init__(self, img: Raster, oracle):
        if (img.height, img.width) != (classifier.INPUT_PX, classifier.INPUT_PX):
            raise DefenseError("certifier input must be at classifier input size")
        self.pixels = img.pixels
        self.scale = img.scale
        self.oracle = oracle
        self.batched = hasattr(oracle, "classify_batch")
        self.labels = tuple(oracle.labels)

    def predict(self, mask_groups: list[tuple]) -> list[str]:
        if self.batched:
            batch = np.stack(
                [_apply_masks(self.pixels, boxes).astype(np.float64) for boxes in mask_groups]
            )
            scores = self.oracle.classify_batch(batch)
            out = []
            for row in scores:
                best = row.max()
                out.append(min(l for l, s in zip(self.labels, row) if s == best))
            return out
        preds = []
        for boxes in mask_groups:
            masked = Raster(pixels=_apply_masks(self.pixels, boxes), scale=self.scale)
            preds.append(self.oracle.classify(masked).top_label)
        return preds


def _majority(labels: list[str]) -> str:
    counts = Counter(labels)
    top = max(counts.values())
    return min(l for l, c in counts.items() if c == top)


def two_round_certify(img: Raster, oracle, ms: MaskSet) -> CertResult:
    """Two-round masking.

    Round 1 classifies under each single mask. Unanimity yields that label,
    certified only if every two-mask combination also agrees. On
    disagreement, each dissenting mask is paired with every mask; if all of
    its pairs agree with the dissenting label, that label wins (never
    certified); otherwise the round-1 majority is returned.
    """
    mc = _MaskedClassifier(img, oracle)
    singles = mc.predict([(m,) for m in ms.masks])
    first = singles[0]
    if all(p == first for p in singles):
        n = len(ms.masks)
        pairs = [
            (ms.masks[i], ms.masks[j]) for i in range(n) for j in range(i + 1, n)
        ]
        pair_preds = mc.predict(pairs)
        certified = all(p == first for p in pair_preds)
        return CertResult(output_label=first, certified=certified)

    majority = _majority(singles)
    for i, pred in enumerate(singles):
        if pred == majority:
            continue
        second = mc.predict([(ms.masks[i], m2) for m2 in ms.masks])
        if all(p == pred for p in second):
            return CertResult(output_label=pred, certified=False)
    return CertResult(output_label=majority, certified=False)


def certify_metrics(dataset: list[tuple[Raster, str]], oracle, ms: MaskSet) -> dict[str, float]:
    """Four dataset-level fractions: plain accuracy without the defense,
    accuracy of the certifier's output, certified-and-correct, and
    certified-but-wrong."""
    if not dataset:
        raise DefenseError("empty dataset")
    n = len(dataset)
    no_def = clean = cert_ok = cert_bad = 0
    for img, label in dataset:
        plain = oracle.classify(img).top_label
        res = two_round_certify(img, oracle, ms)
        no_def += plain == label
        clean += res.output_label == label
        if res.certified:
            if res.output_label == label:
                cert_ok += 1
            else:
                cert_bad += 1
    return {
        "no_defense_acc": no_def / n,
        "clean_acc": clean / n,
        "certified_acc": cert_ok / n,
        "miscertified_fp": cert_bad / n,
    }


def _hex_rgb(code: str) -> tuple[int, int, int]:
    code = code.lstrip("#")
    return tuple(int(code[i : i + 2], 16) for i in (0, 2, 4))


@dataclass(frozen=True)
class DetectorConfig:
    """Color-frequency detector parameters.

    Color windows are axis-aligned RGB boxes between the two endpoint
    colors, expanded by the per-channel tolerance; the defaults carry the
    daylight (orange) and low-light (purple) false-color ranges.
    """

    day_color_lo: tuple[int, int, int] = _hex_rgb("#CC6600")
    day_color_hi: tuple[int, int, int] = _hex_rgb("#FFB266")
    night_color_lo: tuple[int, int, int] = _hex_rgb("#CF9FFF")
    night_color_hi: tuple[int, int, int] = _hex_rgb("#DA70D6")
    channel_tolerance: float = 16.0
    blur_sigma: float = 2.0
    blur_radius: int = 4  # 9x9 kernel
    residual_threshold: float = 20.0
    area_threshold: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.area_threshold < 1.0:
            raise DefenseError("area threshold must be in (0, 1)")
        if not self.blur_sigma > 0:
            raise DefenseError("blur sigma must be positive")

    def color_box(self, mode: str) -> tuple[np.ndarray, np.ndarray]:
        if mode == "day":
            a, b = self.day_color_lo, self.day_color_hi
        elif mode == "night":
            a, b = self.night_color_lo, self.night_color_hi
        else:
            raise DefenseError(f"unknown detector mode {mode!r}")
        lo = np.minimum(a, b) - self.channel_tolerance
        hi = np.maximum(a, b) + self.channel_tolerance
        return lo, hi


@dataclass(frozen=True)
class DetectionResult:
    flagged: bool
    flagged_fraction: float
    flagged_mask: np.ndarray


def detect_speckle(
    img: Raster, roi: tuple[int, int, int, int], cfg: DetectorConfig, mode: str
) -> DetectionResult:
    """Flag an ROI whose false-color pixels also carry high spatial
    frequencies.

    Three stages: (1) color mask against the mode's RGB window; (2)
    high-frequency residual: max-channel |img - blur(img)| above threshold;
    (3) flagged when the conjunction covers more than the area threshold.
    """
    x0, y0, x1, y1 = roi
    if x1 <= x0 or y1 <= y0 or x0 < 0 or y0 < 0 or x1 > img.width or y1 > img.height:
        raise DefenseError(f"degenerate or out-of-bounds roi {roi}")
    region = img.as_float()[y0:y1, x0:x1]
    lo, hi = cfg.color_box(mode)
    in_color = np.all((region >= lo) & (region <= hi), axis=2)
    blurred = gaussian_blur(region, cfg.blur_sigma, radius=cfg.blur_radius)
    residual = np.abs(region - blurred).max(axis=2)
    high_freq = residual > cfg.residual_threshold
    mask = in_color & high_freq
    fraction = float(mask.sum()) / mask.size
    return DetectionResult(
        flagged=fraction > cfg.area_threshold, flagged_fraction=fraction, flagged_mask=mask
    )


def detector_metrics(
    benign: list[tuple[Raster, tuple[int, int, int, int]]],
    attacked: list[tuple[Raster, tuple[int, int, int, int]]],
    cfg: DetectorConfig,
    mode: str,
) -> dict[str, float]:
    if not benign or not attacked:
        raise DefenseError("both benign and attacked sets must be non-empty")
    tp = sum(detect_speckle(img, roi, cfg, mode).flagged for img, roi in attacked)
    fp = sum(detect_speckle(img, roi, cfg, mode).flagged for img, roi in benign)
    return {"tpr": tp / len(attacked), "fpr": fp / len(benign)}


def write_detections_csv(path: str, rows: list[tuple[str, bool, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("path,flagged,fraction\n")
        for name, flagged, fraction in rows:
            fh.write(f"{name},{int(flagged)},{fraction:.9g}\n")
