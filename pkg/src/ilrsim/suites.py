"""Synthetic evaluation suites for the defenses.

Builders here produce the labeled image sets the defense metrics run on:
benign renders across all sign classes, plus attacked renders whose
speckle color matches the detector mode under test. The speckle generator
and the detector share nothing but the false-color range itself; texture
statistics come from the generator's exponential-gain model.

Day-mode attacks target the amber school-zone plate and night-mode attacks
the red stop sign: with non-negative, blue-heavy intensity offsets these
are the surfaces whose attacked pixels actually land in the respective
false-color windows, mirroring how perceived speckle color follows the
sign surface and ambient light.
"""

from __future__ import annotations

import numpy as np

from .corpus import DEFAULT_CLASS_LIST, DEFAULT_SIGN_SPECS, render_sign
from .imaging import Raster
from .optimize import FeasibleRegion
from .oracle import crop_roi, RoiNoise
from .physics import IntensityModel
from .trace import apply_trace, synthesize_speckle


DAY_SUITE = {
    "label": "schoolZone",
    "ambient_lux": 160.0,
    "power_range": (45.0, 60.0),
    "diameter_range": (18.0, 26.0),
}
NIGHT_SUITE = {
    "label": "stop",
    "ambient_lux": 50.0,
    "power_range": (60.0, 80.0),
    "diameter_range": (20.0, 26.0),
}


def build_detection_suite(
    mode: str,
    model: IntensityModel,
    seed: int = 0,
    count: int = 75,
    scale: float = 4.0,
):
    """(benign, attacked) lists of (image, roi) pairs for one mode."""
    cfg = DAY_SUITE if mode == "day" else NIGHT_SUITE
    rng = np.random.default_rng(seed)

    benign = []
    for i in range(count):
        label = DEFAULT_CLASS_LIST[i % len(DEFAULT_CLASS_LIST)]
        img, _, roi = render_sign(
            DEFAULT_SIGN_SPECS[label], scale=scale, jitter_seed=int(rng.integers(0, 2**63 - 1))
        )
        benign.append((img, roi))

    spec = DEFAULT_SIGN_SPECS[cfg["label"]]
    attacked = []
    for i in range(count):
        img, poly, roi = render_sign(
            spec, scale=scale, jitter_seed=int(rng.integers(0, 2**63 - 1))
        )
        region = FeasibleRegion(poly, scale)
        power = float(rng.uniform(*cfg["power_range"]))
        diameter = float(rng.uniform(*cfg["diameter_range"]))
        d_max = region.max_diameter_cm()
        diameter = min(diameter, 0.95 * d_max)
        center = region.sample_uniform(diameter, rng)
        t = synthesize_speckle(
            model,
            power,
            diameter,
            cfg["ambient_lux"],
            base_color=spec.base_color,
            scale=scale,
            rng_seed=int(rng.integers(0, 2**63 - 1)),
        )
        attacked.append((apply_trace(img, t, center), roi))
    return benign, attacked


def build_certification_dataset(
    manifest,
    corpus_dir: str,
    model: IntensityModel,
    seed: int = 0,
    per_class: int = 6,
    attacked_per_class: int = 4,
    scale: float = 4.0,
):
    """Classifier-input-sized dataset for the masking certifier: benign ROI
    crops plus attacked crops carrying a strong wide speckle.

    Returns a list of (image, true label) pairs.
    """
    import os

    from .imaging import load_image

    rng = np.random.default_rng(seed)
    dataset = []
    for label in manifest.class_list:
        entries = manifest.by_label(label)[:per_class]
        for j, e in enumerate(entries):
            img = load_image(os.path.join(corpus_dir, e.path))
            dataset.append((crop_roi(img, e.roi, RoiNoise(0.0), rng_seed=0), label))
            if j >= attacked_per_class:
                continue
            region = FeasibleRegion(e.polygon, scale)
            d_max = region.max_diameter_cm()
            diameter = min(22.0, 0.9 * d_max)
            center = region.sample_uniform(diameter, rng)
            spec = DEFAULT_SIGN_SPECS[label]
            t = synthesize_speckle(
                model,
                75.0,
                diameter,
                100.0,
                base_color=spec.base_color,
                scale=scale,
                rng_seed=int(rng.integers(0, 2**63 - 1)),
            )
            attacked = apply_trace(img, t, center)
            dataset.append((crop_roi(attacked, e.roi, RoiNoise(0.0), rng_seed=0), label))
    return dataset
