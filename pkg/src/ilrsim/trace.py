"""Speckle trace fields: extraction, color adjustment, interpolation,
synthesis, and application to base images.

A TraceField holds per-pixel signed RGB offsets over a grid, supported on a
circular region. A TraceLibrary is a (power x diameter) grid of fields from
which arbitrary intermediate settings are reconstructed: a per-pixel natural
cubic spline across the power axis, then a support-rescaled linear blend
across the diameter axis.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .imaging import Raster, average_frames_float, circular_mask, gaussian_blur, quantize_u8
from .physics import IntensityModel, intensity_offset


class TraceError(Exception):
    """Raised for shape/scale mismatches and out-of-range interpolation."""


TRACE_MAGIC = b"ILRT1"


@dataclass(frozen=True)
class TraceField:
    """Signed per-pixel RGB offsets with a circular support mask."""

    offsets: np.ndarray  # (H, W, 3) float64, zero outside support
    support: np.ndarray  # (H, W) bool
    nominal_power_mw: float
    nominal_diameter_cm: float
    base_color: tuple[float, float, float]
    scale: float

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.float64)
        sup = np.asarray(self.support, dtype=bool)
        if off.ndim != 3 or off.shape[2] != 3 or off.shape[:2] != sup.shape:
            raise TraceError(f"offset/support shape mismatch: {off.shape} vs {sup.shape}")
        off = np.where(sup[..., None], np.clip(off, -255.0, 255.0), 0.0)
        off.flags.writeable = False
        sup = sup.copy()
        sup.flags.writeable = False
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "support", sup)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.support.shape

    def support_centroid(self) -> tuple[float, float]:
        ys, xs = np.nonzero(self.support)
        if len(xs) == 0:
            raise TraceError("empty trace support")
        return float(xs.mean()), float(ys.mean())

    def is_zero(self) -> bool:
        return not np.any(self.offsets)


@dataclass
class TraceLibrary:
    """Grid of trace fields over ascending power and diameter levels.

    All entries share grid shape, scale, and base color; spline
    coefficients over the power axis are cached per diameter column.
    """

    entries: list[list[TraceField]]  # [power_index][diameter_index]
    power_levels: list[float]
    diameter_levels: list[float]
    scale: float
    base_color: tuple[float, float, float]
    ambient_lux: float = 100.0
    _power_splines: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.entries) != len(self.power_levels):
            raise TraceError("entry rows must match power levels")
        if any(len(row) != len(self.diameter_levels) for row in self.entries):
            raise TraceError("entry columns must match diameter levels")
        if any(b <= a for a, b in zip(self.power_levels, self.power_levels[1:])):
            raise TraceError("power levels must be strictly ascending")
        if any(b <= a for a, b in zip(self.diameter_levels, self.diameter_levels[1:])):
            raise TraceError("diameter levels must be strictly ascending")
        shape = self.entries[0][0].grid_shape
        for row in self.entries:
            for t in row:
                if t.grid_shape != shape:
                    raise TraceError("all library entries must share one grid shape")
                if abs(t.scale - self.scale) > 1e-9:
                    raise TraceError("all library entries must share the library scale")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.entries[0][0].grid_shape

    def power_range(self) -> tuple[float, float]:
        return self.power_levels[0], self.power_levels[-1]

    def diameter_range(self) -> tuple[float, float]:
        return self.diameter_levels[0], self.diameter_levels[-1]

    def power_column(self, diameter_index: int) -> list[TraceField]:
        return [row[diameter_index] for row in self.entries]


def extract_trace(
    benign_frames: list[Raster],
    attack_frames: list[Raster],
    center: tuple[float, float],
    diameter_cm: float,
    power_mw: float = 0.0,
) -> TraceField:
    """Frame-averaged image difference, zeroed outside the pattern disk.

    The base color is the benign mean inside the support, so color
    adjustment for other sign surfaces can be applied later.
    """
    if not benign_frames or not attack_frames:
        raise TraceError("need at least one benign and one attack frame")
    if benign_frames[0].pixels.shape != attack_frames[0].pixels.shape:
        raise TraceError("benign/attack frame dimensions differ")
    benign = average_frames_float(benign_frames)
    attack = average_frames_float(attack_frames)
    scale = benign_frames[0].scale
    h, w = benign.shape[:2]
    mask = circular_mask(center, diameter_cm, scale, (w, h))
    if not mask.any():
        raise TraceError("pattern disk lies outside the frame")
    diff = np.where(mask[..., None], attack - benign, 0.0)
    base = tuple(float(v) for v in benign[mask].mean(axis=0))
    return TraceField(
        offsets=diff,
        support=mask,
        nominal_power_mw=power_mw,
        nominal_diameter_cm=diameter_cm,
        base_color=base,
        scale=scale,
    )


def adjust_trace_color(
    t: TraceField, target_base_color: tuple[float, float, float], k: float = 0.6
) -> TraceField:
    """Transfer a trace measured on one sign surface color to another.

    Each channel shifts by k * (measured base - target base); k = 0 only
    re-labels the base color. Results clamp to the valid offset range.
    """
    shift = np.array([k * (t.base_color[c] - target_base_color[c]) for c in range(3)])
    new_off = np.where(t.support[..., None], t.offsets + shift, 0.0)
    return TraceField(
        offsets=new_off,
        support=t.support,
        nominal_power_mw=t.nominal_power_mw,
        nominal_diameter_cm=t.nominal_diameter_cm,
        base_color=tuple(float(v) for v in target_base_color),
        scale=t.scale,
    )


def natural_spline_coeffs(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Second derivatives of the natural cubic spline through (x, y).

    `y` may carry arbitrary trailing axes; the tridiagonal system is solved
    vectorized across them. Endpoints get zero second derivative.
    """
    n = len(x)
    m = np.zeros_like(y)
    if n < 3:
        return m
    h = np.diff(x)
    rhs = 6.0 * (
        (y[2:] - y[1:-1]) / _expand(h[1:], y) - (y[1:-1] - y[:-2]) / _expand(h[:-1], y)
    )
    diag = 2.0 * (h[:-1] + h[1:])
    lower = h[:-1].copy()
    upper = h[1:].copy()
    # Thomas algorithm, vectorized over the trailing axes of rhs.
    k = n - 2
    cp = np.zeros(k)
    dp = np.zeros((k,) + y.shape[1:])
    cp[0] = upper[0] / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, k):
        denom = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / denom if i < k - 1 else 0.0
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / denom
    m[k] = dp[k - 1]
    for i in range(k - 2, -1, -1):
        m[i + 1] = dp[i] - cp[i] * m[i + 2]
    return m


def _expand(arr: np.ndarray, like: np.ndarray) -> np.ndarray:
    return arr.reshape((-1,) + (1,) * (like.ndim - 1))


def natural_spline_eval(x: np.ndarray, y: np.ndarray, m: np.ndarray, xq: float) -> np.ndarray:
    """Evaluate the natural cubic spline at a query inside the knot range."""
    i = int(np.searchsorted(x, xq, side="right") - 1)
    i = min(max(i, 0), len(x) - 2)
    h = x[i + 1] - x[i]
    a = (x[i + 1] - xq) / h
    b = (xq - x[i]) / h
    return (
        a * y[i]
        + b * y[i + 1]
        + ((a**3 - a) * m[i] + (b**3 - b) * m[i + 1]) * (h * h) / 6.0
    )


def interpolate_power(lib: TraceLibrary, diameter_index: int, power_mw: float) -> TraceField:
    """Per-pixel cubic interpolation along the power axis at one diameter.

    No extrapolation: the query must lie within the collected power range.
    The support is taken from the nearest power level.
    """
    lo, hi = lib.power_range()
    if not lo <= power_mw <= hi:
        raise TraceError(f"power {power_mw} mW outside library range [{lo}, {hi}]")
    column = lib.power_column(diameter_index)
    x = np.asarray(lib.power_levels, dtype=np.float64)

    cache = lib._power_splines.get(diameter_index)
    if cache is None:
        y = np.stack([t.offsets for t in column])
        m = natural_spline_coeffs(x, y)
        cache = (y, m)
        lib._power_splines[diameter_index] = cache
    y, m = cache
    off = natural_spline_eval(x, y, m, power_mw)

    nearest = int(np.argmin(np.abs(x - power_mw)))
    support = column[nearest].support
    off = np.where(support[..., None], off, 0.0)
    return TraceField(
        offsets=off,
        support=support,
        nominal_power_mw=float(power_mw),
        nominal_diameter_cm=lib.diameter_levels[diameter_index],
        base_color=lib.base_color,
        scale=lib.scale,
    )


def _rescale_field(t: TraceField, diameter_cm: float) -> np.ndarray:
    """Resample a trace's offsets so its disk spans the requested diameter.

    Sampling is support-aware: each target pixel inside the new disk takes
    a bilinear sample normalized over in-support neighbors, so uniform
    fields stay exactly uniform out to the disk edge.
    """
    h, w = t.grid_shape
    cx, cy = t.support_centroid()
    factor = t.nominal_diameter_cm / diameter_cm
    target = circular_mask((cx, cy), diameter_cm, t.scale, (w, h))
    ys, xs = np.nonzero(target)
    sx = cx + (xs - cx) * factor
    sy = cy + (ys - cy) * factor

    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    sup = t.support.astype(np.float64)
    w00 = (1 - fx) * (1 - fy) * sup[y0, x0]
    w01 = fx * (1 - fy) * sup[y0, x1]
    w10 = (1 - fx) * fy * sup[y1, x0]
    w11 = fx * fy * sup[y1, x1]
    total = w00 + w01 + w10 + w11
    vals = (
        t.offsets[y0, x0] * w00[:, None]
        + t.offsets[y0, x1] * w01[:, None]
        + t.offsets[y1, x0] * w10[:, None]
        + t.offsets[y1, x1] * w11[:, None]
    )
    safe = total > 1e-12
    vals[safe] /= total[safe, None]
    vals[~safe] = 0.0

    out = np.zeros((h, w, 3))
    out[ys, xs] = vals
    return out


def interpolate_diameter(t_lo: TraceField, t_hi: TraceField, diameter_cm: float) -> TraceField:
    """Linear blend between two diameter levels, after rescaling both
    fields' disks to the requested diameter."""
    if abs(t_lo.scale - t_hi.scale) > 1e-9:
        raise TraceError("diameter interpolation requires matching scales")
    d_lo, d_hi = t_lo.nominal_diameter_cm, t_hi.nominal_diameter_cm
    if not d_lo <= diameter_cm <= d_hi:
        raise TraceError(f"diameter {diameter_cm} outside bracket [{d_lo}, {d_hi}]")
    if d_hi == d_lo:
        lam = 0.0
    else:
        lam = (diameter_cm - d_lo) / (d_hi - d_lo)

    lo_res = _rescale_field(t_lo, diameter_cm)
    cx, cy = t_lo.support_centroid()
    h, w = t_lo.grid_shape
    support = circular_mask((cx, cy), diameter_cm, t_lo.scale, (w, h))
    if lam == 0.0:
        off = lo_res
    elif lam == 1.0:
        off = _rescale_field(t_hi, diameter_cm)
    else:
        off = (1.0 - lam) * lo_res + lam * _rescale_field(t_hi, diameter_cm)
    off = np.where(support[..., None], off, 0.0)
    power = (1.0 - lam) * t_lo.nominal_power_mw + lam * t_hi.nominal_power_mw
    return TraceField(
        offsets=off,
        support=support,
        nominal_power_mw=power,
        nominal_diameter_cm=float(diameter_cm),
        base_color=t_lo.base_color,
        scale=t_lo.scale,
    )


def trace_at(lib: TraceLibrary, power_mw: float, diameter_cm: float) -> TraceField:
    """Reconstruct the trace for arbitrary in-range power and diameter:
    power interpolation at the two bracketing diameter levels, then the
    diameter blend."""
    d_lo, d_hi = lib.diameter_range()
    if not d_lo <= diameter_cm <= d_hi:
        raise TraceError(f"diameter {diameter_cm} outside library range [{d_lo}, {d_hi}]")
    levels = lib.diameter_levels
    hi_idx = int(np.searchsorted(levels, diameter_cm, side="left"))
    hi_idx = min(hi_idx, len(levels) - 1)
    lo_idx = hi_idx if levels[hi_idx] <= diameter_cm else max(hi_idx - 1, 0)
    t_lo = interpolate_power(lib, lo_idx, power_mw)
    if lo_idx == hi_idx:
        return interpolate_diameter(t_lo, t_lo, diameter_cm)
    t_hi = interpolate_power(lib, hi_idx, power_mw)
    return interpolate_diameter(t_lo, t_hi, diameter_cm)


def synthesize_speckle(
    m: IntensityModel,
    power_mw: float,
    diameter_cm: float,
    ambient_lux: float,
    base_color: tuple[float, float, float],
    scale: float,
    grain_px: float = 1.0,
    rng_seed: int = 0,
    grid_shape: tuple[int, int] | None = None,
) -> TraceField:
    """Generate a speckle field matching the intensity model in expectation.

    A unit-mean exponential gain field, smoothed at the grain scale and
    renormalized over the disk, multiplies the model's channel offsets.
    Deterministic for a fixed seed.
    """
    if grid_shape is None:
        n = int(np.ceil(diameter_cm * scale))
        n += (n + 1) % 2  # odd, so the disk center is a pixel
        grid_shape = (n, n)
    h, w = grid_shape
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    mask = circular_mask(center, diameter_cm, scale, (w, h))
    off = intensity_offset(m, power_mw, diameter_cm, ambient_lux)
    offsets = np.zeros((h, w, 3))
    if any(v > 0 for v in off):
        rng = np.random.default_rng(rng_seed)
        gain = rng.exponential(1.0, size=(h, w))
        gain = gaussian_blur(gain, sigma=grain_px)
        mean_in = gain[mask].mean()
        if mean_in > 0:
            gain = gain / mean_in
        offsets = np.where(mask[..., None], gain[..., None] * np.asarray(off), 0.0)
    return TraceField(
        offsets=offsets,
        support=mask,
        nominal_power_mw=power_mw,
        nominal_diameter_cm=diameter_cm,
        base_color=tuple(float(v) for v in base_color),
        scale=scale,
    )


def build_synthetic_library(
    m: IntensityModel,
    power_levels: list[float],
    diameter_levels: list[float],
    ambient_lux: float,
    base_color: tuple[float, float, float],
    scale: float,
    grain_px: float = 1.0,
    seed: int = 0,
) -> TraceLibrary:
    """Synthesize a full (power x diameter) trace library on a shared grid.

    Every (power, diameter) cell uses its own child seed; the speckle
    realization is shared along the power axis of each diameter column so
    power interpolation sees a smooth per-pixel curve.
    """
    n = int(np.ceil(max(diameter_levels) * scale))
    n += (n + 1) % 2
    grid = (n, n)
    root = np.random.SeedSequence(seed)
    col_seeds = root.spawn(len(diameter_levels))
    entries: list[list[TraceField]] = [[None] * len(diameter_levels) for _ in power_levels]
    for di, d in enumerate(diameter_levels):
        cell_seed = int(col_seeds[di].generate_state(1)[0])
        for pi, p in enumerate(power_levels):
            entries[pi][di] = synthesize_speckle(
                m, p, d, ambient_lux, base_color, scale,
                grain_px=grain_px, rng_seed=cell_seed, grid_shape=grid,
            )
    return TraceLibrary(
        entries=entries,
        power_levels=list(power_levels),
        diameter_levels=list(diameter_levels),
        scale=scale,
        base_color=tuple(float(v) for v in base_color),
        ambient_lux=ambient_lux,
    )


def rescale_to_ambient(
    t: TraceField, m: IntensityModel, library_ambient_lux: float, ambient_lux: float
) -> TraceField:
    """Rescale a trace's offsets to a different ambient-light level via the
    intensity model's per-channel ratios."""
    ref = intensity_offset(m, t.nominal_power_mw, t.nominal_diameter_cm, library_ambient_lux)
    new = intensity_offset(m, t.nominal_power_mw, t.nominal_diameter_cm, ambient_lux)
    factors = np.array([new[c] / ref[c] if ref[c] > 0 else 0.0 for c in range(3)])
    return TraceField(
        offsets=t.offsets * factors,
        support=t.support,
        nominal_power_mw=t.nominal_power_mw,
        nominal_diameter_cm=t.nominal_diameter_cm,
        base_color=t.base_color,
        scale=t.scale,
    )


def apply_trace(base: Raster, t: TraceField, center: tuple[float, float]) -> Raster:
    """Add the trace to the base image with its support centroid moved to
    `center` (integer translation), clamped to 8-bit. Pixels outside the
    translated support are untouched."""
    if abs(base.scale - t.scale) > 1e-9:
        raise TraceError(f"scale mismatch: base {base.scale} vs trace {t.scale}")
    cx, cy = t.support_centroid()
    dx = int(round(center[0] - cx))
    dy = int(round(center[1] - cy))
    th, tw = t.grid_shape
    bh, bw = base.height, base.width

    # Overlap of the translated trace grid with the image.
    x_lo = max(0, dx)
    y_lo = max(0, dy)
    x_hi = min(bw, dx + tw)
    y_hi = min(bh, dy + th)
    if x_lo >= x_hi or y_lo >= y_hi:
        raise TraceError("translated trace support lies outside the image")
    sub_sup = t.support[y_lo - dy : y_hi - dy, x_lo - dx : x_hi - dx]
    if not sub_sup.any():
        raise TraceError("translated trace support lies outside the image")

    out = base.pixels.copy()
    region = out[y_lo:y_hi, x_lo:x_hi].astype(np.float64)
    sub_off = t.offsets[y_lo - dy : y_hi - dy, x_lo - dx : x_hi - dx]
    touched = region + sub_off
    quant = quantize_u8(touched)
    out[y_lo:y_hi, x_lo:x_hi] = np.where(sub_sup[..., None], quant, out[y_lo:y_hi, x_lo:x_hi])
    return base.with_pixels(out)


def saturation_fraction(img: Raster, support: np.ndarray) -> float:
    """Fraction of support pixels with any channel saturated at 255."""
    sup = np.asarray(support, dtype=bool)
    if sup.shape != img.pixels.shape[:2]:
        raise TraceError("support mask must match image dimensions")
    count = int(sup.sum())
    if count == 0:
        raise TraceError("empty support mask")
    sat = (img.pixels == 255).any(axis=2)
    return float((sat & sup).sum()) / count


def is_saturated(img: Raster, support: np.ndarray) -> bool:
    """Saturated-speckle predicate: more than half the pattern saturates."""
    return saturation_fraction(img, support) > 0.5


def save_trace(t: TraceField, path: str) -> None:
    """Binary trace format: magic, u32 W, u32 H, f32 offsets (row-major
    RGB triples, little-endian), then u8 support mask."""
    h, w = t.grid_shape
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(t.offsets.astype("<f4").tobytes(order="C"))
        fh.write(t.support.astype(np.uint8).tobytes(order="C"))


def load_trace(
    path: str,
    nominal_power_mw: float,
    nominal_diameter_cm: float,
    base_color: tuple[float, float, float],
    scale: float,
) -> TraceField:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != TRACE_MAGIC:
            raise TraceError(f"bad trace magic in {path}: {magic!r}")
        w, h = struct.unpack("<II", fh.read(8))
        off = np.frombuffer(fh.read(w * h * 3 * 4), dtype="<f4").reshape(h, w, 3)
        sup = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w).astype(bool)
    return TraceField(
        offsets=off.astype(np.float64),
        support=sup,
        nominal_power_mw=nominal_power_mw,
        nominal_diameter_cm=nominal_diameter_cm,
        base_color=base_color,
        scale=scale,
    )


def save_library(lib: TraceLibrary, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "power_levels": lib.power_levels,
        "diameter_levels": lib.diameter_levels,
        "scale": lib.scale,
        "base_color": list(lib.base_color),
        "ambient_lux": lib.ambient_lux,
        "entries": [],
    }
    for pi, row in enumerate(lib.entries):
        names = []
        for di, t in enumerate(row):
            name = f"trace_p{pi}_d{di}.ilrt"
            save_trace(t, os.path.join(directory, name))
            names.append(name)
        manifest["entries"].append(names)
    with open(os.path.join(directory, "library.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_library(directory: str) -> TraceLibrary:
    with open(os.path.join(directory, "library.json")) as fh:
        manifest = json.load(fh)
    base_color = tuple(manifest["base_color"])
    scale = manifest["scale"]
    entries = []
    for pi, names in enumerate(manifest["entries"]):
        row = []
        for di, name in enumerate(names):
            row.append(
                load_trace(
                    os.path.join(directory, name),
                    nominal_power_mw=manifest["power_levels"][pi],
                    nominal_diameter_cm=manifest["diameter_levels"][di],
                    base_color=base_color,
                    scale=scale,
                )
            )
        entries.append(row)
    return TraceLibrary(
        entries=entries,
        power_levels=manifest["power_levels"],
        diameter_levels=manifest["diameter_levels"],
        scale=scale,
        base_color=base_color,
        ambient_lux=manifest.get("ambient_lux", 100.0),
    )
