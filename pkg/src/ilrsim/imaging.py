"""Raster images, file I/O, geometric/photometric transforms, and masks.

The Raster is the substrate for the whole toolkit: an 8-bit RGB image with
an explicit physical scale (pixels per centimeter) so trace diameters in
centimeters map onto pixel disks. All operations are pure functions; a
Raster is immutable after construction.

Conventions used throughout the package:
  - pixel (x, y) has its center at coordinate (x, y); x runs along width
  - 8-bit quantization always rounds half-up, then clamps to [0, 255]
  - bilinear resampling is pixel-center aligned; out-of-bounds samples
    replicate the nearest edge pixel
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


DEFAULT_SCALE_PX_PER_CM = 4.0


class ImagingError(Exception):
    """Raised for unreadable files, unsupported formats, shape mismatches."""


def quantize_u8(values: np.ndarray) -> np.ndarray:
    """Round half-up and clamp to the 8-bit range."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Raster:
    """8-bit RGB image with a pixels-per-centimeter scale.

    `pixels` is an (H, W, 3) uint8 array, frozen read-only so instances can
    be shared freely across threads.
    """

    pixels: np.ndarray
    scale: float = DEFAULT_SCALE_PX_PER_CM

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImagingError(f"expected (H, W, 3) pixel array, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ImagingError(f"expected uint8 pixels, got {px.dtype}")
        if not self.scale > 0:
            raise ImagingError(f"scale must be positive, got {self.scale}")
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def as_float(self) -> np.ndarray:
        """Pixels as float64, for arithmetic."""
        return self.pixels.astype(np.float64)

    def with_pixels(self, pixels: np.ndarray) -> "Raster":
        return Raster(pixels=pixels, scale=self.scale)


@dataclass(frozen=True)
class AffinePhotometricTransform:
    """Geometric (rotate/shear/scale/translate) plus photometric (brightness,
    additive Gaussian noise) perturbation, as sampled for robustness
    averaging during attack optimization."""

    rotation_deg: float = 0.0
    shear: float = 0.0
    scale_xy: tuple[float, float] = (1.0, 1.0)
    translation: tuple[float, float] = (0.0, 0.0)
    brightness: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.brightness > 0:
            raise ImagingError(f"brightness must be positive, got {self.brightness}")
        if self.noise_sigma < 0:
            raise ImagingError(f"noise_sigma must be non-negative, got {self.noise_sigma}")

    def is_identity_geometry(self) -> bool:
        return (
            self.rotation_deg == 0.0
            and self.shear == 0.0
            and self.scale_xy == (1.0, 1.0)
            and self.translation == (0.0, 0.0)
        )


def _meta_path(path: str) -> str:
    return path + ".meta"


def save_image(img: Raster, path: str) -> None:
    """Write a Raster as PNG or binary PPM (by extension), plus a sidecar
    `<path>.meta` carrying the physical scale.

    load_image inverts this bit-exactly.
    """
    ext = os.path.splitext(path)[1].lower()
    pil = Image.fromarray(img.pixels, mode="RGB")
    try:
        if ext == ".ppm":
            pil.save(path, format="PPM")
        elif ext == ".png":
            pil.save(path, format="PNG")
        else:
            raise ImagingError(f"unsupported image extension {ext!r} (use .png or .ppm)")
        with open(_meta_path(path), "w") as fh:
            fh.write(f"px_per_cm={img.scale!r}\n")
    except OSError as exc:
        raise ImagingError(f"cannot write {path}: {exc}") from exc


def load_image(path: str) -> Raster:
    """Read a PNG or binary PPM into a Raster, bit-exactly.

    Scale comes from the `<path>.meta` sidecar when present, else the
    package default.
    """
    try:
        with Image.open(path) as pil:
            if pil.format not in ("PNG", "PPM"):
                raise ImagingError(f"unsupported format {pil.format!r} for {path}")
            if pil.mode != "RGB":
                raise ImagingError(f"expected RGB content, got mode {pil.mode!r} in {path}")
            pixels = np.asarray(pil, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise ImagingError(f"no such image: {path}") from exc
    except OSError as exc:
        raise ImagingError(f"unreadable image {path}: {exc}") from exc

    scale = DEFAULT_SCALE_PX_PER_CM
    meta = _meta_path(path)
    if os.path.exists(meta):
        with open(meta) as fh:
            for line in fh:
                line = line.strip()
                if line.startswith("px_per_cm="):
                    scale = float(line.split("=", 1)[1])
    return Raster(pixels=pixels, scale=scale)


def bilinear_sample(channels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) float array at fractional (xs, ys), edge-replicated.

    Returns an array shaped like xs with a trailing C axis.
    """
    h, w = channels.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = channels[y0, x0] * (1.0 - fx) + channels[y0, x1] * fx
    bot = channels[y1, x0] * (1.0 - fx) + channels[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def resize_bilinear(pixels: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resize of an (H, W, C) float array."""
    h, w = pixels.shape[:2]
    sx = w / out_w
    sy = h / out_h
    xs = (np.arange(out_w) + 0.5) * sx - 0.5
    ys = (np.arange(out_h) + 0.5) * sy - 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    return bilinear_sample(np.asarray(pixels, dtype=np.float64), grid_x, grid_y)


def _geometry_matrix(t: AffinePhotometricTransform, cx: float, cy: float) -> np.ndarray:
    """Forward 3x3 matrix: translate * rotate * shear * scale, about (cx, cy)."""
    theta = np.deg2rad(t.rotation_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rot = np.array([[cos_t, -sin_t, 0.0], [sin_t, cos_t, 0.0], [0.0, 0.0, 1.0]])
    shear = np.array([[1.0, t.shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    scale = np.array([[t.scale_xy[0], 0.0, 0.0], [0.0, t.scale_xy[1], 0.0], [0.0, 0.0, 1.0]])
    to_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    from_center = np.array(
        [[1.0, 0.0, cx + t.translation[0]], [0.0, 1.0, cy + t.translation[1]], [0.0, 0.0, 1.0]]
    )
    return from_center @ rot @ shear @ scale @ to_center


def apply_transform(img: Raster, t: AffinePhotometricTransform, rng_seed: int) -> Raster:
    """Apply the geometric part (bilinear, edge-replicated) then brightness
    and seeded Gaussian noise, clamped to 8-bit. Total function: identity
    parameters with zero noise return the input bit-exactly."""
    src = img.as_float()
    if t.is_identity_geometry():
        warped = src
    else:
        h, w = src.shape[:2]
        fwd = _geometry_matrix(t, (w - 1) / 2.0, (h - 1) / 2.0)
        inv = np.linalg.inv(fwd)
        xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
        src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
        warped = bilinear_sample(src, src_x, src_y)

    out = warped * t.brightness
    if t.noise_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        out = out + rng.normal(0.0, t.noise_sigma, size=out.shape)
    elif t.brightness == 1.0 and warped is src:
        return img
    return img.with_pixels(quantize_u8(out))


def average_frames(frames: list[Raster] | tuple[Raster, ...]) -> Raster:
    """Per-pixel arithmetic mean of same-sized frames, rounded half-up."""
    mean = average_frames_float(frames)
    return frames[0].with_pixels(quantize_u8(mean))


def average_frames_float(frames: list[Raster] | tuple[Raster, ...]) -> np.ndarray:
    """Unquantized per-pixel mean, used where downstream math needs reals."""
    if len(frames) == 0:
        raise ImagingError("cannot average an empty frame sequence")
    shape = frames[0].pixels.shape
    for f in frames[1:]:
        if f.pixels.shape != shape:
            raise ImagingError(f"frame dimension mismatch: {f.pixels.shape} vs {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for f in frames:
        acc += f.as_float()
    return acc / len(frames)


def circular_mask(
    center: tuple[float, float],
    diameter_cm: float,
    scale: float,
    bounds: tuple[int, int],
) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose centers lie within the disk of
    the given physical diameter; clipped at image bounds."""
    if not diameter_cm > 0:
        raise ImagingError(f"diameter must be positive, got {diameter_cm}")
    w, h = bounds
    radius = diameter_cm * scale / 2.0
    xs = np.arange(w, dtype=np.float64) - center[0]
    ys = np.arange(h, dtype=np.float64) - center[1]
    dist2 = ys[:, None] ** 2 + xs[None, :] ** 2
    return dist2 <= radius * radius


def gaussian_kernel_1d(sigma: float, radius: int) -> np.ndarray:
    """Normalized 1-D Gaussian kernel of length 2*radius+1."""
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(channels: np.ndarray, sigma: float, radius: int | None = None) -> np.ndarray:
    """Separable Gaussian blur of an (H, W) or (H, W, C) float array with
    edge replication. The kernel is normalized, so constant inputs are
    fixed points."""
    if radius is None:
        radius = max(1, int(np.ceil(3.0 * sigma)))
    kernel = gaussian_kernel_1d(sigma, radius)
    arr = np.asarray(channels, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    padded = np.pad(arr, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(arr)
    for i, kv in enumerate(kernel):
        out += kv * padded[i : i + arr.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(arr)
    for i, kv in enumerate(kernel):
        out += kv * padded[:, i : i + arr.shape[1]]
    return out[..., 0] if squeeze else out
