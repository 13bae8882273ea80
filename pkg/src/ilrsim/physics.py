"""Laser physics and the empirical channel-wise intensity-offset model.

Two closed-form pieces (beam power delivered to the sign surface, and the
eye-safety exposure limit) plus the calibrated model that maps laser power,
pattern diameter, and ambient light to per-channel 8-bit intensity offsets
in the camera image. The offset model is what the trace synthesizer and the
ambient-light rescaling in the evaluator consume.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class PhysicsError(Exception):
    """Raised for out-of-range inputs or degenerate calibration fits."""


# Aperture diameter of the emitter assembly, cm. Used as the reference
# pattern size in safety reports.
DEFAULT_EMITTER_APERTURE_CM = 1.0

MPE_WAVELENGTH_MIN_NM = 700.0
MPE_WAVELENGTH_MAX_NM = 1050.0
# Long-exposure IR exposure limit at the 780 nm anchor, mW/cm^2.
_MPE_ANCHOR_NM = 780.0
_MPE_ANCHOR_MW_CM2 = 0.33


@dataclass(frozen=True)
class BeamGeometry:
    """Emitter configuration: power, divergence, stand-off distance, wavelength."""

    power_mw: float
    divergence_deg: float = 0.75
    distance_m: float = 3.0
    wavelength_nm: float = 780.0

    def __post_init__(self):
        if self.power_mw < 0:
            raise PhysicsError(f"power must be non-negative, got {self.power_mw}")
        if not 0 < self.divergence_deg < 90:
            raise PhysicsError(f"divergence must be in (0, 90) deg, got {self.divergence_deg}")
        if not self.distance_m > 0:
            raise PhysicsError(f"distance must be positive, got {self.distance_m}")
        if not 380 <= self.wavelength_nm <= 1100:
            raise PhysicsError(f"wavelength out of sensor band: {self.wavelength_nm} nm")


def beam_power_at_sign(g: BeamGeometry) -> float:
    """Optical power reaching the sign surface, mW.

    Inverse-square spreading of the source against the divergence-grown
    beam cross-section; the stand-off distance cancels, leaving
    P * tan^2(theta) / (4*pi).
    """
    return g.power_mw * math.tan(math.radians(g.divergence_deg)) ** 2 / (4.0 * math.pi)


def mpe(wavelength_nm: float) -> float:
    """Maximum permissible exposure for long (>10 s) continuous viewing,
    mW/cm^2, valid for 700-1050 nm.

    Rises two decades per micrometer of wavelength; anchored at
    0.33 mW/cm^2 for 780 nm.
    """
    if not MPE_WAVELENGTH_MIN_NM <= wavelength_nm <= MPE_WAVELENGTH_MAX_NM:
        raise PhysicsError(
            f"MPE formula valid for {MPE_WAVELENGTH_MIN_NM:.0f}-{MPE_WAVELENGTH_MAX_NM:.0f} nm, "
            f"got {wavelength_nm} nm"
        )
    return _MPE_ANCHOR_MW_CM2 * 10.0 ** (2.0 * (wavelength_nm - _MPE_ANCHOR_NM) / 1000.0)


@dataclass(frozen=True)
class SafetyReport:
    irradiance_mw_cm2: float
    mpe_mw_cm2: float
    mpe_ratio: float
    min_safe_diameter_cm: float


def safety_check(
    power_mw: float, pattern_diameter_cm: float, wavelength_nm: float = 780.0
) -> SafetyReport:
    """Exposure report for a circular pattern of the given diameter.

    The min-safe diameter follows the diverging-beam hazard model, under
    which eye exposure falls with the fourth power of pattern diameter
    (beam-area dilution compounded by divergence-induced attenuation), so
    the diameter scale that brings the exposure ratio to 1 is ratio^(1/4).
    """
    if power_mw <= 0 or pattern_diameter_cm <= 0:
        raise PhysicsError("power and diameter must be positive")
    limit = mpe(wavelength_nm)
    area = math.pi * (pattern_diameter_cm / 2.0) ** 2
    irradiance = power_mw / area
    ratio = irradiance / limit
    min_safe = pattern_diameter_cm * ratio**0.25 if ratio > 1 else pattern_diameter_cm
    return SafetyReport(
        irradiance_mw_cm2=irradiance,
        mpe_mw_cm2=limit,
        mpe_ratio=ratio,
        min_safe_diameter_cm=min_safe,
    )


@dataclass(frozen=True)
class IntensityModel:
    """Channel-wise 8-bit offset model.

    offset_c = gain_c * ln(1 + P/knee)
               - size_slope * (D - ref_diameter)
               + ambient_rate * (ln L - ln ref_ambient),  floored at 0.

    The power response saturates logarithmically; pattern size and ambient
    light subtract linearly in log-lux. Blue gain dominates red and green.
    """

    gains: tuple[float, float, float]
    power_knee_mw: float
    size_slope_b: float
    ref_diameter_cm: float
    ambient_rate: float = -40.1
    ref_ambient_lux: float = 100.0

    def __post_init__(self):
        r, g, b = self.gains
        if not (b >= r and b >= g):
            raise PhysicsError(f"blue gain must dominate, got gains {self.gains}")
        if self.size_slope_b < 0:
            raise PhysicsError(f"size slope must be non-negative, got {self.size_slope_b}")
        if not self.power_knee_mw > 0:
            raise PhysicsError(f"power knee must be positive, got {self.power_knee_mw}")


# Shipped defaults, reproduced exactly by fit_intensity_model on the
# synthetic calibration set written by default_calibration_samples().
DEFAULT_INTENSITY_MODEL = IntensityModel(
    gains=(12.0, 34.0, 80.0),
    power_knee_mw=10.0,
    size_slope_b=1.45,
    ref_diameter_cm=3.5,
    ambient_rate=-40.1,
    ref_ambient_lux=100.0,
)


def intensity_offset(
    m: IntensityModel, power_mw: float, diameter_cm: float, ambient_lux: float
) -> tuple[float, float, float]:
    """Per-channel expected intensity offset (real-valued, floored at 0)."""
    if power_mw < 0 or diameter_cm <= 0 or ambient_lux <= 0:
        raise PhysicsError("power must be >= 0, diameter and ambient > 0")
    if power_mw == 0:
        return (0.0, 0.0, 0.0)
    u = math.log1p(power_mw / m.power_knee_mw)
    shift = -m.size_slope_b * (diameter_cm - m.ref_diameter_cm) + m.ambient_rate * (
        math.log(ambient_lux) - math.log(m.ref_ambient_lux)
    )
    return tuple(max(0.0, gain * u + shift) for gain in m.gains)


CALIBRATION_CSV_HEADER = ["power_mw", "diameter_cm", "ambient_lux", "off_r", "off_g", "off_b"]


def default_calibration_samples() -> list[tuple[float, float, float, float, float, float]]:
    """Synthetic calibration grid, noise-free under the default model.

    Restricted to combinations where no channel clips at zero, so the fit
    sees the unfloored linear structure.
    """
    rows = []
    for p in (20.0, 40.0, 60.0, 80.0):
        for d in (3.5, 5.0, 8.0, 10.0):
            for lux in (50.0, 100.0):
                off = intensity_offset(DEFAULT_INTENSITY_MODEL, p, d, lux)
                rows.append((p, d, lux) + off)
    return rows


def write_calibration_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CALIBRATION_CSV_HEADER)
        for row in rows:
            writer.writerow([f"{v:.9g}" for v in row])


def read_calibration_csv(path: str) -> list[tuple[float, float, float, float, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CALIBRATION_CSV_HEADER:
            raise PhysicsError(f"bad calibration header: {header}")
        return [tuple(float(v) for v in row) for row in reader]


def _profile_rss(samples: np.ndarray, knee: float, ref_d: float, ref_lux: float):
    """Linear least squares for (gains, slope, rate, intercept) at a fixed knee.

    Rows of `samples`: power, diameter, ambient, off_r, off_g, off_b. The
    diameter and ambient regressors are centered on the requested
    references, so data generated at those references fits with a zero
    intercept. Returns (rss, beta) or None if the design is rank-deficient.
    """
    n = samples.shape[0]
    u = np.log1p(samples[:, 0] / knee)
    v = samples[:, 1] - ref_d
    w = np.log(samples[:, 2]) - math.log(ref_lux)
    rows = np.zeros((3 * n, 6))
    target = np.zeros(3 * n)
    for c in range(3):
        sl = slice(c * n, (c + 1) * n)
        rows[sl, c] = u
        rows[sl, 3] = -v
        rows[sl, 4] = w
        rows[sl, 5] = 1.0
        target[sl] = samples[:, 3 + c]
    if np.linalg.matrix_rank(rows) < 6:
        return None
    beta, _, _, _ = np.linalg.lstsq(rows, target, rcond=None)
    pred = rows @ beta
    rss = float(np.sum((target - pred) ** 2))
    return rss, beta


@dataclass(frozen=True)
class CalibrationFit:
    model: IntensityModel
    residual_rms: float


def fit_intensity_model(
    samples,
    ref_diameter_cm: float = 3.5,
    ref_ambient_lux: float = 100.0,
) -> CalibrationFit:
    """Least-squares fit of the offset model to measured samples.

    The power knee enters nonlinearly; it is profiled: a log-spaced scan
    followed by golden-section refinement, with all remaining parameters
    solved linearly at each candidate knee.
    """
    arr = np.asarray([tuple(s) for s in samples], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 6 or arr.shape[0] < 6:
        raise PhysicsError("need >= 6 samples of (power, diameter, ambient, r, g, b)")
    if len(set(arr[:, 0])) < 2 or len(set(arr[:, 1])) < 2:
        raise PhysicsError("samples must span >= 2 powers and >= 2 diameters")

    def objective(log_knee: float) -> float:
        res = _profile_rss(arr, math.exp(log_knee), ref_diameter_cm, ref_ambient_lux)
        return math.inf if res is None else res[0]

    grid = np.linspace(math.log(0.1), math.log(500.0), 120)
    rss_grid = [objective(lk) for lk in grid]
    if all(math.isinf(r) for r in rss_grid):
        raise PhysicsError("degenerate calibration set: rank-deficient design")
    i_best = int(np.argmin(rss_grid))
    lo = grid[max(0, i_best - 1)]
    hi = grid[min(len(grid) - 1, i_best + 1)]

    # Golden-section refinement of the knee.
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = objective(c), objective(d)
    for _ in range(200):
        if b - a < 1e-12:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = objective(d)
    knee = math.exp((a + b) / 2.0)

    res = _profile_rss(arr, knee, ref_diameter_cm, ref_ambient_lux)
    if res is None:
        raise PhysicsError("degenerate calibration set: rank-deficient design")
    rss, beta = res
    a_r, a_g, a_b, slope, rate, intercept = beta
    # The model form carries no free constant: a nonzero fitted intercept is
    # folded into the ambient reference (or the diameter reference when the
    # data carries no ambient signal).
    ref_d, ref_lux = ref_diameter_cm, ref_ambient_lux
    if abs(intercept) > 1e-12:
        if abs(rate) > 1e-9:
            ref_lux = ref_lux * math.exp(-intercept / rate)
        elif abs(slope) > 1e-9:
            ref_d = ref_d + intercept / slope
    model = IntensityModel(
        gains=(float(a_r), float(a_g), float(a_b)),
        power_knee_mw=float(knee),
        size_slope_b=float(slope),
        ref_diameter_cm=float(ref_d),
        ambient_rate=float(rate),
        ref_ambient_lux=float(ref_lux),
    )
    rms = math.sqrt(rss / (3 * arr.shape[0]))
    return CalibrationFit(model=model, residual_rms=rms)
