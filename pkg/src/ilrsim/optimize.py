"""Black-box attack search: robustness-averaged loss and a from-scratch
Tree-structured Parzen Estimator over (diameter, power, x, y).

The TPE core is generic over box-bounded vectors: observations split at a
loss quantile into good/bad sets, per-dimension Gaussian Parzen densities
are fit to each, and candidates drawn from the good density are ranked by
the density ratio. A projection hook keeps the pattern disk fully on the
sign polygon.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from shapely.geometry import Point, Polygon

from .imaging import AffinePhotometricTransform, Raster, apply_transform
from .trace import TraceLibrary, trace_at, apply_trace, saturation_fraction


class OptimizeError(Exception):
    """Infeasible geometry or misconfigured search."""


@dataclass(frozen=True)
class AttackParams:
    """Attacker decision variables; the emitter stand-off is a scenario
    constant, never searched."""

    diameter_cm: float
    power_mw: float
    center: tuple[float, float]
    emitter_distance_m: float = 3.0


@dataclass(frozen=True)
class EoTConfig:
    samples_per_eval: int = 8
    noise_sigma: float = 2.0
    brightness_range: tuple[float, float] = (0.8, 1.2)
    rotation_range_deg: tuple[float, float] = (-5.0, 5.0)
    shear_range: tuple[float, float] = (-0.05, 0.05)
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_eval < 1:
            raise OptimizeError("need at least one sample per evaluation")
        for rng in (self.brightness_range, self.rotation_range_deg, self.shear_range):
            if rng[1] < rng[0]:
                raise OptimizeError(f"range {rng} is not ordered")


@dataclass(frozen=True)
class TpeConfig:
    budget: int = 300
    startup: int = 10
    gamma: float = 0.25
    candidates_per_step: int = 24
    bandwidth_floor: float = 0.05
    seed: int = 0
    # Trajectory points within this loss distance of the best count as
    # ties; ties resolve toward the smallest pattern footprint, matching
    # the attack goal of covering as little of the sign as possible.
    loss_tie_tol: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.gamma < 0.5:
            raise OptimizeError(f"gamma must be in (0, 0.5), got {self.gamma}")
        if self.startup >= self.budget:
            raise OptimizeError("startup must be below the total budget")


def eot_transforms(eot: EoTConfig) -> list[tuple[AffinePhotometricTransform, int]]:
    """The fixed set of robustness transforms for one optimization run.

    Drawn once from the config seed and reused at every evaluation, so all
    search points face identical perturbations (common random numbers) and
    every loss is a pure function of its parameters.
    """
    rng = np.random.default_rng(eot.seed)
    out = []
    for i in range(eot.samples_per_eval):
        rot = float(rng.uniform(*eot.rotation_range_deg))
        shear = float(rng.uniform(*eot.shear_range))
        bright = float(rng.uniform(*eot.brightness_range))
        noise_seed = int(rng.integers(0, 2**63 - 1))
        out.append(
            (
                AffinePhotometricTransform(
                    rotation_deg=rot,
                    shear=shear,
                    brightness=bright,
                    noise_sigma=eot.noise_sigma,
                ),
                noise_seed,
            )
        )
    return out


def eot_loss(
    base: Raster,
    params: AttackParams,
    lib: TraceLibrary,
    oracle,
    true_label: str,
    eot: EoTConfig,
    transforms: list[tuple[AffinePhotometricTransform, int]] | None = None,
) -> float:
    """Mean true-class confidence over the robustness transform set for the
    attack image built at (diameter, power, center)."""
    t = trace_at(lib, params.power_mw, params.diameter_cm)
    attacked = apply_trace(base, t, params.center)
    if transforms is None:
        transforms = eot_transforms(eot)
    total = 0.0
    for tf, noise_seed in transforms:
        variant = apply_transform(attacked, tf, rng_seed=noise_seed)
        total += oracle.classify(variant).score(true_label)
    return total / len(transforms)


class FeasibleRegion:
    """Sign polygon with diameter-dependent inward inset: the disk of the
    attack pattern must lie fully on the sign."""

    def __init__(self, polygon_xy: np.ndarray, scale: float):
        self.polygon = Polygon([(float(x), float(y)) for x, y in polygon_xy])
        if not self.polygon.is_valid or self.polygon.area <= 0:
            raise OptimizeError("invalid sign polygon")
        self.scale = scale

    def inset(self, diameter_cm: float) -> Polygon:
        r = diameter_cm * self.scale / 2.0
        region = self.polygon.buffer(-r)
        return region

    def max_diameter_cm(self) -> float:
        """Largest pattern diameter whose disk fits on the sign."""
        lo, hi = 0.0, 2.0 * math.sqrt(self.polygon.area / math.pi) / self.scale * 2.0
        for _ in range(60):
            mid = (lo + hi) / 2.0
            if self.inset(mid).is_empty:
                hi = mid
            else:
                lo = mid
        return lo

    def contains(self, x: float, y: float, diameter_cm: float) -> bool:
        region = self.inset(diameter_cm)
        return (not region.is_empty) and region.covers(Point(x, y))

    def project(self, x: float, y: float, diameter_cm: float) -> tuple[float, float]:
        region = self.inset(diameter_cm)
        if region.is_empty:
            raise OptimizeError(f"no feasible placement for diameter {diameter_cm} cm")
        p = Point(x, y)
        if region.covers(p):
            return x, y
        boundary = region.exterior if hasattr(region, "exterior") else region.boundary
        q = boundary.interpolate(boundary.project(p))
        return float(q.x), float(q.y)

    def sample_uniform(self, diameter_cm: float, rng: np.random.Generator) -> tuple[float, float]:
        """Uniform draw over the inset region by rejection from its bbox."""
        region = self.inset(diameter_cm)
        if region.is_empty:
            raise OptimizeError(f"no feasible placement for diameter {diameter_cm} cm")
        minx, miny, maxx, maxy = region.bounds
        for _ in range(10_000):
            x = rng.uniform(minx, maxx)
            y = rng.uniform(miny, maxy)
            if region.covers(Point(x, y)):
                return x, y
        raise OptimizeError("rejection sampling failed; degenerate feasible region")


def _parzen_log_density(x: np.ndarray, centers: np.ndarray, bw: float) -> np.ndarray:
    z = (x[:, None] - centers[None, :]) / bw
    log_k = -0.5 * z * z - math.log(bw * math.sqrt(2 * math.pi))
    m = log_k.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(log_k - m).sum(axis=1, keepdims=True) / len(centers)))[:, 0]


def _bandwidth(points: np.ndarray, lo: float, hi: float, floor_frac: float) -> float:
    span = max(hi - lo, 1e-12)
    floor = floor_frac * span
    if len(points) < 2:
        return floor
    scott = float(np.std(points)) * len(points) ** (-0.2)
    return max(scott, floor)


def tpe_suggest_vector(
    history_x: np.ndarray,
    history_loss: np.ndarray,
    bounds: list[tuple[float, float]],
    cfg: TpeConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """One TPE proposal over a box. Bootstrap draws are uniform; afterwards
    candidates sampled from the good-set density are ranked by the
    good/bad density ratio."""
    d = len(bounds)
    if any(hi < lo for lo, hi in bounds):
        raise OptimizeError("empty bounds")
    if len(history_x) < cfg.startup:
        return np.array([rng.uniform(lo, hi) for lo, hi in bounds])

    n = len(history_x)
    n_good = int(np.ceil(cfg.gamma * n))
    n_good = min(max(n_good, 1), n - 1)
    order = np.argsort(history_loss, kind="stable")
    good = history_x[order[:n_good]]
    bad = history_x[order[n_good:]]

    cands = np.empty((cfg.candidates_per_step, d))
    score = np.zeros(cfg.candidates_per_step)
    for j in range(d):
        lo, hi = bounds[j]
        bw_good = _bandwidth(good[:, j], lo, hi, cfg.bandwidth_floor)
        bw_bad = _bandwidth(bad[:, j], lo, hi, cfg.bandwidth_floor)
        picks = rng.integers(0, len(good), size=cfg.candidates_per_step)
        vals = np.clip(good[picks, j] + rng.normal(0.0, bw_good, cfg.candidates_per_step), lo, hi)
        cands[:, j] = vals
        score += _parzen_log_density(vals, good[:, j], bw_good)
        score -= _parzen_log_density(vals, bad[:, j], bw_bad)
    return cands[int(np.argmax(score))]


def tpe_minimize(
    objective,
    bounds: list[tuple[float, float]],
    cfg: TpeConfig,
    project=None,
) -> tuple[np.ndarray, float, list[tuple[np.ndarray, float]]]:
    """Sequential TPE loop over a plain vector objective; returns the best
    point, its loss, and the full (point, loss) trajectory."""
    rng = np.random.default_rng(cfg.seed)
    xs: list[np.ndarray] = []
    losses: list[float] = []
    for _ in range(cfg.budget):
        hist_x = np.asarray(xs) if xs else np.empty((0, len(bounds)))
        hist_l = np.asarray(losses)
        x = tpe_suggest_vector(hist_x, hist_l, bounds, cfg, rng)
        if project is not None:
            x = project(x)
        loss = float(objective(x))
        xs.append(x)
        losses.append(loss)
    best = int(np.argmin(losses))
    return xs[best], losses[best], list(zip(xs, losses))


@dataclass(frozen=True)
class TrajectoryPoint:
    step: int
    params: AttackParams
    loss: float


def _select_best(
    trajectory: list[TrajectoryPoint], tie_tol: float
) -> TrajectoryPoint:
    """Minimum loss, with near-ties resolved toward the smallest footprint
    (diameter, then power, then loss, then step)."""
    best_loss = min(p.loss for p in trajectory)
    pool = [p for p in trajectory if p.loss <= best_loss + tie_tol]
    return min(pool, key=lambda p: (p.params.diameter_cm, p.params.power_mw, p.loss, p.step))


class AttackSearch:
    """Shared machinery for the full and power-pinned searches."""

    def __init__(
        self,
        base: Raster,
        sign_polygon: np.ndarray,
        lib: TraceLibrary,
        oracle,
        true_label: str,
        tpe: TpeConfig,
        eot: EoTConfig,
    ):
        self.base = base
        self.lib = lib
        self.oracle = oracle
        self.true_label = true_label
        self.tpe = tpe
        self.eot = eot
        self.region = FeasibleRegion(sign_polygon, base.scale)

        d_lo, d_hi = lib.diameter_range()
        d_geom = self.region.max_diameter_cm()
        self.d_bounds = (d_lo, min(d_hi, d_geom))
        if self.d_bounds[1] <= self.d_bounds[0]:
            raise OptimizeError(
                f"infeasible geometry: sign admits at most {d_geom:.2f} cm patterns, "
                f"library starts at {d_lo:.2f} cm"
            )
        self.p_bounds = lib.power_range()
        minx, miny, maxx, maxy = self.region.inset(self.d_bounds[0]).bounds
        self.xy_bounds = ((minx, maxx), (miny, maxy))
        self.transforms = eot_transforms(eot)

    def loss_at(self, params: AttackParams) -> float:
        return eot_loss(
            self.base, params, self.lib, self.oracle, self.true_label, self.eot,
            transforms=self.transforms,
        )

    def run(self, pin_power: float | None = None) -> tuple[AttackParams, list[TrajectoryPoint]]:
        searched_power = pin_power is None
        bounds = [self.d_bounds]
        if searched_power:
            bounds.append(self.p_bounds)
        bounds.extend(self.xy_bounds)
        rng = np.random.default_rng(self.tpe.seed)

        trajectory: list[TrajectoryPoint] = []
        xs: list[np.ndarray] = []
        losses: list[float] = []
        for step in range(self.tpe.budget):
            hist_x = np.asarray(xs) if xs else np.empty((0, len(bounds)))
            x = tpe_suggest_vector(hist_x, np.asarray(losses), bounds, self.tpe, rng)
            x = self._project(x, searched_power)
            params = self._to_params(x, searched_power, pin_power)
            loss = self.loss_at(params)
            xs.append(x)
            losses.append(loss)
            trajectory.append(TrajectoryPoint(step=step, params=params, loss=loss))
        best = _select_best(trajectory, self.tpe.loss_tie_tol)
        return best.params, trajectory

    def _project(self, x: np.ndarray, searched_power: bool) -> np.ndarray:
        x = x.copy()
        d = float(np.clip(x[0], *self.d_bounds))
        x[0] = d
        off = 2 if searched_power else 1
        px, py = self.region.project(x[off], x[off + 1], d)
        x[off], x[off + 1] = px, py
        return x

    def _to_params(self, x: np.ndarray, searched_power: bool, pin_power) -> AttackParams:
        if searched_power:
            return AttackParams(
                diameter_cm=float(x[0]), power_mw=float(x[1]), center=(float(x[2]), float(x[3]))
            )
        return AttackParams(
            diameter_cm=float(x[0]), power_mw=float(pin_power), center=(float(x[1]), float(x[2]))
        )


def optimize_attack(
    base: Raster,
    sign_polygon: np.ndarray,
    lib: TraceLibrary,
    oracle,
    true_label: str,
    tpe: TpeConfig,
    eot: EoTConfig,
) -> tuple[AttackParams, list[TrajectoryPoint]]:
    """Full four-variable search; returns the best parameters and the full
    trajectory, deterministic for fixed seeds."""
    search = AttackSearch(base, sign_polygon, lib, oracle, true_label, tpe, eot)
    return search.run()


def optimize_saturated(
    base: Raster,
    sign_polygon: np.ndarray,
    lib: TraceLibrary,
    oracle,
    true_label: str,
    tpe: TpeConfig,
    eot: EoTConfig,
) -> tuple[AttackParams, list[TrajectoryPoint]]:
    """Saturation-mode search: power pinned at the library maximum, only
    diameter and placement searched. Requires that the maximum power can
    actually saturate the pattern somewhere feasible."""
    search = AttackSearch(base, sign_polygon, lib, oracle, true_label, tpe, eot)
    p_max = lib.power_range()[1]

    # Saturation reachability probe at the most favorable feasible setting.
    d_probe = search.d_bounds[1]
    region = search.region.inset(d_probe)
    probe_pt = region.representative_point()
    t = trace_at(lib, p_max, d_probe)
    attacked = apply_trace(base, t, (float(probe_pt.x), float(probe_pt.y)))
    cx, cy = t.support_centroid()
    dx = int(round(probe_pt.x - cx))
    dy = int(round(probe_pt.y - cy))
    shifted = np.zeros((base.height, base.width), dtype=bool)
    th, tw = t.grid_shape
    x_lo, y_lo = max(0, dx), max(0, dy)
    x_hi, y_hi = min(base.width, dx + tw), min(base.height, dy + th)
    shifted[y_lo:y_hi, x_lo:x_hi] = t.support[y_lo - dy : y_hi - dy, x_lo - dx : x_hi - dx]
    if saturation_fraction(attacked, shifted) <= 0.5:
        raise OptimizeError(
            f"library maximum power {p_max} mW cannot saturate the pattern on this sign"
        )
    return search.run(pin_power=p_max)


def save_trajectory_csv(trajectory: list[TrajectoryPoint], path: str) -> None:
    with open(path, "w") as fh:
        fh.write("step,diameter_cm,power_mw,x_px,y_px,loss\n")
        for p in trajectory:
            fh.write(
                f"{p.step},{p.params.diameter_cm:.9g},{p.params.power_mw:.9g},"
                f"{p.params.center[0]:.9g},{p.params.center[1]:.9g},{p.loss:.9g}\n"
            )


def save_params_json(params: AttackParams, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(
            {
                "diameter_cm": params.diameter_cm,
                "power_mw": params.power_mw,
                "x_px": params.center[0],
                "y_px": params.center[1],
                "emitter_distance_m": params.emitter_distance_m,
            },
            fh,
            indent=2,
            sort_keys=True,
        )


def load_params_json(path: str) -> AttackParams:
    with open(path) as fh:
        d = json.load(fh)
    return AttackParams(
        diameter_cm=d["diameter_cm"],
        power_mw=d["power_mw"],
        center=(d["x_px"], d["y_px"]),
        emitter_distance_m=d.get("emitter_distance_m", 3.0),
    )
