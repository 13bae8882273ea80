"""Attack evaluation: success/consistency metrics, the random-placement
baseline, deployment simulation, and robustness sweeps.

All stochastic behavior flows from explicit seeds; sweep cells draw their
trial seeds from (master seed, cell index) so serial and parallel runs
write identical CSVs.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from shapely.geometry import Point

from .imaging import AffinePhotometricTransform, Raster, apply_transform
from .optimize import AttackParams, FeasibleRegion, OptimizeError
from .oracle import RoiNoise, crop_roi
from .physics import IntensityModel
from .trace import TraceLibrary, trace_at, apply_trace, rescale_to_ambient


@dataclass(frozen=True)
class DeploymentConfig:
    """Conditions under which an optimized attack is replayed."""

    trials: int = 10
    deploy_noise_sigma: float = 2.0
    deploy_brightness_jitter: float = 0.1
    ambient_lux: float = 100.0
    view: AffinePhotometricTransform = field(default_factory=AffinePhotometricTransform)
    roi_delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("need at least one trial")


@dataclass(frozen=True)
class TrialRecord:
    predicted: str
    simulated: str
    success: bool


@dataclass(frozen=True)
class EvalReport:
    asr: float
    scr: float
    records: tuple[TrialRecord, ...]

    @staticmethod
    def from_records(records: list[TrialRecord]) -> "EvalReport":
        n = len(records)
        hits = sum(1 for r in records if r.success)
        consistent = sum(1 for r in records if r.predicted == r.simulated)
        return EvalReport(asr=hits / n, scr=consistent / n, records=tuple(records))


def _attacked_image(
    base: Raster,
    params: AttackParams,
    lib: TraceLibrary,
    model: IntensityModel,
    ambient_lux: float,
) -> Raster:
    t = trace_at(lib, params.power_mw, params.diameter_cm)
    if abs(ambient_lux - lib.ambient_lux) > 1e-9:
        t = rescale_to_ambient(t, model, lib.ambient_lux, ambient_lux)
    return apply_trace(base, t, params.center)


def deploy_and_classify(
    base: Raster,
    params: AttackParams,
    lib: TraceLibrary,
    oracle,
    true_label: str,
    dep: DeploymentConfig,
    model: IntensityModel,
    roi: tuple[int, int, int, int],
) -> EvalReport:
    """Replay an attack under deployment conditions.

    Per trial: rebuild the trace at the deployment ambient level, apply it,
    transform by the camera view with photometric jitter, crop the
    (possibly displaced) ROI, classify. Success is any misclassification;
    consistency compares against the noise-free simulated prediction.
    """
    attacked = _attacked_image(base, params, lib, model, dep.ambient_lux)

    sim_view = replace(dep.view, noise_sigma=0.0)
    sim_img = apply_transform(attacked, sim_view, rng_seed=0)
    sim_label = oracle.classify(crop_roi(sim_img, roi)).top_label

    seeds = np.random.SeedSequence(dep.seed).generate_state(2 * dep.trials)
    records = []
    for i in range(dep.trials):
        rng = np.random.default_rng(int(seeds[2 * i]))
        bright = float(
            rng.uniform(1 - dep.deploy_brightness_jitter, 1 + dep.deploy_brightness_jitter)
        )
        trial_view = replace(
            dep.view,
            brightness=dep.view.brightness * bright,
            noise_sigma=dep.deploy_noise_sigma,
        )
        frame = apply_transform(attacked, trial_view, rng_seed=int(seeds[2 * i]))
        crop = crop_roi(frame, roi, RoiNoise(dep.roi_delta), rng_seed=int(seeds[2 * i + 1]))
        predicted = oracle.classify(crop).top_label
        records.append(
            TrialRecord(
                predicted=predicted,
                simulated=sim_label,
                success=predicted != true_label,
            )
        )
    return EvalReport.from_records(records)


BASELINE_DIAMETER_CM = 15.0
BASELINE_POWER_MW = 51.0


def random_baseline(
    base: Raster,
    sign_polygon: np.ndarray,
    lib: TraceLibrary,
    oracle,
    true_label: str,
    trials: int,
    seed: int,
    model: IntensityModel,
    roi: tuple[int, int, int, int],
    dep: DeploymentConfig | None = None,
) -> EvalReport:
    """Naive attacker: a fixed moderate pattern projected at uniformly
    random feasible placements."""
    if trials < 1:
        raise OptimizeError("need at least one baseline trial")
    p_lo, p_hi = lib.power_range()
    if not p_lo <= BASELINE_POWER_MW <= p_hi:
        raise OptimizeError("baseline power outside the library range")
    region = FeasibleRegion(sign_polygon, base.scale)
    if region.inset(BASELINE_DIAMETER_CM).is_empty:
        raise OptimizeError("baseline pattern does not fit on this sign")
    if dep is None:
        dep = DeploymentConfig(trials=1, deploy_noise_sigma=0.0, deploy_brightness_jitter=0.0)

    rng = np.random.default_rng(seed)
    records = []
    for i in range(trials):
        x, y = region.sample_uniform(BASELINE_DIAMETER_CM, rng)
        params = AttackParams(
            diameter_cm=BASELINE_DIAMETER_CM, power_mw=BASELINE_POWER_MW, center=(x, y)
        )
        one = replace(dep, trials=1, seed=int(rng.integers(0, 2**63 - 1)))
        rep = deploy_and_classify(base, params, lib, oracle, true_label, one, model, roi)
        records.append(rep.records[0])
    return EvalReport.from_records(records)


def uniform_placements(
    sign_polygon: np.ndarray, scale: float, diameter_cm: float, count: int, seed: int
) -> np.ndarray:
    """Seeded uniform draws over the feasible inset region (test hook for
    the uniformity property)."""
    region = FeasibleRegion(sign_polygon, scale)
    rng = np.random.default_rng(seed)
    return np.array([region.sample_uniform(diameter_cm, rng) for _ in range(count)])


def sweep_ambient(
    base, params, lib, oracle, true_label, lux_levels, dep, model, roi, threads: int = 1
):
    """Attack generated at the library's ambient level, evaluated across
    other light levels via per-channel offset rescaling."""

    def cell(i):
        lux = lux_levels[i]
        cell_dep = replace(dep, ambient_lux=float(lux), seed=_cell_seed(dep.seed, i))
        return deploy_and_classify(base, params, lib, oracle, true_label, cell_dep, model, roi)

    reports = _run_cells(cell, len(lux_levels), threads)
    return list(zip(lux_levels, reports))


def sweep_positions(
    base, params, lib, oracle, true_label, grid, dep, model, roi,
    sign_polygon=None, threads: int = 1,
):
    """Camera pose sweep: each cell is (longitudinal scale, lateral offset
    px). Longitudinal motion rescales the frame; lateral motion shears and
    translates it. Cells whose view pushes the sign out of frame are None.
    """
    poly = np.asarray(sign_polygon) if sign_polygon is not None else None

    def cell(i):
        long_scale, lateral_px = grid[i]
        shear = lateral_px / (4.0 * base.width)
        view = replace(
            dep.view,
            scale_xy=(float(long_scale), float(long_scale)),
            shear=float(shear),
            translation=(float(lateral_px), 0.0),
        )
        if poly is not None and not _sign_in_frame(poly, view, base):
            return None
        cell_dep = replace(dep, view=view, seed=_cell_seed(dep.seed, i))
        return deploy_and_classify(base, params, lib, oracle, true_label, cell_dep, model, roi)

    reports = _run_cells(cell, len(grid), threads)
    return list(zip(grid, reports))


def sweep_roi_noise(
    base, params, lib, oracle, true_label, deltas, dep, model, roi, threads: int = 1
):
    """First-stage displacement sweep: per-delta ASR/SCR with seeded draws."""
    for d in deltas:
        if not 0.0 <= d < 0.5:
            raise ValueError(f"displacement level must be below 0.5, got {d}")

    def cell(i):
        cell_dep = replace(dep, roi_delta=float(deltas[i]), seed=_cell_seed(dep.seed, i))
        return deploy_and_classify(base, params, lib, oracle, true_label, cell_dep, model, roi)

    reports = _run_cells(cell, len(deltas), threads)
    return list(zip(deltas, reports))


def _cell_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence((master, index)).generate_state(1)[0])


def _run_cells(cell_fn, count: int, threads: int):
    if threads <= 1:
        return [cell_fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(cell_fn, range(count)))


def _sign_in_frame(polygon: np.ndarray, view: AffinePhotometricTransform, base: Raster) -> bool:
    from .imaging import _geometry_matrix

    fwd = _geometry_matrix(view, (base.width - 1) / 2.0, (base.height - 1) / 2.0)
    ones = np.ones((len(polygon), 1))
    moved = (np.hstack([polygon, ones]) @ fwd.T)[:, :2]
    return bool(
        (moved[:, 0] >= 0).all()
        and (moved[:, 1] >= 0).all()
        and (moved[:, 0] <= base.width - 1).all()
        and (moved[:, 1] <= base.height - 1).all()
    )


def write_report_csv(path: str, rows: list[dict]) -> None:
    """Summary CSV: one row per sweep cell / run, fixed header order."""
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0].keys())
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[k]) for k in keys) + "\n")


def write_trials_csv(path: str, report: EvalReport) -> None:
    with open(path, "w") as fh:
        fh.write("trial,predicted,simulated,success\n")
        for i, r in enumerate(report.records):
            fh.write(f"{i},{r.predicted},{r.simulated},{int(r.success)}\n")


def write_run_manifest(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)
