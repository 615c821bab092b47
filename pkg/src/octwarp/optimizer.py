"""Coarse-to-fine momentum gradient descent over all scans jointly."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core_model import FAST_X, KNOT_FIELDS, MotionParameterSet, VolumeGrid
from .evaluation import DisplacementField
from .forward_warp import W_MIN, TargetGridSpec, ascan_pose, make_grid, splat_volume
from .objective import (LevelVolume, ObjectiveState, default_s_min, orthogonal_targets,
                        project_zero_mean)
from .preprocess import LEVEL_COUNT, build_pyramid, preprocess

log = logging.getLogger(__name__)

PARAM_TYPES = KNOT_FIELDS + ("alpha",)

DEFAULT_STEPS = {"t_x": 0.13, "t_y": 0.13, "t_z": 0.03, "m": 1e-4, "illum_c": 0.015, "alpha": 5e-6}
# intensity offsets have resolution-independent curvature: no coarse-level step boost
LEVEL_INVARIANT = ("illum_c",)
DEFAULT_REG = {"t_x": 0.05, "t_y": 0.05, "t_z": 0.3, "m": 30.0, "illum_c": 0.5}


class OptimizationDiverged(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    """Optimizer, grid and regularizer settings.

    ``steps`` are the finest-level step sizes per parameter type; coarser
    levels use ``steps * 2**(3 - level)`` (illumination excepted). ``tolerance`` is the convergence
    threshold on the largest change of any parameter type over one target
    refresh, in pixels; shear and rotation changes are converted to the
    displacement they cause at the edge of the field of view. Levels whose
    target grid spans fewer than ``min_level_size`` pixels across the field
    of view are skipped.
    """

    steps: dict = field(default_factory=lambda: dict(DEFAULT_STEPS))
    momentum: float = 0.9
    tolerance: float = 0.02
    inner_steps: int = 10
    max_outer: int = 40
    level_count: int = LEVEL_COUNT
    first_level: int = 0
    reg_weights: dict = field(default_factory=lambda: dict(DEFAULT_REG))
    seed: int = 0
    alpha0: float = math.pi / 4
    resolution_factor: float = 5 / 6
    tile_shift: tuple = (0, 0)
    w_min: float = W_MIN
    s_min: float | None = None
    s_min_percentile: float = 1.0
    s_min_offset: float = 2.0
    init_window: int = 3
    illumination: bool = True
    divergence_factor: float = 10.0
    reset_momentum: bool = True
    min_level_size: int = 24

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for k in PARAM_TYPES:
            if self.steps.get(k, 0.0) <= 0:
                raise ValueError(f"step size for {k} must be > 0")
        unknown = set(self.steps) - set(PARAM_TYPES)
        if unknown:
            raise ValueError(f"unknown step types {sorted(unknown)}")
        unknown = set(self.reg_weights) - set(KNOT_FIELDS)
        if unknown:
            raise ValueError(f"unknown regularizer types {sorted(unknown)}")
        if any(v < 0 for v in self.reg_weights.values()):
            raise ValueError("regularizer weights must be >= 0")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.inner_steps < 1 or self.max_outer < 1:
            raise ValueError("inner_steps and max_outer must be >= 1")
        if not 1 <= self.level_count <= 8 or not 0 <= self.first_level < self.level_count:
            raise ValueError("invalid level range")
        if not 0.5 < self.resolution_factor <= 1.0:
            raise ValueError("resolution factor must be in (0.5, 1]")
        if self.w_min <= 0:
            raise ValueError("w_min must be > 0")
        if self.init_window < 0:
            raise ValueError("init_window must be >= 0")
        if self.min_level_size < 0:
            raise ValueError("min_level_size must be >= 0")


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------

def axial_center_of_mass(vol: VolumeGrid, s_min: float, window: int = 3) -> np.ndarray:
    """Per-B-scan-repeat center of mass depth (pixels) with cubed-intensity
    weights, averaged over ``+-window`` temporally neighboring A-scans.
    B-scans without foreground get NaN."""
    s = vol.ascans().astype(np.float64)
    w = np.where(s > s_min, np.maximum(s, 0.0), 0.0) ** 3
    num = w @ np.arange(vol.d, dtype=np.float64)
    den = w.sum(axis=1)
    if window > 0:
        box = np.ones(2 * window + 1)
        num = np.convolve(num, box, mode="same")
        den = np.convolve(den, box, mode="same")
    com = np.full(num.shape, np.nan)
    np.divide(num, den, out=com, where=den > 0)
    com = com.reshape(vol.n_bscans, vol.w)
    with np.errstate(all="ignore"):
        ok = np.isfinite(com)
        cnt = ok.sum(axis=1)
        tot = np.where(ok, com, 0.0).sum(axis=1)
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def init_axial(volumes, s_min, window: int = 3) -> list[np.ndarray]:
    """Initial ``t_z`` knots aligning the bright band: windowed center-of-mass
    depth per B-scan repeat minus the mean over all scans (deeper band means
    larger ``t_z``). Accepts one volume or a list."""
    single = isinstance(volumes, VolumeGrid)
    vols = [volumes] if single else list(volumes)
    smins = [s_min] * len(vols) if np.ndim(s_min) == 0 else list(s_min)
    coms = [axial_center_of_mass(v, s, window) for v, s in zip(vols, smins)]
    allc = np.concatenate(coms)
    mean = float(np.nanmean(allc)) if np.any(np.isfinite(allc)) else 0.0
    out = [np.where(np.isfinite(c), c - mean, 0.0) for c in coms]
    return out[0] if single else out


# --------------------------------------------------------------------------
# Level optimization
# --------------------------------------------------------------------------

@dataclass
class LevelReport:
    """Per-level summary. ``objective_entry``/``objective_exit`` use targets
    warped with the entry/exit parameters respectively."""

    level: int
    objective_entry: float
    objective_exit: float
    outer_iterations: int
    converged: bool
    max_change: float
    restarts: int = 0
    non_overlap: bool = False
    pairs: list = field(default_factory=list)
    history: list = field(default_factory=list)  # objective after each target refresh
    objective_exit_entry_targets: float = math.nan


def _type_slices(all_params) -> list[dict]:
    out = []
    for p in all_params:
        n = p.n_knots
        sl = {f: slice(i * n, (i + 1) * n) for i, f in enumerate(KNOT_FIELDS)}
        sl["alpha"] = slice(len(KNOT_FIELDS) * n, len(KNOT_FIELDS) * n + 1)
        out.append(sl)
    return out


def _change_scale(lv: LevelVolume) -> dict:
    """Displacement (px) caused by a unit change of each parameter type."""
    edge = float(np.max(np.abs(lv.geom.xfast))) if lv.geom.xfast.size else 1.0
    radius = float(np.max(np.hypot(lv.geom.px, lv.geom.py))) if lv.geom.px.size else 1.0
    return {"t_x": 1.0, "t_y": 1.0, "t_z": 1.0, "m": edge, "illum_c": 1.0, "alpha": radius}


def max_change(old, new, volumes) -> float:
    worst = 0.0
    for po, pn, lv in zip(old, new, volumes):
        sc = _change_scale(lv)
        for f in KNOT_FIELDS:
            d = np.abs(getattr(pn, f) - getattr(po, f))
            if d.size:
                worst = max(worst, float(d.max()) * sc[f])
        worst = max(worst, abs(pn.alpha - po.alpha) * sc["alpha"])
    return worst


def _step_vectors(all_params, steps: dict, level_factor: float, illumination: bool):
    out = []
    for p, sl in zip(all_params, _type_slices(all_params)):
        s = np.empty(p.to_vector().size)
        for f in PARAM_TYPES:
            s[sl[f]] = steps[f] * (1.0 if f in LEVEL_INVARIANT else level_factor)
        if not illumination:
            s[sl["illum_c"]] = 0.0
        out.append(s)
    return out


def _project_velocity(vel, all_params):
    """Remove the per-type mean from a velocity so updates preserve zero mean."""
    ps = [p.from_vector(v) for p, v in zip(all_params, vel)]
    ps = project_zero_mean(ps)
    return [p.to_vector() for p in ps]


def run_level(state: ObjectiveState, config: OptimizerConfig, level: int, callback=None) -> LevelReport:
    """Optimize ``state.params`` in place at one pyramid level.

    ``callback(level, outer, state)`` is called after every target refresh.
    """
    factor = 2.0 ** (config.level_count - 1 - level)
    tol = config.tolerance * factor
    start = [p.copy() for p in state.params]
    steps = dict(config.steps)
    restarts = 0
    while True:
        try:
            report = _descend(state, config, level, steps, tol, factor, callback)
            report.restarts = restarts
            return report
        except _Diverged as exc:
            if restarts >= 1:
                raise OptimizationDiverged(
                    f"level {level}: objective grew from {exc.j0:.6g} to {exc.j:.6g} "
                    "after halving step sizes") from None
            log.warning("level %d diverged (J %.4g -> %.4g); halving step sizes", level, exc.j0, exc.j)
            restarts += 1
            steps = {k: v * 0.5 for k, v in steps.items()}
            state.params = [p.copy() for p in start]


class _Diverged(Exception):
    def __init__(self, j0, j):
        super().__init__()
        self.j0, self.j = j0, j


def _descend(state, config, level, steps, tol, factor, callback=None) -> LevelReport:
    state.warp_targets()
    entry_targets = state.targets
    j_entry = state.objective()
    step_vec = _step_vectors(state.params, steps, factor, config.illumination)
    vel = [np.zeros_like(s) for s in step_vec]
    history = [j_entry]
    converged = False
    change = math.inf
    outer = 0
    for outer in range(1, config.max_outer + 1):
        if outer > 1:
            state.warp_targets()
            if config.reset_momentum:
                vel = [np.zeros_like(v) for v in vel]
        before = [p.copy() for p in state.params]
        params = state.params
        for _ in range(config.inner_steps):
            j, grads, _ = state.objective_and_gradient(params)
            if not math.isfinite(j) or j > config.divergence_factor * max(j_entry, 1e-12):
                raise _Diverged(j_entry, j)
            vel = [config.momentum * v - s * g.to_vector() for v, s, g in zip(vel, step_vec, grads)]
            vel = _project_velocity(vel, params)
            params = project_zero_mean([p.from_vector(p.to_vector() + v) for p, v in zip(params, vel)])
        state.params = params
        history.append(state.objective())
        change = max_change(before, params, state.volumes)
        log.debug("level %d outer %d: J=%.6g max change %.4g", level, outer, history[-1], change)
        if callback is not None:
            callback(level, outer, state)
        if change < tol:
            converged = True
            break
    # exit objective against the entry targets, then against targets re-warped at exit
    state.targets = entry_targets
    j_exit_entry_targets = state.objective()
    state.warp_targets()
    results = state.data_terms()
    j_exit = state.objective()
    non_overlap = any(r.non_overlap for r in results)
    if non_overlap:
        log.warning("NON_OVERLAP: a volume has no valid target samples at level %d", level)
    return LevelReport(level, j_entry, j_exit, outer, converged, change, 0, non_overlap,
                       [r.pairs for r in results], history, j_exit_entry_targets)


# --------------------------------------------------------------------------
# Full correction
# --------------------------------------------------------------------------

@dataclass
class CorrectionResult:
    params: list
    fields: list
    reports: list
    grid: TargetGridSpec
    volumes: list   # preprocessed inputs
    s_min: list
    runtime: float

    @property
    def non_overlap(self) -> bool:
        return any(r.non_overlap for r in self.reports)


def level_grid(prep_volumes, config: OptimizerConfig, level: int, depth: int) -> TargetGridSpec:
    ls = 2.0 ** (config.level_count - 1 - level)
    return make_grid(prep_volumes, resolution_factor=config.resolution_factor, alpha0=config.alpha0,
                     level_scale=ls, depth=depth, seed=config.seed, tile_shift=config.tile_shift,
                     w_min=config.w_min * ls ** 2)


def usable_first_level(prep_volumes, config: OptimizerConfig) -> int:
    """Coarsest level, not below ``config.first_level``, whose target grid
    spans at least ``config.min_level_size`` pixels across the field of view."""
    pixel_size = min(min(v.spacing_x, v.spacing_y) for v in prep_volumes)
    fov = min(min(v.w * v.spacing_fast, v.h * v.spacing_slow) for v in prep_volumes) / pixel_size
    last = config.level_count - 1
    for level in range(config.first_level, last):
        if fov * config.resolution_factor / 2.0 ** (last - level) >= config.min_level_size:
            return level
    return last


def displacement_field(vol: VolumeGrid, params: MotionParameterSet, grid: TargetGridSpec,
                       dims=None) -> DisplacementField:
    """Corrected position of every A-scan's depth-0 sample at the finest level.

    ``dims`` overrides the recorded source dimensions (the raw volume's,
    since ``vol`` is usually the preprocessed one).
    """
    lv = LevelVolume.build(vol, -np.inf, grid.pixel_size, params.knot_times)
    pose = ascan_pose(lv.geom, params, grid)
    rf = grid.resolution_factor
    pos = np.column_stack([(pose.gx - grid.center[0]) / grid.scale * rf,
                           (pose.gy - grid.center[1]) / grid.scale * rf,
                           pose.shift * grid.level_scale])
    dims = (vol.w, vol.h, vol.r, vol.d) if dims is None else tuple(dims)
    return DisplacementField(pos, lv.geom.times, dims, vol.fast_axis,
                             params.alpha, grid.alpha0, rf, tuple(grid.tile_shift))


def correct(volumes, config: OptimizerConfig | None = None, callback=None) -> CorrectionResult:
    """Preprocess, initialize and jointly optimize all scans coarse to fine."""
    config = config or OptimizerConfig()
    volumes = list(volumes)
    if len(volumes) < 2:
        raise ValueError("need >= 2 volumes for an orthogonal pair")
    for v in volumes:
        v.validate()
    if not any(v.fast_axis == FAST_X for v in volumes) or all(v.fast_axis == FAST_X for v in volumes):
        raise ValueError("no orthogonal pair: both fast axes must be present")
    t_start = time.perf_counter()
    prep = [preprocess(v) for v in volumes]
    pyramids = [build_pyramid(v, config.level_count) for v in prep]
    n_levels = min(p.level_count for p in pyramids)
    if n_levels < config.level_count:
        config = _with_levels(config, n_levels)
    if config.s_min is not None:
        s_min = [float(config.s_min)] * len(prep)
    else:
        s_min = [default_s_min(v, config.s_min_percentile, config.s_min_offset) for v in prep]
    pixel_size = min(min(v.spacing_x, v.spacing_y) for v in prep)
    params = [MotionParameterSet.for_volume(v, config.alpha0) for v in prep]
    for p, tz in zip(params, init_axial(prep, s_min, config.init_window)):
        p.t_z = tz
    params = project_zero_mean(params)
    target_ids = orthogonal_targets(prep)
    reports = []
    grid = None
    first = usable_first_level(prep, config)
    if first > config.first_level:
        log.info("skipping levels %d-%d: target grid narrower than %d px",
                 config.first_level, first - 1, config.min_level_size)
    for level in range(first, config.level_count):
        lvl_vols = [pyr[level - (config.level_count - pyr.level_count)] for pyr in pyramids]
        grid = level_grid(prep, config, level, depth=max(v.d for v in lvl_vols))
        lvs = [LevelVolume.build(v, s, pixel_size, p.knot_times)
               for v, s, p in zip(lvl_vols, s_min, params)]
        state = ObjectiveState(lvs, params, grid, config.reg_weights, target_ids=target_ids)
        rep = run_level(state, config, level, callback)
        params = state.params
        log.info("level %d: J %.6g -> %.6g (%d refreshes, converged=%s)", level,
                 rep.objective_entry, rep.objective_exit, rep.outer_iterations, rep.converged)
        reports.append(rep)
    fields = [displacement_field(v, p, grid, (raw.w, raw.h, raw.r, raw.d))
              for v, p, raw in zip(prep, params, volumes)]
    runtime = time.perf_counter() - t_start
    return CorrectionResult(params, fields, reports, grid, prep, s_min, runtime)


def _with_levels(config: OptimizerConfig, n: int) -> OptimizerConfig:
    from dataclasses import replace
    return replace(config, level_count=n, first_level=min(config.first_level, n - 1))


def merge_volumes(result: CorrectionResult):
    """Weighted mean of all forward-warped, corrected volumes on the final grid.

    Returns:
        (values, valid) arrays laid out ``[gx, gy, z]``.
    """
    acc = np.zeros(result.grid.shape)
    wacc = np.zeros(result.grid.shape)
    for v, p, s in zip(result.volumes, result.params, result.s_min):
        t = splat_volume(v, p, result.grid, s)
        acc += t.values * t.weight
        wacc += t.weight
    valid = wacc >= result.grid.w_min
    values = np.zeros_like(acc)
    np.divide(acc, wacc, out=values, where=valid)
    return values, valid
