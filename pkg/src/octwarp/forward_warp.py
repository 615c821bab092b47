"""Forward warping of target volumes onto a regular registration grid.

The separable scheme resamples each A-scan axially with Catmull-Rom weights so
its samples land on the target planes, then splats the aligned samples into
the 4x4 transverse neighborhood with a truncated Gaussian. Coefficients for
both stages are computed once per A-scan and shared along depth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .core_model import FAST_X, MotionParameterSet, VolumeGrid, spline_basis

SIGMA = 0.5
W_MIN = 0.25
TILE = 16

SEPARABLE = "separable"
NAIVE = "naive"


def make_offset_table(seed: int | None = 0) -> np.ndarray:
    """Stratified 4x4 table of axial offsets ``{0, 1/16, ..., 15/16}``."""
    rng = np.random.default_rng(seed)
    return (rng.permutation(16) / 16.0).reshape(4, 4)


@dataclass(frozen=True)
class TargetGridSpec:
    """Geometry of one registration target grid.

    Grid coordinates are ``g = world * scale + center`` transversely and level
    axial pixels axially; column ``(ix, iy)`` has its planes shifted by
    ``offsets[(ix + sx) % 4, (iy + sy) % 4]``.
    """

    shape: tuple
    scale: float
    center: tuple
    offsets: np.ndarray
    tile_shift: tuple = (0, 0)
    resolution_factor: float = 1.0
    level_scale: float = 1.0
    pixel_size: float = 1.0
    alpha0: float = 0.0
    w_min: float = W_MIN
    sigma: float = SIGMA

    def __post_init__(self):
        if not 0.5 < self.resolution_factor <= 1.0:
            raise ValueError(f"resolution factor {self.resolution_factor} not in (0.5, 1]")
        off = np.asarray(self.offsets, dtype=np.float64)
        if off.shape != (4, 4):
            raise ValueError("offset table must be 4x4")
        if np.any(off < 0) or np.any(off >= 1):
            raise ValueError("offsets must lie in [0, 1)")
        n_distinct = np.unique(off).size
        if n_distinct not in (1, 16):
            raise ValueError("offsets must be all distinct (or all equal for an unshifted grid)")
        object.__setattr__(self, "offsets", off)

    @property
    def descriptor(self) -> dict:
        return {"alpha0": self.alpha0, "resolution_factor": self.resolution_factor,
                "tile_shift": tuple(int(s) for s in self.tile_shift)}

    def to_grid(self, X, Y):
        return X * self.scale + self.center[0], Y * self.scale + self.center[1]


def make_grid(volumes, resolution_factor: float = 5 / 6, alpha0: float = math.pi / 4,
              level_scale: float = 1.0, depth: int | None = None, offsets=None,
              seed: int | None = 0, tile_shift=(0, 0), margin: float = 6.0,
              w_min: float = W_MIN, pixel_size: float | None = None) -> TargetGridSpec:
    """Target grid covering the (rotated) fields of view of ``volumes``.

    ``depth`` is the number of axial planes at this level (defaults to the
    deepest volume divided by ``level_scale``).
    """
    if pixel_size is None:
        pixel_size = min(min(v.spacing_x, v.spacing_y) for v in volumes)
    radius = max(v.fov_radius(pixel_size) for v in volumes) + margin
    scale = resolution_factor / level_scale
    half = int(math.ceil(radius * scale)) + 2
    n = 2 * half + 1
    # align A-scan positions of the first volume with nodes when the grid is unrotated
    v0 = volumes[0]
    nx_vol = v0.w if v0.fast_axis == FAST_X else v0.h
    ny_vol = v0.h if v0.fast_axis == FAST_X else v0.w
    cx = half + math.fmod((nx_vol - 1) / 2.0 * v0.spacing_x / pixel_size * scale, 1.0)
    cy = half + math.fmod((ny_vol - 1) / 2.0 * v0.spacing_y / pixel_size * scale, 1.0)
    if depth is None:
        depth = int(max(v.d for v in volumes) // level_scale)
    if offsets is None:
        offsets = make_offset_table(seed)
    return TargetGridSpec((n, n, int(depth)), scale, (cx, cy), np.asarray(offsets, dtype=np.float64),
                          tuple(tile_shift), resolution_factor, level_scale, pixel_size, alpha0, w_min)


def unit_grid(volumes, depth: int | None = None, margin: float = 6.0, alpha0: float = 0.0) -> TargetGridSpec:
    """Grid at unit resolution with no pseudo-random axial offsets."""
    return make_grid(volumes, resolution_factor=1.0, alpha0=alpha0, depth=depth,
                     offsets=np.zeros((4, 4)), margin=margin)


@dataclass
class ScanGeometry:
    """Per-A-scan quantities of a volume that do not depend on the parameters."""

    times: np.ndarray
    px: np.ndarray
    py: np.ndarray
    xfast: np.ndarray
    basis: object  # sparse (n_ascans, n_knots)

    @classmethod
    def of(cls, vol: VolumeGrid, pixel_size: float, knot_times=None) -> "ScanGeometry":
        times = vol.acq_time.reshape(-1).astype(np.float64)
        px, py = vol.transverse_positions(pixel_size)
        kt = vol.knot_times() if knot_times is None else knot_times
        xfast = px if vol.fast_axis == FAST_X else py
        return cls(times, px, py, xfast, spline_basis(kt, times))


@dataclass
class AscanPose:
    """Per-A-scan transform evaluated for one parameter set and grid."""

    gx: np.ndarray
    gy: np.ndarray
    shift: np.ndarray   # axial shift in level pixels
    xr: np.ndarray      # rotated, untranslated world x
    yr: np.ndarray
    c: np.ndarray       # illumination offset per A-scan


def ascan_pose(geom: ScanGeometry, params: MotionParameterSet, grid: TargetGridSpec) -> AscanPose:
    B = geom.basis
    tx, ty, tz, m, c = (B @ getattr(params, f) for f in ("t_x", "t_y", "t_z", "m", "illum_c"))
    th = -params.alpha + params.alpha0
    ct, st = math.cos(th), math.sin(th)
    xr = ct * geom.px - st * geom.py
    yr = st * geom.px + ct * geom.py
    gx, gy = grid.to_grid(xr - tx, yr - ty)
    shift = -(m * geom.xfast + tz) / grid.level_scale
    return AscanPose(gx, gy, shift, xr, yr, c)


@dataclass
class WarpedTarget:
    values: np.ndarray
    weight: np.ndarray
    valid: np.ndarray
    grid: TargetGridSpec
    coef_count: int = 0
    valid4: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.valid4 is None:
            self.valid4 = K.valid_runs4(self.valid)


def illumination_corrected(vals: np.ndarray, c: np.ndarray, s_min: float) -> np.ndarray:
    ind = vals > s_min
    return vals + ind * c[:, None], ind


def _tiles(gx, gy, shape):
    nx, ny = shape[0], shape[1]
    ix0 = np.floor(gx).astype(np.int64) - 1
    iy0 = np.floor(gy).astype(np.int64) - 1
    inside = (ix0 >= 0) & (iy0 >= 0) & (ix0 + 3 < nx) & (iy0 + 3 < ny)
    same = inside & (ix0 // TILE == (ix0 + 3) // TILE) & (iy0 // TILE == (iy0 + 3) // TILE)
    nty = (ny + TILE - 1) // TILE
    ntiles = ((nx + TILE - 1) // TILE) * nty
    tid = np.where(same, (ix0 // TILE) * nty + iy0 // TILE, -1)
    idx = np.nonzero(same)[0]
    items = idx[np.argsort(tid[idx], kind="stable")].astype(np.int64)
    starts = np.searchsorted(tid[items], np.arange(ntiles + 1)).astype(np.int64)
    overflow = np.nonzero(~same)[0].astype(np.int64)
    return starts, items, overflow


def _finish(acc, wacc, grid, count) -> WarpedTarget:
    valid = wacc >= grid.w_min
    values = np.zeros_like(acc)
    np.divide(acc, wacc, out=values, where=valid)
    return WarpedTarget(values, wacc, valid, grid, int(count))


def _prepare(vol, params, grid, s_min, geom):
    if geom is None:
        geom = ScanGeometry.of(vol, grid.pixel_size, params.knot_times)
    pose = ascan_pose(geom, params, grid)
    vals = vol.ascans().astype(np.float64)
    if np.any(pose.c != 0):
        vals, _ = illumination_corrected(vals, pose.c, s_min)
    return np.ascontiguousarray(vals), pose


def splat_volume(vol: VolumeGrid, params: MotionParameterSet, grid: TargetGridSpec,
                 s_min: float = -np.inf, geom: ScanGeometry | None = None) -> WarpedTarget:
    """Forward-warp ``vol`` through its motion parameters onto ``grid`` (separable scheme)."""
    vals, pose = _prepare(vol, params, grid, s_min, geom)
    acc = np.zeros(grid.shape)
    wacc = np.zeros(grid.shape)
    counts = np.zeros(vol.n_ascans, dtype=np.int64)
    starts, items, overflow = _tiles(pose.gx, pose.gy, grid.shape)
    K.splat_separable(vals, pose.gx, pose.gy, pose.shift, grid.offsets,
                      int(grid.tile_shift[0]), int(grid.tile_shift[1]), acc, wacc,
                      grid.sigma, starts, items, overflow, counts)
    return _finish(acc, wacc, grid, counts.sum())


def naive_scatter_oracle(vol: VolumeGrid, params: MotionParameterSet, grid: TargetGridSpec,
                         s_min: float = -np.inf, geom: ScanGeometry | None = None) -> WarpedTarget:
    """Reference warp: every voxel splats into its full 4x4x4 neighborhood."""
    vals, pose = _prepare(vol, params, grid, s_min, geom)
    acc = np.zeros(grid.shape)
    wacc = np.zeros(grid.shape)
    count = K.splat_naive(vals, pose.gx, pose.gy, pose.shift, grid.offsets,
                          int(grid.tile_shift[0]), int(grid.tile_shift[1]), acc, wacc, grid.sigma)
    return _finish(acc, wacc, grid, count)


def coefficient_count(n: int, scheme: str) -> int:
    """Weight computations needed to warp an ``n``-cubed volume."""
    if n < 1:
        raise ValueError("side length must be >= 1")
    if scheme == NAIVE:
        return n ** 3 * 4 ** 3
    if scheme == SEPARABLE:
        return n ** 2 * (4 + 4 ** 2)
    raise ValueError(f"unknown scheme {scheme!r}")


def interp_many(tgt: WarpedTarget, gx, gy, u) -> np.ndarray:
    """Vectorized tricubic interpolation; columns: value, d/dgx, d/dgy, d/du, valid."""
    gx, gy, u = (np.ascontiguousarray(np.atleast_1d(a), dtype=np.float64) for a in (gx, gy, u))
    out = np.empty((gx.size, 5))
    K.interp_points(tgt.values, tgt.valid4, tgt.grid.offsets, int(tgt.grid.tile_shift[0]),
                    int(tgt.grid.tile_shift[1]), gx, gy, u, out)
    return out


def interp_target(tgt: WarpedTarget, pos) -> float | None:
    """Tricubic Catmull-Rom value at grid position ``(gx, gy, u)``; ``None`` if invalid."""
    row = interp_many(tgt, [pos[0]], [pos[1]], [pos[2]])[0]
    return float(row[0]) if row[4] else None
