"""Joint registration objective: orthogonal data terms, temporal smoothness and
the zero-mean gauge constraint, with analytic gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .core_model import FAST_X, KNOT_FIELDS, MotionParameterSet, VolumeGrid
from .forward_warp import ScanGeometry, TargetGridSpec, WarpedTarget, ascan_pose, splat_volume

log = logging.getLogger(__name__)

# parameter types carrying a temporal smoothness penalty
REG_TYPES = KNOT_FIELDS

DEFAULT_S_MIN_PERCENTILE = 1.0
DEFAULT_S_MIN_OFFSET = 2.0


def default_s_min(vol: VolumeGrid, percentile: float = DEFAULT_S_MIN_PERCENTILE,
                  offset: float = DEFAULT_S_MIN_OFFSET) -> float:
    return float(np.percentile(vol.voxels, percentile) + offset)


def orthogonal_targets(volumes) -> list[list[int]]:
    """For each volume, the indices of volumes with the other fast axis."""
    return [[j for j, t in enumerate(volumes) if t.fast_axis != m.fast_axis]
            for m in volumes]


@dataclass
class DataTermResult:
    loss: float
    per_ascan: np.ndarray  # (n, 6) partial sums, summed over targets
    n_valid: int
    pairs: list = field(default_factory=list)  # target indices with valid overlap

    @property
    def non_overlap(self) -> bool:
        return self.n_valid == 0


def _data_partials(vals, illum, pose, tgt: WarpedTarget) -> np.ndarray:
    out = np.empty((vals.shape[0], 6))
    g = tgt.grid
    K.data_term_ascans(vals, illum, pose.c, pose.gx, pose.gy, pose.shift, tgt.values,
                       tgt.valid4, g.offsets, int(g.tile_shift[0]), int(g.tile_shift[1]), out)
    return out


def data_term(moving: VolumeGrid, params: MotionParameterSet, targets, s_min: float = -np.inf,
              geom: ScanGeometry | None = None, target_ids=None) -> DataTermResult:
    """Sum of squared differences between the illumination-corrected moving
    voxels and the tricubic interpolation of each warped target at their
    corrected positions. Samples without a fully valid 4^3 neighborhood are
    skipped."""
    if not targets:
        raise ValueError("data term needs at least one target")
    grid = targets[0].grid
    if geom is None:
        geom = ScanGeometry.of(moving, grid.pixel_size, params.knot_times)
    vals = np.ascontiguousarray(moving.ascans(), dtype=np.float64)
    illum = (vals > s_min).astype(np.float64)
    pose = ascan_pose(geom, params, grid)
    total = np.zeros((vals.shape[0], 6))
    pairs = []
    for n, tgt in enumerate(targets):
        part = _data_partials(vals, illum, pose, tgt)
        if part[:, 5].sum() > 0:
            pairs.append(n if target_ids is None else target_ids[n])
        total += part
    n_valid = int(total[:, 5].sum())
    if n_valid == 0:
        log.warning("NON_OVERLAP: no valid target samples for %s-fast volume", moving.fast_axis)
    return DataTermResult(float(total[:, 0].sum()), total, n_valid, pairs)


def data_gradient(res: DataTermResult, params: MotionParameterSet, geom: ScanGeometry,
                  grid: TargetGridSpec) -> MotionParameterSet:
    """Knot gradient of a data term from its per-A-scan partial sums."""
    p = res.per_ascan
    pose = ascan_pose(geom, params, grid)
    s, ls = grid.scale, grid.level_scale
    g_tx = 2.0 * s * p[:, 1]
    g_ty = 2.0 * s * p[:, 2]
    g_tz = 2.0 * p[:, 3] / ls
    g_m = 2.0 * geom.xfast * p[:, 3] / ls
    g_c = 2.0 * p[:, 4]
    g_alpha = float(np.sum(-2.0 * s * (p[:, 1] * pose.yr - p[:, 2] * pose.xr)))
    Bt = geom.basis.T
    return MotionParameterSet(params.knot_times.copy(), Bt @ g_tx, Bt @ g_ty, Bt @ g_tz,
                              Bt @ g_m, Bt @ g_c, g_alpha, params.alpha0, params.fast_axis)


def regularizer(all_params, weights: dict) -> float:
    """Weighted squared differences of temporally consecutive knots."""
    total = 0.0
    for p in all_params:
        for name in REG_TYPES:
            lam = weights.get(name, 0.0)
            if lam:
                total += lam * float(np.sum(np.diff(getattr(p, name)) ** 2))
    return total


def regularizer_gradient(all_params, weights: dict) -> list[MotionParameterSet]:
    out = []
    for p in all_params:
        g = {}
        for name in REG_TYPES:
            k = getattr(p, name)
            lam = weights.get(name, 0.0)
            gk = np.zeros_like(k)
            if lam and k.size > 1:
                dk = np.diff(k)
                gk[:-1] -= 2.0 * lam * dk
                gk[1:] += 2.0 * lam * dk
            g[name] = gk
        out.append(MotionParameterSet(p.knot_times.copy(), alpha=0.0, alpha0=p.alpha0,
                                      fast_axis=p.fast_axis, **g))
    return out


def zero_mean_groups(all_params) -> list[tuple[str, list[tuple[int, str]]]]:
    """Parameter types centered jointly across scans. The fast-axis shear is two
    types (m^x of X-fast scans, m^y of Y-fast scans)."""
    groups = [(name, [(i, name) for i in range(len(all_params))])
              for name in ("t_x", "t_y", "t_z", "illum_c")]
    groups.append(("m_x", [(i, "m") for i, p in enumerate(all_params) if p.fast_axis == FAST_X]))
    groups.append(("m_y", [(i, "m") for i, p in enumerate(all_params) if p.fast_axis != FAST_X]))
    groups.append(("alpha", [(i, "alpha") for i in range(len(all_params))]))
    return [g for g in groups if g[1]]


def project_zero_mean(all_params) -> list[MotionParameterSet]:
    """Subtract, per parameter type, the mean over all knots of all scans."""
    out = [p.copy() for p in all_params]
    for _, members in zero_mean_groups(out):
        vals = [np.atleast_1d(getattr(out[i], f)) for i, f in members]
        mean = float(np.concatenate(vals).mean())
        for i, f in members:
            if f == "alpha":
                out[i].alpha = out[i].alpha - mean
            else:
                setattr(out[i], f, getattr(out[i], f) - mean)
    return out


@dataclass
class LevelVolume:
    """A moving volume at one pyramid level, with cached per-A-scan data."""

    vol: VolumeGrid
    geom: ScanGeometry
    vals: np.ndarray
    illum: np.ndarray
    s_min: float

    @classmethod
    def build(cls, vol: VolumeGrid, s_min: float, pixel_size: float, knot_times=None):
        geom = ScanGeometry.of(vol, pixel_size, knot_times)
        vals = np.ascontiguousarray(vol.ascans(), dtype=np.float64)
        return cls(vol, geom, vals, (vals > s_min).astype(np.float64), s_min)


@dataclass
class ObjectiveState:
    """Everything needed to evaluate the joint objective at one pyramid level.

    The data term of each volume is normalized by its samples per B-scan
    (``w * d``) so step sizes and regularizer weights do not depend on the
    volume size.
    """

    volumes: list            # LevelVolume
    params: list             # MotionParameterSet
    grid: TargetGridSpec
    reg_weights: dict
    targets: list = None     # WarpedTarget per volume
    target_ids: list = None  # orthogonal partners per volume

    def __post_init__(self):
        if self.target_ids is None:
            self.target_ids = orthogonal_targets([lv.vol for lv in self.volumes])
        for i, ids in enumerate(self.target_ids):
            if not ids:
                raise ValueError(f"volume {i} has no orthogonal partner")

    def norm(self, i: int) -> float:
        v = self.volumes[i].vol
        return float(v.w * v.d)

    def warp_targets(self) -> list[WarpedTarget]:
        self.targets = [splat_volume(lv.vol, p, self.grid, lv.s_min, lv.geom)
                        for lv, p in zip(self.volumes, self.params)]
        return self.targets

    def data_terms(self, params=None) -> list[DataTermResult]:
        params = self.params if params is None else params
        if self.targets is None:
            self.warp_targets()
        out = []
        for i, (lv, p) in enumerate(zip(self.volumes, params)):
            pose = ascan_pose(lv.geom, p, self.grid)
            total = np.zeros((lv.vals.shape[0], 6))
            pairs = []
            for j in self.target_ids[i]:
                part = _data_partials(lv.vals, lv.illum, pose, self.targets[j])
                if part[:, 5].sum() > 0:
                    pairs.append(j)
                total += part
            out.append(DataTermResult(float(total[:, 0].sum()), total, int(total[:, 5].sum()), pairs))
        return out

    def objective(self, params=None) -> float:
        params = self.params if params is None else params
        res = self.data_terms(params)
        return sum(r.loss / self.norm(i) for i, r in enumerate(res)) \
            + regularizer(params, self.reg_weights)

    def objective_and_gradient(self, params=None):
        params = self.params if params is None else params
        res = self.data_terms(params)
        reg_g = regularizer_gradient(params, self.reg_weights)
        grads = []
        for i, (r, lv, p) in enumerate(zip(res, self.volumes, params)):
            g = data_gradient(r, p, lv.geom, self.grid)
            nrm = self.norm(i)
            vec = g.to_vector() / nrm + reg_g[i].to_vector()
            grads.append(p.from_vector(vec))
        J = sum(r.loss / self.norm(i) for i, r in enumerate(res)) + regularizer(params, self.reg_weights)
        return J, grads, res


def gradient(state: ObjectiveState) -> list[MotionParameterSet]:
    """Analytic gradient of the objective for every knot of every scan
    (targets held fixed)."""
    return state.objective_and_gradient()[1]
