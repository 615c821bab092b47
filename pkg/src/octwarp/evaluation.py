"""Displacement-field reproducibility: global alignment and distance statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_model import FAST_X

EXCLUDE_FRACTION = 0.05

# second registration configuration of the dual-grid protocol: (alpha0, factor, tile shift)
DUAL_GRID_CONFIGS = (
    (math.pi / 5, 5 / 6, (0, 0)),
    (math.pi / 6, 4 / 5, (2, 2)),
)


@dataclass
class DisplacementField:
    """Corrected position of every A-scan (reference depth 0) in target pixels.

    ``positions[:, :2]`` are transverse target-grid pixels relative to the
    grid center, i.e. world pixels scaled by ``resolution_factor`` and
    rotated by ``alpha0``; ``positions[:, 2]`` is in axial pixels.
    """

    positions: np.ndarray
    times: np.ndarray
    dims: tuple  # (w, h, r, d) of the source volume
    fast_axis: str = FAST_X
    alpha: float = 0.0
    alpha0: float = 0.0
    resolution_factor: float = 1.0
    tile_shift: tuple = (0, 0)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        w, h, r, _ = self.dims
        if self.positions.shape != (w * h * r, 3):
            raise ValueError(f"expected {w * h * r} positions, got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("displacement field contains non-finite values")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def descriptor(self) -> dict:
        return {"alpha0": self.alpha0, "resolution_factor": self.resolution_factor,
                "tile_shift": tuple(self.tile_shift)}

    def slow_index(self) -> np.ndarray:
        w, h, r, _ = self.dims
        return np.repeat(np.arange(h), r * w)

    def fast_index(self) -> np.ndarray:
        w, h, r, _ = self.dims
        return np.tile(np.arange(w), h * r)

    def bscan_centers(self) -> np.ndarray:
        """Indices of the central A-scan of every B-scan repeat."""
        w, h, r, _ = self.dims
        return np.arange(h * r) * w + w // 2

    def common(self) -> np.ndarray:
        """Positions in unrotated input pixels (undo resolution factor and alpha0)."""
        p = self.positions
        x, y = p[:, 0] / self.resolution_factor, p[:, 1] / self.resolution_factor
        c, s = math.cos(self.alpha0), math.sin(self.alpha0)
        return np.column_stack([c * x + s * y, -s * x + c * y, p[:, 2]])


def _points(f) -> np.ndarray:
    return f.common() if isinstance(f, DisplacementField) else np.asarray(f, dtype=np.float64)


@dataclass
class RigidFit:
    """Rigid-plus-shear transform at a fixed time: rotate by ``-alpha``,
    subtract ``(t_x, t_y)``; ``z' = -m_x x - m_y y + z - t_z``."""

    t_x: float
    t_y: float
    t_z: float
    m_x: float
    m_y: float
    alpha: float
    residual: float = 0.0

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(-self.alpha), math.sin(-self.alpha)
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        return np.column_stack([c * x - s * y - self.t_x, s * x + c * y - self.t_y,
                                -self.m_x * x - self.m_y * y + z - self.t_z])


@dataclass
class AffineLikeTransform:
    a_xx: float = 1.0
    a_xy: float = 0.0
    a_yx: float = 0.0
    a_yy: float = 1.0
    m_x: float = 0.0
    m_y: float = 0.0
    m_xy: float = 0.0
    t_x: float = 0.0
    t_y: float = 0.0
    t_z: float = 0.0
    residual: float = field(default=0.0, compare=False)

    def matrix(self) -> np.ndarray:
        """3x5 matrix acting on ``(x, y, z, xy, 1)``."""
        return np.array([
            [self.a_xx, self.a_xy, 0.0, 0.0, self.t_x],
            [self.a_yx, self.a_yy, 0.0, 0.0, self.t_y],
            [self.m_x, self.m_y, 1.0, self.m_xy, self.t_z],
        ])

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        design = np.column_stack([x, y, z, x * y, np.ones_like(x)])
        return design @ self.matrix().T


def _check_transverse_rank(a: np.ndarray) -> None:
    centered = a[:, :2] - a[:, :2].mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv.size < 2 or sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise ValueError("degenerate alignment: transverse positions are collinear")


def _golden_min(fun, lo: float, hi: float, tol: float = 1e-12):
    """Golden-section minimization of a unimodal function on [lo, hi]."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def fit_rigid(field_a, field_b, max_angle: float = math.radians(10.0)) -> RigidFit:
    """Least-squares rigid (+ axial shear) transform taking A onto B.

    The rotation angle is found by golden-section search over
    ``[-max_angle, max_angle]``; for a fixed angle the transverse translation
    is the difference of centroids. The axial row is linear in the original
    transverse coordinates and solved separately.

    Args:
        field_a: DisplacementField or (n, 3) array of points to move.
        field_b: DisplacementField or (n, 3) array of reference points.
        max_angle: search bound on the rotation in radians.

    Returns:
        RigidFit with the summed squared residual.
    """
    a, b = _points(field_a), _points(field_b)
    if a.shape != b.shape:
        raise ValueError("fields cover different A-scans")
    _check_transverse_rank(a)
    ac = a[:, :2] - a[:, :2].mean(axis=0)
    bc = b[:, :2] - b[:, :2].mean(axis=0)

    def transverse_cost(alpha):
        c, s = math.cos(alpha), math.sin(alpha)
        rx = c * ac[:, 0] + s * ac[:, 1] - bc[:, 0]
        ry = -s * ac[:, 0] + c * ac[:, 1] - bc[:, 1]
        return float(np.sum(rx * rx + ry * ry))

    alpha = _golden_min(transverse_cost, -max_angle, max_angle)
    c, s = math.cos(-alpha), math.sin(-alpha)
    am, bm = a[:, :2].mean(axis=0), b[:, :2].mean(axis=0)
    t_x = c * am[0] - s * am[1] - bm[0]
    t_y = s * am[0] + c * am[1] - bm[1]
    design = np.column_stack([-a[:, 0], -a[:, 1], -np.ones(a.shape[0])])
    (m_x, m_y, t_z), *_ = np.linalg.lstsq(design, b[:, 2] - a[:, 2], rcond=None)
    fit = RigidFit(float(t_x), float(t_y), float(t_z), float(m_x), float(m_y), float(alpha))
    fit.residual = float(np.sum((fit.apply(a) - b) ** 2))
    return fit


def fit_affine_like(field_a, field_b) -> AffineLikeTransform:
    """Linear least squares for the affine-like global alignment of A onto B."""
    a, b = _points(field_a), _points(field_b)
    if a.shape != b.shape:
        raise ValueError("fields cover different A-scans")
    x, y, z = a[:, 0], a[:, 1], a[:, 2]
    one = np.ones_like(x)
    d_xy = np.column_stack([x, y, one])
    d_z = np.column_stack([x, y, x * y, one])
    if np.linalg.matrix_rank(d_z) < 4:
        raise ValueError("rank-deficient design for affine-like fit")
    (axx, axy, tx), *_ = np.linalg.lstsq(d_xy, b[:, 0], rcond=None)
    (ayx, ayy, ty), *_ = np.linalg.lstsq(d_xy, b[:, 1], rcond=None)
    (mx, my, mxy, tz), *_ = np.linalg.lstsq(d_z, b[:, 2] - z, rcond=None)
    t = AffineLikeTransform(axx, axy, ayx, ayy, mx, my, mxy, tx, ty, tz)
    if abs(axx * ayy - axy * ayx) < 1e-12:
        raise ValueError("singular transverse block in affine-like fit")
    t.residual = float(np.sum((t.apply(a) - b) ** 2))
    return t


def kept_bscans(h: int, fraction: float = EXCLUDE_FRACTION) -> np.ndarray:
    """Boolean mask over slow indices with the first/last ``fraction`` removed."""
    n = int(round(h * fraction))
    keep = np.ones(h, dtype=bool)
    if n:
        keep[:n] = False
        keep[h - n:] = False
    return keep


def distance_stats(d) -> dict:
    d = np.asarray(d, dtype=np.float64)
    return {"median": float(np.median(d)), "frac_gt_half": float(np.mean(d > 0.5)),
            "frac_gt_one": float(np.mean(d > 1.0))}


def reproducibility_metrics(field_a: DisplacementField, field_b: DisplacementField,
                            mode: str = "affine", exclude: float = EXCLUDE_FRACTION) -> dict:
    """Align A onto B globally and summarize the remaining A-scan distances.

    Returned keys: ``median_<g>``, ``frac_gt_half_<g>``, ``frac_gt_one_<g>``
    for ``g`` in x, y, z, fast, slow, 3d; plus ``median_dist``,
    ``frac_gt_half``/``frac_gt_one`` (3-D) and the fit ``residual``.
    """
    if field_a.dims != field_b.dims or field_a.fast_axis != field_b.fast_axis:
        raise ValueError("fields describe different source volumes")
    keep = kept_bscans(field_a.dims[1], exclude)[field_a.slow_index()]
    a, b = field_a.common()[keep], field_b.common()[keep]
    if mode == "rigid":
        fit = fit_rigid(a, b)
    elif mode in ("affine", "affine-like"):
        fit = fit_affine_like(a, b)
    else:
        raise ValueError(f"unknown alignment mode {mode!r}")
    diff = np.abs(fit.apply(a) - b)
    groups = {"x": diff[:, 0], "y": diff[:, 1], "z": diff[:, 2],
              "3d": np.linalg.norm(diff, axis=1)}
    fast_x = field_a.fast_axis == FAST_X
    groups["fast"] = groups["x"] if fast_x else groups["y"]
    groups["slow"] = groups["y"] if fast_x else groups["x"]
    out = {"mode": "rigid" if mode == "rigid" else "affine", "n": int(keep.sum()),
           "residual": fit.residual}
    for g, d in groups.items():
        for k, v in distance_stats(d).items():
            out[f"{k}_{g}"] = v
    out["median_dist"] = out["median_3d"]
    out["frac_gt_half"] = out["frac_gt_half_3d"]
    out["frac_gt_one"] = out["frac_gt_one_3d"]
    return out


def truth_errors(estimates, truths, centers_only: bool = True) -> dict:
    """Compare estimated fields with simulator truth after one joint rigid fit.

    Returns median transverse (2-D) and axial errors in pixels.
    """
    est, tru = [], []
    for e, t in zip(estimates, truths):
        idx = e.bscan_centers() if centers_only else np.arange(e.n)
        est.append(e.common()[idx])
        tru.append(t.common()[idx])
    est, tru = np.concatenate(est), np.concatenate(tru)
    fit = fit_rigid(est, tru)
    diff = fit.apply(est) - tru
    trans = np.hypot(diff[:, 0], diff[:, 1])
    ax = np.abs(diff[:, 2])
    return {"median_transverse": float(np.median(trans)), "median_axial": float(np.median(ax)),
            "p90_transverse": float(np.percentile(trans, 90)),
            "p90_axial": float(np.percentile(ax, 90)), "fit": fit}


def dual_grid_protocol(volume, target1, target2, config, configs=DUAL_GRID_CONFIGS):
    """Register ``volume`` independently against two orthogonal targets using
    two different grid configurations; returns both fields of ``volume``."""
    from dataclasses import replace

    from .optimizer import correct

    fields = []
    for tgt, (alpha0, factor, shift) in zip((target1, target2), configs):
        cfg = replace(config, alpha0=alpha0, resolution_factor=factor, tile_shift=tuple(shift))
        result = correct([volume, tgt], cfg)
        fields.append(result.fields[0])
    return fields
