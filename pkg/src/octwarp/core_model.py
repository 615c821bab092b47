"""Scan geometry, the time-continuous rigid/shear transform and the illumination model.

Coordinate conventions used throughout the package:

* Moving positions are transverse pixel coordinates centered on the field of
  view, in isotropic units of ``pixel_size`` micrometers, plus the axial depth
  index.
* The "world" frame is the target frame *before* the grid resolution factor is
  applied: ``world = R(alpha0 - alpha) @ (x, y) - (t_x, t_y)``.
* Axial positions are in preprocessed (finest pyramid level) axial pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

FAST_X = "X"
FAST_Y = "Y"

# radius of the spherical retina model (mm)
RETINA_RADIUS_MM = 11.0

KNOT_FIELDS = ("t_x", "t_y", "t_z", "m", "illum_c")


@dataclass(frozen=True)
class VolumeGrid:
    """Raster-scanned log-intensity volume.

    ``voxels`` is indexed ``[slow, repeat, fast, depth]`` and ``acq_time``
    ``[slow, repeat, fast]`` (seconds).
    """

    voxels: np.ndarray
    acq_time: np.ndarray
    spacing_x: float
    spacing_y: float
    spacing_z: float
    fast_axis: str = FAST_X

    def __post_init__(self):
        if self.voxels.ndim != 4:
            raise ValueError("voxels must be 4-D [slow, repeat, fast, depth]")
        if self.acq_time.shape != self.voxels.shape[:3]:
            raise ValueError(
                f"acq_time shape {self.acq_time.shape} != {self.voxels.shape[:3]}")
        if self.fast_axis not in (FAST_X, FAST_Y):
            raise ValueError(f"fast_axis must be 'X' or 'Y', got {self.fast_axis!r}")

    @property
    def h(self) -> int:
        return self.voxels.shape[0]

    @property
    def r(self) -> int:
        return self.voxels.shape[1]

    @property
    def w(self) -> int:
        return self.voxels.shape[2]

    @property
    def d(self) -> int:
        return self.voxels.shape[3]

    @property
    def n_ascans(self) -> int:
        return self.h * self.r * self.w

    @property
    def n_bscans(self) -> int:
        return self.h * self.r

    @property
    def spacing_fast(self) -> float:
        return self.spacing_x if self.fast_axis == FAST_X else self.spacing_y

    @property
    def spacing_slow(self) -> float:
        return self.spacing_y if self.fast_axis == FAST_X else self.spacing_x

    def validate(self, min_size: int = 8) -> None:
        """Raise ``ValueError`` if any structural invariant is violated."""
        if min(self.w, self.h, self.d) < min_size:
            raise ValueError(f"w, h, d must be >= {min_size}: {self.voxels.shape}")
        if self.r < 1:
            raise ValueError("repeats must be >= 1")
        if min(self.spacing_x, self.spacing_y, self.spacing_z) <= 0:
            raise ValueError("spacings must be positive")
        t = self.acq_time.reshape(-1)
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("acq_time must be strictly increasing in raster order")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("voxel intensities must be finite")

    def ascans(self) -> np.ndarray:
        """Voxels as ``(n_ascans, d)`` in acquisition order (view when possible)."""
        return self.voxels.reshape(self.n_ascans, self.d)

    def with_voxels(self, voxels: np.ndarray, spacing_z: float | None = None) -> "VolumeGrid":
        return replace(self, voxels=voxels,
                       spacing_z=self.spacing_z if spacing_z is None else spacing_z)

    def knot_times(self) -> np.ndarray:
        """Mean acquisition time of every B-scan repeat, in acquisition order."""
        return self.acq_time.reshape(self.n_bscans, self.w).mean(axis=1)

    def transverse_positions(self, pixel_size: float) -> tuple[np.ndarray, np.ndarray]:
        """Centered (x, y) of every A-scan in isotropic pixels of ``pixel_size`` µm."""
        fast = (np.arange(self.w) - (self.w - 1) / 2.0) * self.spacing_fast / pixel_size
        slow = (np.arange(self.h) - (self.h - 1) / 2.0) * self.spacing_slow / pixel_size
        fast_g = np.broadcast_to(fast[None, None, :], (self.h, self.r, self.w)).reshape(-1)
        slow_g = np.broadcast_to(slow[:, None, None], (self.h, self.r, self.w)).reshape(-1)
        if self.fast_axis == FAST_X:
            return fast_g.copy(), slow_g.copy()
        return slow_g.copy(), fast_g.copy()

    def fov_radius(self, pixel_size: float) -> float:
        """Half-diagonal of the scanned field of view in isotropic pixels."""
        ex = (self.w - 1) * self.spacing_fast / pixel_size / 2.0
        ey = (self.h - 1) * self.spacing_slow / pixel_size / 2.0
        return math.hypot(ex, ey)


@dataclass
class MotionParameterSet:
    """Per-scan spline knots of the time-continuous transform.

    ``t_x``/``t_y`` are in isotropic transverse pixels, ``t_z`` in axial pixels,
    ``m`` is the axial shear along the fast axis (``m^x`` for X-fast scans,
    ``m^y`` otherwise), ``illum_c`` in log-intensity units. ``alpha`` is one
    torsion angle per scan.
    """

    knot_times: np.ndarray
    t_x: np.ndarray
    t_y: np.ndarray
    t_z: np.ndarray
    m: np.ndarray
    illum_c: np.ndarray
    alpha: float = 0.0
    alpha0: float = 0.0
    fast_axis: str = FAST_X

    @classmethod
    def zeros(cls, knot_times, alpha0: float = 0.0, fast_axis: str = FAST_X) -> "MotionParameterSet":
        kt = np.asarray(knot_times, dtype=np.float64)
        z = lambda: np.zeros(kt.size)  # noqa: E731
        return cls(kt, z(), z(), z(), z(), z(), 0.0, alpha0, fast_axis)

    @classmethod
    def for_volume(cls, vol: VolumeGrid, alpha0: float = 0.0) -> "MotionParameterSet":
        return cls.zeros(vol.knot_times(), alpha0, vol.fast_axis)

    @property
    def n_knots(self) -> int:
        return self.knot_times.size

    def copy(self) -> "MotionParameterSet":
        return MotionParameterSet(
            self.knot_times.copy(), self.t_x.copy(), self.t_y.copy(), self.t_z.copy(),
            self.m.copy(), self.illum_c.copy(), float(self.alpha), float(self.alpha0),
            self.fast_axis)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, f) for f in KNOT_FIELDS] + [[self.alpha]])

    def from_vector(self, vec: np.ndarray) -> "MotionParameterSet":
        n = self.n_knots
        parts = {f: np.array(vec[i * n:(i + 1) * n], dtype=np.float64)
                 for i, f in enumerate(KNOT_FIELDS)}
        return MotionParameterSet(self.knot_times.copy(), alpha=float(vec[len(KNOT_FIELDS) * n]),
                                  alpha0=self.alpha0, fast_axis=self.fast_axis, **parts)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.to_vector())))

    def reframed(self, alpha0: float) -> "MotionParameterSet":
        """Same physical correction expressed for a different constant rotation."""
        out = self.copy()
        c, s = math.cos(alpha0 - self.alpha0), math.sin(alpha0 - self.alpha0)
        out.t_x = c * self.t_x - s * self.t_y
        out.t_y = s * self.t_x + c * self.t_y
        out.alpha0 = alpha0
        return out


@dataclass
class IlluminationModel:
    s_min: float
    knot_times: np.ndarray
    illum_c: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.illum_c is None:
            self.illum_c = np.zeros(np.size(self.knot_times))
        if not math.isfinite(self.s_min):
            raise ValueError("s_min must be finite")


# --------------------------------------------------------------------------
# Splines
# --------------------------------------------------------------------------

def catmull_rom_tangent_matrix(knot_times: np.ndarray) -> sparse.csr_matrix:
    """Linear map from knot values to Catmull-Rom tangents (value/second)."""
    t = np.asarray(knot_times, dtype=np.float64)
    n = t.size
    rows, cols, vals = [], [], []
    for j in range(n):
        lo, hi = max(j - 1, 0), min(j + 1, n - 1)
        dt = t[hi] - t[lo]
        rows += [j, j]
        cols += [hi, lo]
        vals += [1.0 / dt, -1.0 / dt]
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def spline_basis(knot_times, taus) -> sparse.csr_matrix:
    """Sparse ``(len(taus), n_knots)`` matrix evaluating the Hermite spline.

    Tangents are centered differences over knot times (one-sided at the ends);
    ``tau`` outside the knot range is clamped. With a single knot the spline is
    constant.
    """
    t = np.asarray(knot_times, dtype=np.float64)
    tau = np.atleast_1d(np.asarray(taus, dtype=np.float64))
    n = t.size
    if n == 0:
        raise ValueError("at least one knot is required")
    if n == 1:
        return sparse.csr_matrix(np.ones((tau.size, 1)))
    if not np.all(np.diff(t) > 0):
        raise ValueError("knot_times must be strictly increasing")
    tau = np.clip(tau, t[0], t[-1])
    j = np.clip(np.searchsorted(t, tau, side="right") - 1, 0, n - 2)
    dt = t[j + 1] - t[j]
    u = (tau - t[j]) / dt
    h00 = (2 * u - 3) * u * u + 1
    h10 = ((u - 2) * u + 1) * u * dt
    h01 = (3 - 2 * u) * u * u
    h11 = (u - 1) * u * u * dt
    values = sparse.csr_matrix((h00, (np.arange(tau.size), j)), shape=(tau.size, n)) \
        + sparse.csr_matrix((h01, (np.arange(tau.size), j + 1)), shape=(tau.size, n))
    tangents = catmull_rom_tangent_matrix(t)
    slope = sparse.csr_matrix((h10, (np.arange(tau.size), j)), shape=(tau.size, n)) \
        + sparse.csr_matrix((h11, (np.arange(tau.size), j + 1)), shape=(tau.size, n))
    return (values + slope @ tangents).tocsr()


def eval_param_spline(knots, knot_times, tau):
    """Evaluate the cubic Hermite (Catmull-Rom) interpolant of ``knots`` at ``tau``."""
    knots = np.atleast_1d(np.asarray(knots, dtype=np.float64))
    if knots.size < 2:
        val = np.full(np.shape(tau), knots[0]) if np.ndim(tau) else float(knots[0])
        return val
    out = spline_basis(knot_times, tau) @ knots
    return out if np.ndim(tau) else float(out[0])


# --------------------------------------------------------------------------
# Transform
# --------------------------------------------------------------------------

def _param_at(params: MotionParameterSet, name: str, tau):
    return eval_param_spline(getattr(params, name), params.knot_times, tau)


def shear_pair(params: MotionParameterSet, tau) -> tuple[float, float]:
    """(m^x, m^y) at ``tau``; only the fast-axis component is nonzero."""
    m = _param_at(params, "m", tau)
    return (m, 0.0) if params.fast_axis == FAST_X else (0.0, m)


def eval_transform(x, tau, params: MotionParameterSet) -> np.ndarray:
    """Map a moving position ``(x, y, z)`` acquired at ``tau`` to the world frame."""
    x = np.asarray(x, dtype=np.float64)
    tx, ty, tz = (_param_at(params, n, tau) for n in ("t_x", "t_y", "t_z"))
    mx, my = shear_pair(params, tau)
    th = -params.alpha + params.alpha0
    c, s = math.cos(th), math.sin(th)
    return np.array([
        c * x[0] - s * x[1] - tx,
        s * x[0] + c * x[1] - ty,
        -mx * x[0] - my * x[1] + x[2] - tz,
    ])


def invert_transform(xw, tau, params: MotionParameterSet) -> np.ndarray:
    """Inverse of :func:`eval_transform` at fixed ``tau``."""
    xw = np.asarray(xw, dtype=np.float64)
    tx, ty, tz = (_param_at(params, n, tau) for n in ("t_x", "t_y", "t_z"))
    mx, my = shear_pair(params, tau)
    th = -params.alpha + params.alpha0
    c, s = math.cos(th), math.sin(th)
    a, b = xw[0] + tx, xw[1] + ty
    x = c * a + s * b
    y = -s * a + c * b
    return np.array([x, y, xw[2] + tz + mx * x + my * y])


def eval_illumination(s, tau, model: IlluminationModel):
    """Apply the background-gated illumination offset ``s + [s > s_min] c(tau)``."""
    c = eval_param_spline(model.illum_c, model.knot_times, tau)
    s = np.asarray(s, dtype=np.float64)
    out = np.where(s > model.s_min, s + c, s)
    return float(out) if out.ndim == 0 else out


def angle_to_retina_distance(arcsec: float) -> float:
    """Arc length in µm on a 22 mm diameter spherical retina."""
    return math.radians(arcsec / 3600.0) * RETINA_RADIUS_MM * 1000.0
