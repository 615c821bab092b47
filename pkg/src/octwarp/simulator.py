"""Procedural retina phantom, fixational eye-motion traces and raster scanning
with exact per-A-scan ground truth."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core_model import FAST_X, FAST_Y, VolumeGrid
from .evaluation import DisplacementField

log = logging.getLogger(__name__)

BACKGROUND = 0.0


@dataclass
class SimulatorConfig:
    """Scan geometry, motion model and noise of a synthetic acquisition.

    Lengths are micrometers, times seconds.
    """

    width: int = 64
    height: int = 64
    depth: int = 128
    repeats: int = 1
    spacing_xy: float = 12.0
    spacing_z: float = 3.0
    ascan_rate: float = 16000.0
    flyback_fraction: float = 0.25
    volume_gap: float = 0.5
    noise_sigma: float = 0.15
    dt: float = 2.5e-4  # trace sampling step
    # drift: reflected random walk
    drift: bool = True
    drift_diffusion: float = 150.0  # µm^2/s per axis
    drift_bound: float = 19.2       # ~6 arcmin
    # microsaccades
    saccades: bool = True
    n_saccades: int = 1             # used when saccade_rate == 0 and no explicit times
    saccade_rate: float = 0.0       # Poisson rate (1/s)
    saccade_times: tuple = ()       # explicit onsets (s from trace start)
    saccade_amplitude: float = 60.0
    saccade_duration: float = 0.020
    saccade_overshoot: float = 0.0  # fraction of amplitude
    # tremor: band-limited noise; amplitude is the 2-D rms
    tremor: bool = True
    tremor_amplitude: float = 1.6
    tremor_fmin: float = 30.0
    tremor_fmax: float = 100.0
    # axial motion
    axial: bool = True
    axial_diffusion: float = 40.0
    axial_sine_amplitude: float = 8.0
    axial_sine_freq: float = 1.2
    # torsion, constant within each scan
    torsion_sigma: float = 0.003
    # beam-pupil offset shear (axial µm per transverse µm along the fast axis)
    shear_x: float = 0.0
    shear_y: float = 0.0
    # global illumination offset (log units), applied to tissue only
    illum_amplitude: float = 0.0

    def __post_init__(self):
        if min(self.width, self.height, self.depth) < 8 or self.repeats < 1:
            raise ValueError("volume dimensions must be >= 8 and repeats >= 1")
        if self.saccade_duration > 0.025 or self.saccade_duration <= 0:
            raise ValueError("saccade duration must be in (0, 25 ms]")
        if self.tremor_fmax > 0.5 / self.dt:
            raise ValueError("tremor band exceeds the trace Nyquist frequency")

    def motionless(self) -> "SimulatorConfig":
        from dataclasses import replace
        return replace(self, drift=False, saccades=False, tremor=False, axial=False,
                       torsion_sigma=0.0, shear_x=0.0, shear_y=0.0, illum_amplitude=0.0)

    @property
    def line_time(self) -> float:
        """Duration of one B-scan including flyback."""
        return (self.width + round(self.flyback_fraction * self.width)) / self.ascan_rate

    @property
    def scan_duration(self) -> float:
        return self.height * self.repeats * self.line_time


# --------------------------------------------------------------------------
# Motion
# --------------------------------------------------------------------------

@dataclass
class MotionTrace:
    """Rigid eye motion sampled on a regular time grid (µm, radians)."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    components: dict = field(default_factory=dict, repr=False)
    saccade_onsets: list = field(default_factory=list)

    def at(self, tau):
        """Interpolated ``(x, y, z, theta)`` at times ``tau``."""
        tau = np.asarray(tau, dtype=np.float64)
        return tuple(np.interp(tau, self.t, v) for v in (self.x, self.y, self.z, self.theta))

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])


def _reflect(v, bound):
    """Fold a path into ``[-bound, bound]`` (reflecting walls)."""
    if bound <= 0:
        return np.zeros_like(v)
    period = 4.0 * bound
    u = np.mod(v + bound, period)
    return np.where(u < 2 * bound, u, period - u) - bound


def _band_noise(rng, n, dt, fmin, fmax, rms):
    """Aperiodic noise with all power in [fmin, fmax], scaled to ``rms``."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, dt)
    spec[(f < fmin) | (f > fmax)] = 0.0
    v = np.fft.irfft(spec, n)
    s = v.std()
    return v * (rms / s) if s > 0 else v


def saccade_profile(t, onset, duration, overshoot=0.0):
    """Raised-cosine step from 0 to 1 over ``[onset, onset + duration]``.

    With ``overshoot > 0`` the step rises to ``1 + overshoot`` over the first
    70% of the duration and settles back to 1 by its end.
    """
    u = np.clip((np.asarray(t, dtype=np.float64) - onset) / duration, 0.0, 1.0)
    if overshoot <= 0:
        return 0.5 - 0.5 * np.cos(np.pi * u)
    rise = np.minimum(u / 0.7, 1.0)
    settle = np.clip((u - 0.7) / 0.3, 0.0, 1.0)
    return (1.0 + overshoot) * (0.5 - 0.5 * np.cos(np.pi * rise)) \
        - overshoot * (0.5 - 0.5 * np.cos(np.pi * settle))


def gen_trace(duration: float, config: SimulatorConfig, seed: int = 0,
              scan_windows=None) -> MotionTrace:
    """Fixational eye motion: drift, microsaccades, tremor, axial motion and torsion.

    Args:
        duration: trace length in seconds (starts at t = 0).
        config: motion parameters; disabled components contribute zero.
        seed: seed of all random draws.
        scan_windows: optional ``[(t_start, t_end), ...]``; torsion is drawn
            once per window (a single draw otherwise).

    Returns:
        MotionTrace sampled every ``config.dt`` seconds.
    """
    dt = config.dt
    n = int(math.ceil(duration / dt)) + 2
    t = np.arange(n) * dt
    ss = np.random.SeedSequence(seed)
    r_drift, r_sac, r_trem, r_ax, r_tor = (np.random.default_rng(s) for s in ss.spawn(5))
    comp = {k: np.zeros((n, 2)) for k in ("drift", "saccade", "tremor")}
    z = np.zeros(n)

    if config.drift and config.drift_diffusion > 0:
        steps = r_drift.normal(0.0, math.sqrt(2 * config.drift_diffusion * dt), (n, 2))
        steps[0] = 0.0
        comp["drift"] = _reflect(np.cumsum(steps, axis=0), config.drift_bound)

    onsets = []
    if config.saccades:
        if config.saccade_times:
            onsets = [float(s) for s in config.saccade_times]
        elif config.saccade_rate > 0:
            k = r_sac.poisson(config.saccade_rate * duration)
            onsets = sorted(r_sac.uniform(0, duration, k).tolist())
        else:
            onsets = sorted(r_sac.uniform(0.2 * duration, 0.8 * duration,
                                          config.n_saccades).tolist())
        for t0 in onsets:
            phi = r_sac.uniform(0, 2 * np.pi)
            prof = saccade_profile(t, t0, config.saccade_duration, config.saccade_overshoot)
            comp["saccade"] += config.saccade_amplitude * np.outer(prof, [math.cos(phi), math.sin(phi)])

    if config.tremor and config.tremor_amplitude > 0:
        rms = config.tremor_amplitude / math.sqrt(2.0)
        comp["tremor"] = np.column_stack([
            _band_noise(r_trem, n, dt, config.tremor_fmin, config.tremor_fmax, rms)
            for _ in range(2)])

    if config.axial:
        steps = r_ax.normal(0.0, math.sqrt(2 * config.axial_diffusion * dt), n)
        steps[0] = 0.0
        phase = r_ax.uniform(0, 2 * np.pi)
        z = np.cumsum(steps) + config.axial_sine_amplitude * np.sin(
            2 * np.pi * config.axial_sine_freq * t + phase)

    theta = np.zeros(n)
    if config.torsion_sigma > 0:
        windows = scan_windows if scan_windows else [(t[0], t[-1])]
        for a, b in windows:
            theta[(t >= a - 0.5 * dt) & (t <= b + 0.5 * dt)] = r_tor.normal(0.0, config.torsion_sigma)

    xy = comp["drift"] + comp["saccade"] + comp["tremor"]
    comp["axial"] = z
    return MotionTrace(t, xy[:, 0], xy[:, 1], z, theta, comp, onsets)


# --------------------------------------------------------------------------
# Phantom
# --------------------------------------------------------------------------

# (name, thickness µm, log intensity, fraction removed at the foveal center)
LAYERS = (
    ("nfl", 30.0, 4.0, 0.95),
    ("gcl", 40.0, 2.8, 0.9),
    ("ipl", 30.0, 3.5, 0.85),
    ("inl", 28.0, 2.2, 0.8),
    ("opl", 20.0, 3.3, 0.4),
    ("onl", 60.0, 1.8, -0.3),
    ("isos", 8.0, 4.3, 0.0),
    ("os", 16.0, 2.6, 0.0),
    ("rpe", 18.0, 5.2, 0.0),
    ("choroid", 60.0, 3.4, 0.0),
)
SCLERA = 1.2


class _FourierField:
    """Smooth random 2-D field: sum of random plane waves, unit rms."""

    def __init__(self, rng, n, wl_min, wl_max):
        k = 2 * np.pi / rng.uniform(wl_min, wl_max, n)
        ang = rng.uniform(0, 2 * np.pi, n)
        self.kx, self.ky = k * np.cos(ang), k * np.sin(ang)
        self.phase = rng.uniform(0, 2 * np.pi, n)
        self.norm = math.sqrt(2.0 / n)

    def __call__(self, x, y):
        arg = np.outer(x, self.kx) + np.outer(y, self.ky) + self.phase
        return np.cos(arg).sum(axis=1) * self.norm


@dataclass
class Phantom:
    """Continuous layered retina with a foveal pit, vessels with shadows and a
    textured choroid. ``sample`` evaluates log intensities at scene
    coordinates (µm)."""

    seed: int = 0
    surface_depth: float = 45.0
    curvature_radius: float = 11000.0
    pit_sigma: float = 160.0
    n_vessels: int = 8
    extent: float = 900.0
    spot: float = 6.0
    edge: float = 2.0

    def __post_init__(self):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 17]))
        self.tilt = rng.uniform(-0.015, 0.015, 2)
        self.undulation = _FourierField(rng, 12, 250.0, 900.0)
        self.thick_fields = [_FourierField(rng, 12, 150.0, 600.0) for _ in LAYERS]
        self.tex_inner = _FourierField(rng, 40, 40.0, 200.0)
        self.tex_choroid = _FourierField(rng, 60, 30.0, 120.0)
        self.tex_onl = _FourierField(rng, 30, 50.0, 250.0)
        self.vessels = []
        for _ in range(self.n_vessels):
            self.vessels.append(self._make_vessel(rng))

    def _make_vessel(self, rng):
        start = rng.uniform(-self.extent, self.extent, 2)
        heading = rng.uniform(0, 2 * np.pi)
        step = 4.0
        pts = [start]
        for _ in range(int(2.5 * self.extent / step)):
            heading += rng.normal(0, 0.04)
            pts.append(pts[-1] + step * np.array([math.cos(heading), math.sin(heading)]))
        pts = np.array(pts)
        return cKDTree(pts), float(rng.uniform(9.0, 22.0)), float(rng.uniform(0.8, 1.6))

    def surface(self, qx, qy) -> np.ndarray:
        r2 = qx * qx + qy * qy
        return (self.surface_depth + r2 / (2 * self.curvature_radius)
                + self.tilt[0] * qx + self.tilt[1] * qy + 3.0 * self.undulation(qx, qy))

    def boundaries(self, qx, qy) -> np.ndarray:
        """Layer top depths ``(n, len(LAYERS) + 1)``; the last column is the sclera."""
        r2 = qx * qx + qy * qy
        pit = np.exp(-r2 / (2 * self.pit_sigma ** 2))
        b = [self.surface(qx, qy)]
        removed = np.zeros_like(qx)
        for (name, th, _, frac), f in zip(LAYERS, self.thick_fields):
            thick = np.maximum(th * (1.0 - frac * pit) + 0.06 * th * f(qx, qy), 1.0)
            if name not in ("rpe", "choroid"):
                removed += th + 0.06 * th * f(qx, qy) - thick
            b.append(b[-1] + thick)
        # the pit deepens the inner surface; the outer retina stays in place
        return np.column_stack(b) + removed[:, None]

    def sample(self, qx, qy, z) -> np.ndarray:
        """Noise-free log intensity at transverse ``(qx, qy)`` (n,) and depths
        ``z`` (n, d) micrometers below the top of the A-scan window."""
        qx = np.asarray(qx, dtype=np.float64)
        qy = np.asarray(qy, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        b = self.boundaries(qx, qy)
        levels = np.array([lay[2] for lay in LAYERS])[None, :].repeat(qx.size, axis=0)
        inner = 0.3 * self.tex_inner(qx, qy)
        levels[:, 1] += inner
        levels[:, 2] += inner
        levels[:, 5] += 0.2 * self.tex_onl(qx, qy)
        levels[:, 9] += 0.6 * self.tex_choroid(qx, qy)
        steps = np.diff(np.column_stack([np.full(qx.size, BACKGROUND), levels,
                                         np.full(qx.size, SCLERA)]), axis=1)
        out = np.full(z.shape, BACKGROUND)
        for j in range(b.shape[1]):
            out += steps[:, j, None] * _sigmoid((z - b[:, j, None]) / self.edge)
        # vessels in the nerve fiber layer: bright wall reflex, shadow below
        zv = b[:, 0] + 0.5 * (b[:, 1] - b[:, 0]) + 4.0
        pts = np.column_stack([qx, qy])
        for tree, radius, strength in self.vessels:
            dist, _ = tree.query(pts)
            lat = np.exp(-dist ** 2 / (2 * (radius ** 2 + self.spot ** 2)))
            if not np.any(lat > 1e-4):
                continue
            dz = z - zv[:, None]
            out += 0.8 * lat[:, None] * np.exp(-dz ** 2 / (2 * (0.5 * radius) ** 2))
            out -= strength * lat[:, None] * _sigmoid((dz - radius) / self.edge) \
                * (z < b[:, -1, None] + 40.0)
        return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# Scanning
# --------------------------------------------------------------------------

def make_geometry(config: SimulatorConfig, fast_axis: str = FAST_X, t_start: float = 0.0,
                  dtype=np.float32) -> VolumeGrid:
    """Empty volume with raster timing: flyback gaps between B-scan repeats."""
    w, h, r = config.width, config.height, config.repeats
    per_line = w + round(config.flyback_fraction * w)
    line = np.arange(h * r)[:, None] * per_line + np.arange(w)[None, :]
    times = t_start + line.reshape(h, r, w) / config.ascan_rate
    vox = np.zeros((h, r, w, config.depth), dtype=dtype)
    return VolumeGrid(vox, times, config.spacing_xy, config.spacing_xy, config.spacing_z, fast_axis)


def scan_phantom(phantom: Phantom, trace: MotionTrace, geometry: VolumeGrid,
                 config: SimulatorConfig | None = None, seed: int | None = 0,
                 illum=None) -> tuple[VolumeGrid, DisplacementField]:
    """Raster-scan the moving phantom.

    Every A-scan samples the phantom at the scene position its beam hits at its
    acquisition time. The truth field records, per A-scan, the scene position
    of depth 0 in isotropic transverse pixels and preprocessed axial pixels
    (twice the raw axial spacing).

    Args:
        illum: optional callable ``c(tau)`` added to tissue voxels.
    """
    config = config or SimulatorConfig()
    vol = geometry
    pix = min(vol.spacing_x, vol.spacing_y)
    az = 2.0 * vol.spacing_z
    tau = vol.acq_time.reshape(-1)
    if tau.min() < trace.t[0] or tau.max() > trace.t[-1]:
        raise ValueError("trace does not cover the scan timing")
    px, py = vol.transverse_positions(pix)
    px, py = px * pix, py * pix  # µm
    dx, dy, dz, th = trace.at(tau)
    c, s = np.cos(th), np.sin(th)
    ax, ay = px - dx, py - dy
    qx = c * ax + s * ay
    qy = -s * ax + c * ay
    xfast = px if vol.fast_axis == FAST_X else py
    m_phys = config.shear_x if vol.fast_axis == FAST_X else config.shear_y
    z_shift = dz + m_phys * xfast
    depth = np.arange(vol.d) * vol.spacing_z
    vals = phantom.sample(qx, qy, depth[None, :] - z_shift[:, None])
    if illum is not None:
        vals = vals + (vals > 1.0) * np.asarray(illum(tau))[:, None]
    if config.noise_sigma > 0:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([0 if seed is None else seed, 99])))
        vals = vals + rng.normal(0.0, config.noise_sigma, vals.shape)
    out = vol.with_voxels(vals.reshape(vol.voxels.shape).astype(vol.voxels.dtype))
    m_model = m_phys * pix / az
    xfast_px = xfast / pix
    pos = np.column_stack([qx / pix, qy / pix, -(dz / az + m_model * xfast_px)])
    truth = DisplacementField(pos, tau.copy(), (vol.w, vol.h, vol.r, vol.d), vol.fast_axis,
                              alpha=float(np.mean(th)))
    return out, truth


@dataclass
class Simulation:
    volumes: list
    truths: list
    trace: MotionTrace
    phantom: Phantom
    config: SimulatorConfig


def fast_axes_for(k: int) -> list[str]:
    """Alternating X, Y, X, Y, ... orientations."""
    return [FAST_X if i % 2 == 0 else FAST_Y for i in range(k)]


def simulate(config: SimulatorConfig | None = None, seed: int = 0, fast_axes=None,
             n_volumes: int = 2) -> Simulation:
    """Scan ``n_volumes`` consecutive volumes of one phantom under one trace."""
    config = config or SimulatorConfig()
    axes = list(fast_axes) if fast_axes is not None else fast_axes_for(n_volumes)
    if len(axes) < 2:
        log.warning("a single volume has no orthogonal partner for correction")
    dur = config.scan_duration
    windows = [(i * (dur + config.volume_gap), i * (dur + config.volume_gap) + dur)
               for i in range(len(axes))]
    total = windows[-1][1] + config.line_time
    ss = np.random.SeedSequence(seed)
    trace_seed, phantom_seed, noise_seed, illum_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    trace = gen_trace(total, config, trace_seed, windows)
    phantom = Phantom(seed=phantom_seed)
    illum = None
    if config.illum_amplitude > 0:
        rng = np.random.default_rng(illum_seed)
        freqs = rng.uniform(0.2, 2.0, 4)
        phases = rng.uniform(0, 2 * np.pi, 4)
        amp = config.illum_amplitude / 2.0

        def illum(t):
            return amp * np.sin(2 * np.pi * freqs[:, None] * np.atleast_1d(t)[None, :]
                                + phases[:, None]).sum(axis=0)
    vols, truths = [], []
    for i, (axis, (t0, _)) in enumerate(zip(axes, windows)):
        geom = make_geometry(config, axis, t0)
        v, tr = scan_phantom(phantom, trace, geom, config, noise_seed + i, illum)
        vols.append(v)
        truths.append(tr)
    return Simulation(vols, truths, trace, phantom, config)
