import os

os.environ.setdefault("OCTWARP_THREADS", "1")

import numpy as np
import pytest
from hypothesis import settings

from octwarp import set_threads
from octwarp.core_model import FAST_X, FAST_Y, VolumeGrid

settings.register_profile("octwarp", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("octwarp")

set_threads(1)


def make_volume(shape=(16, 1, 16, 24), fast_axis=FAST_X, seed=0, t0=0.0, smooth=True):
    """Random smooth log-intensity volume with raster timing."""
    h, r, w, d = shape
    rng = np.random.default_rng(seed)
    vox = rng.normal(size=shape)
    if smooth:
        from scipy.ndimage import gaussian_filter
        vox = gaussian_filter(vox, sigma=(1.5, 0, 1.5, 1.5)) * 4.0
    line = np.arange(h * r)[:, None] * (w + w // 4) + np.arange(w)[None, :]
    times = t0 + line.reshape(h, r, w) / 16000.0
    return VolumeGrid(vox, times, 1.0, 1.0, 1.0, fast_axis)


def smooth_params(vol, amp=1.0, seed=0, alpha0=0.0):
    """Motion parameters varying smoothly over the knots."""
    from octwarp.core_model import MotionParameterSet
    rng = np.random.default_rng(seed)
    p = MotionParameterSet.for_volume(vol, alpha0)
    n = p.n_knots
    u = np.linspace(0, 1, n)
    for name, scale in (("t_x", amp), ("t_y", amp), ("t_z", amp), ("m", 0.01 * amp)):
        a, b, ph = rng.normal(size=3)
        setattr(p, name, scale * (a * np.sin(2 * np.pi * u + ph) + b * u))
    p.alpha = 0.01 * amp * rng.normal()
    return p


@pytest.fixture
def xy_pair():
    return make_volume(fast_axis=FAST_X, seed=1), make_volume(fast_axis=FAST_Y, seed=2, t0=1.0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((criterion, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
