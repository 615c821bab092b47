import math

import numpy as np
import pytest
from conftest import make_volume, smooth_params
from hypothesis import given
from hypothesis import strategies as st

from octwarp import _kernels as K
from octwarp.core_model import FAST_Y, MotionParameterSet
from octwarp.forward_warp import (NAIVE, SEPARABLE, TargetGridSpec, coefficient_count, interp_many,
                                  interp_target, make_grid, make_offset_table, naive_scatter_oracle,
                                  splat_volume, unit_grid)


def test_offset_table_is_stratified():
    for seed in range(5):
        off = make_offset_table(seed)
        assert off.shape == (4, 4)
        np.testing.assert_array_equal(np.sort(off.ravel()), np.arange(16) / 16)
    np.testing.assert_array_equal(make_offset_table(7), make_offset_table(7))


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        TargetGridSpec((8, 8, 8), 1.0, (4, 4), np.zeros((4, 4)), resolution_factor=0.4)
    with pytest.raises(ValueError):
        TargetGridSpec((8, 8, 8), 1.0, (4, 4), np.zeros((3, 4)))
    bad = np.arange(16).reshape(4, 4) / 16
    bad[0, 0] = bad[0, 1]
    with pytest.raises(ValueError):
        TargetGridSpec((8, 8, 8), 1.0, (4, 4), bad)


def test_grid_descriptor():
    vol = make_volume()
    g = make_grid([vol], resolution_factor=0.8, alpha0=math.pi / 6, tile_shift=(2, 2))
    assert g.descriptor == {"alpha0": math.pi / 6, "resolution_factor": 0.8, "tile_shift": (2, 2)}


def test_coefficient_count_examples():
    assert coefficient_count(64, NAIVE) == 16_777_216
    assert coefficient_count(64, SEPARABLE) == 81_920
    assert coefficient_count(1, SEPARABLE) == 20
    with pytest.raises(ValueError):
        coefficient_count(0, NAIVE)
    with pytest.raises(ValueError):
        coefficient_count(4, "other")


@pytest.mark.parametrize("n", [16, 32])
def test_instrumented_counts_match_formulas(n):
    vol = make_volume((n, 1, n, n), seed=n)
    p = MotionParameterSet.for_volume(vol)
    g = unit_grid([vol])
    assert splat_volume(vol, p, g).coef_count == coefficient_count(n, SEPARABLE)
    assert naive_scatter_oracle(vol, p, g).coef_count == coefficient_count(n, NAIVE)


def test_identity_warp_reproduces_samples():
    vol = make_volume((16, 1, 16, 24), seed=3)
    p = MotionParameterSet.for_volume(vol)
    g = unit_grid([vol])
    tgt = splat_volume(vol, p, g)
    # nodes under A-scans hold a Gaussian-weighted mix of neighbours; a sample
    # interpolated back at its own position stays close for smooth data
    xs, ys = vol.transverse_positions(1.0)
    gx, gy = g.to_grid(xs, ys)
    u = np.full(xs.size, 10.0)
    res = interp_many(tgt, gx, gy, u)
    ok = res[:, 4] > 0
    assert ok.sum() > 50
    truth = vol.ascans()[:, 10]
    assert np.sqrt(np.mean((res[ok, 0] - truth[ok]) ** 2)) < 0.5 * truth.std()


@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(0.5, 2.0))
def test_partition_of_unity(seed, const, amp):
    vol = make_volume((16, 1, 16, 16), seed=seed)
    vol = vol.with_voxels(np.full(vol.voxels.shape, const))
    p = smooth_params(vol, amp, seed)
    g = make_grid([vol], resolution_factor=5 / 6, alpha0=math.pi / 4, seed=seed)
    tgt = splat_volume(vol, p, g)
    assert tgt.valid.any()
    np.testing.assert_allclose(tgt.values[tgt.valid], const, rtol=1e-5, atol=1e-5 * max(1, abs(const)))


@given(st.integers(0, 1000), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_validity_monotone_in_w_min(seed, w1, w2):
    lo, hi = sorted((w1, w2))
    vol = make_volume((16, 1, 16, 16), seed=seed, fast_axis=FAST_Y)
    p = smooth_params(vol, 1.0, seed)
    base = make_grid([vol], seed=seed)
    g_lo = make_grid([vol], seed=seed, w_min=lo)
    g_hi = make_grid([vol], seed=seed, w_min=hi)
    assert base.offsets.tolist() == g_hi.offsets.tolist()
    v_lo = splat_volume(vol, p, g_lo).valid
    v_hi = splat_volume(vol, p, g_hi).valid
    assert not np.any(v_hi & ~v_lo)


@given(st.integers(0, 1000), st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3))
def test_integer_translation_equivariance(seed, kx, ky, kz):
    vol = make_volume((16, 1, 16, 20), seed=seed)
    p = smooth_params(vol, 0.7, seed)
    g = unit_grid([vol])
    base = splat_volume(vol, p, g)
    q = p.copy()
    q.t_x = q.t_x + kx
    q.t_y = q.t_y + ky
    q.t_z = q.t_z + kz
    moved = splat_volume(vol, q, g)
    nx, ny, nz = g.shape
    # moved[i, j, k] == base[i + kx, j + ky, k + kz] wherever both are defined
    sx = slice(max(0, -kx), min(nx, nx - kx))
    sy = slice(max(0, -ky), min(ny, ny - ky))
    sz = slice(max(0, -kz), min(nz, nz - kz))
    bx = slice(sx.start + kx, sx.stop + kx)
    by = slice(sy.start + ky, sy.stop + ky)
    bz = slice(sz.start + kz, sz.stop + kz)
    # interior: stay away from the axial volume boundary, where clamping differs
    keep = np.zeros(g.shape, dtype=bool)
    keep[:, :, 4:nz - 4] = True
    mv, bv = moved.values[sx, sy, sz], base.values[bx, by, bz]
    both = moved.valid[sx, sy, sz] & base.valid[bx, by, bz] & keep[sx, sy, sz] & keep[bx, by, bz]
    assert both.sum() > 100
    np.testing.assert_allclose(mv[both], bv[both], atol=1e-6)
    np.testing.assert_array_equal(moved.valid[sx, sy, sz] & keep[sx, sy, sz],
                                  base.valid[bx, by, bz] & keep[sx, sy, sz])


def test_separable_matches_naive_small():
    vol = make_volume((16, 1, 16, 16), seed=11)
    p = smooth_params(vol, 1.0, 11)
    g = make_grid([vol], seed=11)
    a, b = splat_volume(vol, p, g), naive_scatter_oracle(vol, p, g)
    both = a.valid & b.valid
    rng = np.ptp(vol.voxels)
    assert np.sqrt(np.mean((a.values[both] - b.values[both]) ** 2)) <= 1e-4 * rng


def test_illumination_offset_applied_above_threshold():
    vol = make_volume((16, 1, 16, 16), seed=4)
    vol = vol.with_voxels(np.full(vol.voxels.shape, 2.0))
    p = MotionParameterSet.for_volume(vol)
    p.illum_c[:] = 0.5
    g = unit_grid([vol])
    assert np.allclose(splat_volume(vol, p, g, s_min=1.0).values[splat_volume(vol, p, g).valid], 2.5)
    assert np.allclose(splat_volume(vol, p, g, s_min=3.0).values[splat_volume(vol, p, g).valid], 2.0)


def _filled_target(values_fn, shape=(12, 12, 12)):
    vol = make_volume((8, 1, 8, 8))
    g = TargetGridSpec(shape, 1.0, (6.0, 6.0), np.zeros((4, 4)))
    tgt = splat_volume(vol, MotionParameterSet.for_volume(vol), g)
    ix, iy, iz = np.meshgrid(*(np.arange(n) for n in shape), indexing="ij")
    tgt.values[...] = values_fn(ix, iy, iz)
    tgt.valid[...] = True
    tgt.valid4 = K.valid_runs4(tgt.valid)
    return tgt


def test_interp_target_examples():
    tgt = _filled_target(lambda x, y, z: np.sin(x) + 0.3 * y * z)
    assert interp_target(tgt, (5.0, 6.0, 4.0)) == pytest.approx(math.sin(5) + 0.3 * 24, abs=1e-12)
    const = _filled_target(lambda x, y, z: np.full(x.shape, 1.25))
    for pos in [(4.3, 5.7, 6.1), (6.5, 4.2, 5.9)]:
        assert interp_target(const, pos) == pytest.approx(1.25, abs=1e-12)
    const.valid[6, 6, 6] = False
    const.valid4 = K.valid_runs4(const.valid)
    assert interp_target(const, (5.5, 5.5, 5.5)) is None
    assert interp_target(const, (0.5, 5.5, 5.5)) is None  # neighbourhood leaves the grid


def test_interp_derivatives_match_finite_differences():
    tgt = _filled_target(lambda x, y, z: np.sin(0.7 * x) * np.cos(0.4 * y) + 0.1 * z ** 2)
    pos = np.array([5.3, 6.2, 5.7])
    row = interp_many(tgt, [pos[0]], [pos[1]], [pos[2]])[0]
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fp = interp_target(tgt, pos + e)
        fm = interp_target(tgt, pos - e)
        assert row[1 + k] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-7)
