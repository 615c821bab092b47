import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from octwarp.core_model import VolumeGrid
from octwarp.preprocess import build_pyramid, downsample_axial_x2, median_filter_r1, preprocess


def column_volume(col, h=1, w=1):
    col = np.asarray(col, dtype=np.float64)
    vox = np.broadcast_to(col, (h, 1, w, col.size)).copy()
    t = np.arange(h * w, dtype=float).reshape(h, 1, w)
    return VolumeGrid(vox, t, 1.0, 1.0, 1.0)


def test_downsample_examples():
    np.testing.assert_allclose(downsample_axial_x2(column_volume([1, 3, 5, 7])).voxels.ravel(), [2, 6])
    np.testing.assert_allclose(downsample_axial_x2(column_volume([1, 3, 5, 7, 9])).voxels.ravel(), [2, 6])
    v = downsample_axial_x2(column_volume(np.full(10, 2.5), 3, 3))
    assert v.d == 5 and np.all(v.voxels == 2.5) and v.spacing_z == 2.0


def test_downsample_rejects_depth_one():
    with pytest.raises(ValueError):
        downsample_axial_x2(column_volume([1.0]))


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.integers(1, 3))
def test_downsample_preserves_mean(half, w):
    col = np.repeat(np.asarray(half), 2) + np.tile([0.25, -0.25], len(half))
    v = column_volume(col, 2, w)
    out = downsample_axial_x2(v)
    assert out.voxels.mean() == pytest.approx(v.voxels.mean(), rel=1e-6, abs=1e-9)


def test_median_filter_removes_spike_and_keeps_constant():
    vox = np.zeros((2, 1, 5, 5))
    vox[0, 0, 2, 2] = 10.0
    v = VolumeGrid(vox, np.arange(10, dtype=float).reshape(2, 1, 5), 1, 1, 1)
    assert np.all(median_filter_r1(v).voxels == 0.0)
    const = v.with_voxels(np.full_like(vox, 3.0))
    assert np.all(median_filter_r1(const).voxels == 3.0)


def test_median_filter_is_plus_shaped():
    # diagonal neighbors must not participate: a voxel whose 4 plus-neighbors
    # equal its own value is unchanged even when all diagonals differ
    vox = np.zeros((1, 1, 3, 3))
    vox[0, 0, [0, 0, 2, 2], [0, 2, 0, 2]] = 9.0
    v = VolumeGrid(vox, np.arange(3, dtype=float).reshape(1, 1, 3), 1, 1, 1)
    assert median_filter_r1(v).voxels[0, 0, 1, 1] == 0.0


def test_median_filter_does_not_mix_bscans():
    vox = np.zeros((3, 1, 3, 3))
    vox[1] = 5.0
    v = VolumeGrid(vox, np.arange(9, dtype=float).reshape(3, 1, 3), 1, 1, 1)
    np.testing.assert_array_equal(median_filter_r1(v).voxels, vox)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=30), st.booleans())
def test_median_filter_idempotent_on_monotone_profiles(vals, descending):
    col = np.sort(np.asarray(vals))
    if descending:
        col = col[::-1]
    v = column_volume(col, 2, 4)
    once = median_filter_r1(v)
    np.testing.assert_allclose(median_filter_r1(once).voxels, once.voxels)
    np.testing.assert_allclose(once.voxels, v.voxels)


def test_pyramid_depths():
    assert [lv.d for lv in build_pyramid(column_volume(np.zeros(256))).levels] == [32, 64, 128, 256]
    # floor rule for a preprocessed 775-sample A-scan (oracle: integer halving)
    assert [lv.d for lv in build_pyramid(column_volume(np.zeros(388))).levels] == [48, 97, 194, 388]
    raw = column_volume(np.zeros(775), 8, 8)
    assert preprocess(raw).d == 387
    assert [lv.d for lv in build_pyramid(preprocess(raw)).levels] == [48, 96, 193, 387]


def test_pyramid_constant_volume():
    pyr = build_pyramid(column_volume(np.full(64, 1.5), 2, 2))
    assert pyr.level_count == 4
    assert all(np.all(lv.voxels == 1.5) for lv in pyr.levels)


def test_pyramid_voxel_counts():
    v = column_volume(np.arange(200.0), 3, 4)
    pyr = build_pyramid(v)
    top = pyr[3].voxels.size
    for level in range(4):
        expected = top / 2 ** (3 - level)
        assert abs(pyr[level].voxels.size - expected) <= 3 * 4 * 1


def test_pyramid_reduces_levels_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        pyr = build_pyramid(column_volume(np.zeros(12)))
    assert pyr.level_count == 2
    assert "too small" in caplog.text
