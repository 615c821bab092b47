"""Median filtering, axial downsampling and the axial multiresolution pyramid."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core_model import VolumeGrid

log = logging.getLogger(__name__)

LEVEL_COUNT = 4


@dataclass
class Pyramid:
    levels: list  # VolumeGrid, coarsest first

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def __getitem__(self, i) -> VolumeGrid:
        return self.levels[i]


def median_filter_r1(vol: VolumeGrid) -> VolumeGrid:
    """Plus-shaped (radius 1 px) median filter within each B-scan.

    Border voxels use the truncated neighborhood (even counts take the mean of
    the two central values).
    """
    v = vol.voxels.astype(np.float64)
    p = np.pad(v, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=np.nan)
    stack = np.stack([
        p[:, :, 1:-1, 1:-1],
        p[:, :, :-2, 1:-1], p[:, :, 2:, 1:-1],
        p[:, :, 1:-1, :-2], p[:, :, 1:-1, 2:],
    ])
    out = np.nanmedian(stack, axis=0)
    return vol.with_voxels(out.astype(vol.voxels.dtype))


def downsample_axial_x2(vol: VolumeGrid) -> VolumeGrid:
    """Halve the depth by averaging sample pairs; an odd trailing sample is dropped."""
    if vol.d < 2:
        raise ValueError(f"cannot halve depth {vol.d}")
    half = vol.d // 2
    v = vol.voxels[..., : 2 * half]
    pairs = v.reshape(v.shape[:3] + (half, 2)).astype(np.float64)
    out = pairs.mean(axis=-1).astype(vol.voxels.dtype)
    return vol.with_voxels(out, spacing_z=vol.spacing_z * 2.0)


def preprocess(vol: VolumeGrid) -> VolumeGrid:
    """Registration input: median filter followed by one axial halving."""
    return downsample_axial_x2(median_filter_r1(vol))


def build_pyramid(vol: VolumeGrid, level_count: int = LEVEL_COUNT, min_depth: int = 4) -> Pyramid:
    """Axial-only pyramid; the last level is ``vol`` itself.

    Levels are dropped (with a warning) when the depth cannot be halved
    ``level_count - 1`` times while staying >= ``min_depth``.
    """
    levels = [vol]
    while len(levels) < level_count:
        if levels[0].d // 2 < min_depth:
            log.warning("depth %d too small for %d pyramid levels; using %d",
                        vol.d, level_count, len(levels))
            break
        levels.insert(0, downsample_axial_x2(levels[0]))
    return Pyramid(levels)
