"""Binary volume (OCTV) and displacement-field (OCTD) files, little endian."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core_model import FAST_X, FAST_Y, VolumeGrid
from .evaluation import DisplacementField

OCTV_MAGIC = b"OCTV"
OCTD_MAGIC = b"OCTD"
VERSION = 1

# magic, version, reserved, w, h, r, d, spacing x/y/z, fast axis, pad, t0, timestamp flag
_OCTV_HEAD = struct.Struct("<4sHH4I3fB3xdB")
_RATE = struct.Struct("<d")
# magic, version, w, h, r, d, alpha0, resolution factor, tile shift
_OCTD_HEAD = struct.Struct("<4sH4I2d2i")

_AXIS_CODE = {FAST_X: 0, FAST_Y: 1}
_CODE_AXIS = {0: FAST_X, 1: FAST_Y}


class FormatError(ValueError):
    """Malformed or truncated file."""


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def encode_octv(vol: VolumeGrid, ascan_rate: float | None = None) -> bytes:
    """Serialize a volume.

    Args:
        vol: volume to write; voxels are stored as float32.
        ascan_rate: if given, timestamps are omitted and stored as
            ``t0 + index / ascan_rate``; otherwise every A-scan time is written.

    Returns:
        The file contents.
    """
    h, r, w, d = vol.voxels.shape
    times = np.asarray(vol.acq_time, dtype=np.float64).reshape(-1)
    t0 = float(times[0]) if times.size else 0.0
    flag = 0 if ascan_rate is not None else 1
    head = _OCTV_HEAD.pack(OCTV_MAGIC, VERSION, 0, w, h, r, d, vol.spacing_x, vol.spacing_y,
                           vol.spacing_z, _AXIS_CODE[vol.fast_axis], t0, flag)
    parts = [head]
    if flag:
        parts.append(times.astype("<f8").tobytes())
    else:
        if not ascan_rate > 0:
            raise ValueError("ascan_rate must be > 0")
        parts.append(_RATE.pack(float(ascan_rate)))
    parts.append(np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_octv(buf: bytes) -> VolumeGrid:
    if len(buf) < _OCTV_HEAD.size:
        raise FormatError("truncated OCTV header")
    magic, version, _, w, h, r, d, sx, sy, sz, axis, t0, flag = _OCTV_HEAD.unpack_from(buf)
    if magic != OCTV_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {OCTV_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported OCTV version {version}")
    if axis not in _CODE_AXIS:
        raise FormatError(f"bad fast-axis code {axis}")
    n = w * h * r
    pos = _OCTV_HEAD.size
    if flag:
        t_len = 8 * n
    else:
        t_len = _RATE.size
    expected = pos + t_len + 4 * n * d
    if len(buf) != expected:
        raise FormatError(f"file size {len(buf)} != header-derived size {expected}")
    if flag:
        times = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
    else:
        (rate,) = _RATE.unpack_from(buf, pos)
        if not rate > 0:
            raise FormatError("A-scan rate must be > 0")
        times = t0 + np.arange(n) / rate
    vox = np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos + t_len)
    return VolumeGrid(vox.astype(np.float32).reshape(h, r, w, d), times.reshape(h, r, w),
                      float(sx), float(sy), float(sz), _CODE_AXIS[axis])


def write_octv(path, vol: VolumeGrid, ascan_rate: float | None = None) -> None:
    Path(path).write_bytes(encode_octv(vol, ascan_rate))


def read_octv(path) -> VolumeGrid:
    return decode_octv(_read_bytes(path))


def encode_octd(f: DisplacementField) -> bytes:
    w, h, r, d = f.dims
    sx, sy = f.tile_shift
    head = _OCTD_HEAD.pack(OCTD_MAGIC, VERSION, w, h, r, d, f.alpha0, f.resolution_factor,
                           int(sx), int(sy))
    body = np.column_stack([f.positions, f.times]).astype("<f8").tobytes()
    return head + body + struct.pack("<d", float(f.alpha))


def decode_octd(buf: bytes, fast_axis: str = FAST_X) -> DisplacementField:
    """Parse a displacement file. The format does not store the fast axis, so
    the caller supplies it."""
    if len(buf) < _OCTD_HEAD.size:
        raise FormatError("truncated OCTD header")
    magic, version, w, h, r, d, alpha0, factor, sx, sy = _OCTD_HEAD.unpack_from(buf)
    if magic != OCTD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {OCTD_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported OCTD version {version}")
    n = w * h * r
    expected = _OCTD_HEAD.size + 32 * n + 8
    if len(buf) != expected:
        raise FormatError(f"file size {len(buf)} != header-derived size {expected}")
    rows = np.frombuffer(buf, dtype="<f8", count=4 * n, offset=_OCTD_HEAD.size).reshape(n, 4)
    (alpha,) = struct.unpack_from("<d", buf, _OCTD_HEAD.size + 32 * n)
    return DisplacementField(rows[:, :3].copy(), rows[:, 3].copy(), (w, h, r, d), fast_axis,
                             alpha, alpha0, factor, (sx, sy))


def write_octd(path, f: DisplacementField) -> None:
    Path(path).write_bytes(encode_octd(f))


def read_octd(path, fast_axis: str = FAST_X) -> DisplacementField:
    return decode_octd(_read_bytes(path), fast_axis)
