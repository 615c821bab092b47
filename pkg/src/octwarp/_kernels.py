"""Compiled inner loops for forward warping and the data term.

Target arrays are laid out ``[gx, gy, z]`` so that axial runs are contiguous.
Column ``(ix, iy)`` of a target grid has its planes at ``j + offsets[(ix + sx) % 4,
(iy + sy) % 4]`` (level axial pixels).
"""
import math

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def cr_weights(t, w):
    # Catmull-Rom taps at -1, 0, 1, 2 for fractional position t in [0, 1)
    t2 = t * t
    t3 = t2 * t
    w[0] = 0.5 * (-t3 + 2.0 * t2 - t)
    w[1] = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0)
    w[2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + t)
    w[3] = 0.5 * (t3 - t2)


@njit(cache=True, inline="always")
def cr_dweights(t, w):
    t2 = t * t
    w[0] = 0.5 * (-3.0 * t2 + 4.0 * t - 1.0)
    w[1] = 0.5 * (9.0 * t2 - 10.0 * t)
    w[2] = 0.5 * (-9.0 * t2 + 8.0 * t + 1.0)
    w[3] = 0.5 * (3.0 * t2 - 2.0 * t)


@njit(cache=True)
def cr_kernel(x):
    a = abs(x)
    if a < 1.0:
        return (1.5 * a - 2.5) * a * a + 1.0
    if a < 2.0:
        return ((-0.5 * a + 2.5) * a - 4.0) * a + 2.0
    return 0.0


# --------------------------------------------------------------------------
# separable forward warp
# --------------------------------------------------------------------------

@njit(cache=True)
def _splat_ascan(col, gx, gy, shift, offsets, sx, sy, acc, wacc, inv2s2,
                 bufv, bufw, phases, wz):
    nx, ny, nz = acc.shape
    d = col.shape[0]
    fx = math.floor(gx)
    fy = math.floor(gy)
    ix0 = int(fx) - 1
    iy0 = int(fy) - 1
    ncoef = 0
    nphase = 0
    for a in range(4):
        ix = ix0 + a
        dx = gx - ix
        for b in range(4):
            iy = iy0 + b
            dy = gy - iy
            g = math.exp(-(dx * dx + dy * dy) * inv2s2)
            ncoef += 1
            if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
                continue
            o = offsets[(ix + sx) % 4, (iy + sy) % 4]
            p = -1
            for q in range(nphase):
                if phases[q] == o:
                    p = q
                    break
            if p < 0:
                p = nphase
                phases[p] = o
                nphase += 1
                # resample the A-scan onto planes j + o (coefficients shared over depth)
                delta = o - shift
                fl = math.floor(delta)
                cr_weights(delta - fl, wz)
                ncoef += 4
                base = int(fl) - 1
                for j in range(nz):
                    v = 0.0
                    s = 0.0
                    for q in range(4):
                        k = j + base + q
                        if k >= 0 and k < d:
                            v += wz[q] * col[k]
                            s += wz[q]
                    bufv[p, j] = v
                    bufw[p, j] = s
            for j in range(nz):
                sj = bufw[p, j]
                if sj != 0.0:
                    acc[ix, iy, j] += g * bufv[p, j]
                    wacc[ix, iy, j] += g * sj
    return ncoef


@njit(cache=True)
def _splat_list(items, start, stop, vals, gx, gy, shift, offsets, sx, sy, acc, wacc,
                inv2s2, counts):
    nz = acc.shape[2]
    bufv = np.empty((16, nz))
    bufw = np.empty((16, nz))
    phases = np.empty(16)
    wz = np.empty(4)
    for idx in range(start, stop):
        i = items[idx]
        counts[i] = _splat_ascan(vals[i], gx[i], gy[i], shift[i], offsets, sx, sy,
                                 acc, wacc, inv2s2, bufv, bufw, phases, wz)


@njit(cache=True, parallel=True)
def splat_separable(vals, gx, gy, shift, offsets, sx, sy, acc, wacc, sigma,
                    tile_starts, tile_items, overflow, counts):
    """Tiles own disjoint target columns, so the parallel pass is race-free and
    the accumulation order per voxel is independent of the thread count."""
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    ntiles = tile_starts.size - 1
    for t in prange(ntiles):
        _splat_list(tile_items, tile_starts[t], tile_starts[t + 1], vals, gx, gy, shift,
                    offsets, sx, sy, acc, wacc, inv2s2, counts)
    _splat_list(overflow, 0, overflow.size, vals, gx, gy, shift, offsets, sx, sy,
                acc, wacc, inv2s2, counts)


@njit(cache=True)
def splat_naive(vals, gx, gy, shift, offsets, sx, sy, acc, wacc, sigma):
    """Full 4x4x4 scatter of every voxel; returns the number of weights computed."""
    nx, ny, nz = acc.shape
    n, d = vals.shape
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    count = 0
    for i in range(n):
        ix0 = int(math.floor(gx[i])) - 1
        iy0 = int(math.floor(gy[i])) - 1
        for k in range(d):
            u = k + shift[i]
            s = vals[i, k]
            for a in range(4):
                ix = ix0 + a
                for b in range(4):
                    iy = iy0 + b
                    o = offsets[(ix + sx) % 4, (iy + sy) % 4]
                    j0 = int(math.floor(u - o)) - 1
                    for c in range(4):
                        j = j0 + c
                        dx = gx[i] - ix
                        dy = gy[i] - iy
                        wgt = math.exp(-(dx * dx + dy * dy) * inv2s2) * cr_kernel(j + o - u)
                        count += 1
                        if ix < 0 or ix >= nx or iy < 0 or iy >= ny or j < 0 or j >= nz:
                            continue
                        acc[ix, iy, j] += wgt * s
                        wacc[ix, iy, j] += wgt
    return count


@njit(cache=True)
def valid_runs4(valid):
    """``out[..., j]`` is 1 iff planes ``j .. j+3`` of the column are all valid."""
    nx, ny, nz = valid.shape
    out = np.zeros((nx, ny, nz), dtype=np.uint8)
    for ix in range(nx):
        for iy in range(ny):
            run = 0
            for j in range(nz - 1, -1, -1):
                if valid[ix, iy, j]:
                    run += 1
                else:
                    run = 0
                if run >= 4:
                    out[ix, iy, j] = 1
    return out


# --------------------------------------------------------------------------
# tricubic interpolation of a warped target
# --------------------------------------------------------------------------

@njit(cache=True)
def interp_points(values, valid4, offsets, sx, sy, gx, gy, u, out):
    """Interpolate at arbitrary points; ``out[:, 0]`` value, ``out[:, 1:4]``
    derivatives (gx, gy, u); ``out[:, 4]`` is 1 for valid samples."""
    nx, ny, nz = values.shape
    wx = np.empty(4)
    wy = np.empty(4)
    dwx = np.empty(4)
    dwy = np.empty(4)
    wz = np.empty(4)
    dwz = np.empty(4)
    for p in range(gx.size):
        out[p, :] = 0.0
        fx = math.floor(gx[p])
        fy = math.floor(gy[p])
        ix0 = int(fx) - 1
        iy0 = int(fy) - 1
        if ix0 < 0 or iy0 < 0 or ix0 + 3 >= nx or iy0 + 3 >= ny:
            continue
        cr_weights(gx[p] - fx, wx)
        cr_weights(gy[p] - fy, wy)
        cr_dweights(gx[p] - fx, dwx)
        cr_dweights(gy[p] - fy, dwy)
        ok = True
        val = 0.0
        dgx = 0.0
        dgy = 0.0
        du = 0.0
        for a in range(4):
            for b in range(4):
                ix = ix0 + a
                iy = iy0 + b
                q = u[p] - offsets[(ix + sx) % 4, (iy + sy) % 4]
                fz = math.floor(q)
                j0 = int(fz) - 1
                if j0 < 0 or j0 + 3 >= nz or valid4[ix, iy, j0] == 0:
                    ok = False
                    break
                cr_weights(q - fz, wz)
                cr_dweights(q - fz, dwz)
                v = 0.0
                dv = 0.0
                for c in range(4):
                    v += wz[c] * values[ix, iy, j0 + c]
                    dv += dwz[c] * values[ix, iy, j0 + c]
                val += wx[a] * wy[b] * v
                dgx += dwx[a] * wy[b] * v
                dgy += wx[a] * dwy[b] * v
                du += wx[a] * wy[b] * dv
            if not ok:
                break
        if ok:
            out[p, 0] = val
            out[p, 1] = dgx
            out[p, 2] = dgy
            out[p, 3] = du
            out[p, 4] = 1.0


@njit(cache=True, parallel=True)
def data_term_ascans(vals, illum, cvals, gx, gy, shift, values, valid4, offsets, sx, sy, out):
    """Per-A-scan partial sums of the squared-difference data term.

    ``out[i]`` = (sum r^2, sum r dW/dgx, sum r dW/dgy, sum r dW/du, sum r*I, n_valid)
    with ``r = vals + illum * cvals - W``.
    """
    n, d = vals.shape
    nx, ny, nz = values.shape
    for i in prange(n):
        for q in range(6):
            out[i, q] = 0.0
        fx = math.floor(gx[i])
        fy = math.floor(gy[i])
        ix0 = int(fx) - 1
        iy0 = int(fy) - 1
        if ix0 < 0 or iy0 < 0 or ix0 + 3 >= nx or iy0 + 3 >= ny:
            continue
        wx = np.empty(4)
        wy = np.empty(4)
        dwx = np.empty(4)
        dwy = np.empty(4)
        cr_weights(gx[i] - fx, wx)
        cr_weights(gy[i] - fy, wy)
        cr_dweights(gx[i] - fx, dwx)
        cr_dweights(gy[i] - fy, dwy)
        # axial coefficients of each column are shared along the A-scan
        zb = np.empty(16, dtype=np.int64)
        wz = np.empty((16, 4))
        dwz = np.empty((16, 4))
        for a in range(4):
            for b in range(4):
                c = 4 * a + b
                q = shift[i] - offsets[(ix0 + a + sx) % 4, (iy0 + b + sy) % 4]
                fz = math.floor(q)
                zb[c] = int(fz) - 1
                cr_weights(q - fz, wz[c])
                cr_dweights(q - fz, dwz[c])
        loss = 0.0
        sgx = 0.0
        sgy = 0.0
        sgu = 0.0
        sgc = 0.0
        nv = 0
        for k in range(d):
            ok = True
            for c in range(16):
                j0 = k + zb[c]
                if j0 < 0 or j0 + 3 >= nz or valid4[ix0 + c // 4, iy0 + c % 4, j0] == 0:
                    ok = False
                    break
            if not ok:
                continue
            val = 0.0
            dgx = 0.0
            dgy = 0.0
            du = 0.0
            for a in range(4):
                for b in range(4):
                    c = 4 * a + b
                    j0 = k + zb[c]
                    v = 0.0
                    dv = 0.0
                    for e in range(4):
                        tv = values[ix0 + a, iy0 + b, j0 + e]
                        v += wz[c, e] * tv
                        dv += dwz[c, e] * tv
                    val += wx[a] * wy[b] * v
                    dgx += dwx[a] * wy[b] * v
                    dgy += wx[a] * dwy[b] * v
                    du += wx[a] * wy[b] * dv
            ind = illum[i, k]
            r = vals[i, k] + ind * cvals[i] - val
            loss += r * r
            sgx += r * dgx
            sgy += r * dgy
            sgu += r * du
            sgc += r * ind
            nv += 1
        out[i, 0] = loss
        out[i, 1] = sgx
        out[i, 2] = sgy
        out[i, 3] = sgu
        out[i, 4] = sgc
        out[i, 5] = nv
