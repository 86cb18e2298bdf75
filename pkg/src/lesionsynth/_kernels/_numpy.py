"""Pure-numpy implementations of the voxel kernels.

These are the reference path; the numba versions in ``_numba`` must agree with
them to floating-point round-off.
"""
import numpy as np


def trilinear_sample(data, coords):
    """Sample ``data`` at continuous voxel ``coords`` of shape (3, N).

    Points outside ``[0, n-1]`` on any axis return 0.
    """
    shape = np.asarray(data.shape)
    out = np.zeros(coords.shape[1], dtype=np.float64)
    inside = np.all((coords >= 0) & (coords <= (shape - 1)[:, None]), axis=0)
    if not inside.any():
        return out
    c = coords[:, inside]
    lo = np.floor(c).astype(np.intp)
    frac = c - lo
    # a point sitting exactly on the last index has frac 0; clamp the upper
    # neighbour so indexing stays in range (its weight is 0 anyway)
    hi = np.minimum(lo + 1, (shape - 1)[:, None])
    acc = np.zeros(c.shape[1], dtype=np.float64)
    for dx in (0, 1):
        ix = hi[0] if dx else lo[0]
        wx = frac[0] if dx else 1.0 - frac[0]
        for dy in (0, 1):
            iy = hi[1] if dy else lo[1]
            wy = frac[1] if dy else 1.0 - frac[1]
            for dz in (0, 1):
                iz = hi[2] if dz else lo[2]
                wz = frac[2] if dz else 1.0 - frac[2]
                acc += (wx * wy * wz) * data[ix, iy, iz]
    out[inside] = acc
    return out


def nearest_sample(data, coords):
    """Nearest-neighbour sample; ties round up (``floor(x + 0.5)``), outside -> 0."""
    shape = np.asarray(data.shape)
    idx = np.floor(coords + 0.5).astype(np.intp)
    inside = np.all((idx >= 0) & (idx < shape[:, None]), axis=0)
    out = np.zeros(coords.shape[1], dtype=data.dtype)
    out[inside] = data[idx[0, inside], idx[1, inside], idx[2, inside]]
    return out


def _box_sums(table, lo, hi):
    # table is a zero-padded 3-D prefix sum; lo inclusive, hi exclusive
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    return (table[x1, y1, z1] - table[x0, y1, z1] - table[x1, y0, z1] - table[x1, y1, z0]
            + table[x0, y0, z1] + table[x0, y1, z0] + table[x1, y0, z0] - table[x0, y0, z0])


def _prefix(a):
    t = np.zeros(tuple(s + 1 for s in a.shape), dtype=np.float64)
    t[1:, 1:, 1:] = a.cumsum(0).cumsum(1).cumsum(2)
    return t


def windowed_ssim(g, r, centers, half, c1, c2):
    """SSIM of the cube of half-width ``half`` around each center (N, 3).

    Windows are clipped to the volume; statistics are population moments over
    every voxel of the clipped window.
    """
    g = g.astype(np.float64)
    r = r.astype(np.float64)
    shape = np.asarray(g.shape)
    lo = np.maximum(centers - half, 0).T
    hi = np.minimum(centers + half + 1, shape).T
    n = np.prod(hi - lo, axis=0).astype(np.float64)
    sg = _box_sums(_prefix(g), lo, hi)
    sr = _box_sums(_prefix(r), lo, hi)
    sgg = _box_sums(_prefix(g * g), lo, hi)
    srr = _box_sums(_prefix(r * r), lo, hi)
    sgr = _box_sums(_prefix(g * r), lo, hi)
    mg = sg / n
    mr = sr / n
    vg = sgg / n - mg * mg
    vr = srr / n - mr * mr
    cov = sgr / n - mg * mr
    return ((2 * mg * mr + c1) * (2 * cov + c2)) / ((mg * mg + mr * mr + c1) * (vg + vr + c2))
