"""Numba-compiled voxel kernels (same contracts as ``_numpy``)."""
import numpy as np
from numba import njit


@njit(cache=True)
def trilinear_sample(data, coords):
    nx, ny, nz = data.shape
    n = coords.shape[1]
    out = np.zeros(n, dtype=np.float64)
    for p in range(n):
        x = coords[0, p]
        y = coords[1, p]
        z = coords[2, p]
        if x < 0 or y < 0 or z < 0 or x > nx - 1 or y > ny - 1 or z > nz - 1:
            continue
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        z0 = int(np.floor(z))
        fx = x - x0
        fy = y - y0
        fz = z - z0
        x1 = min(x0 + 1, nx - 1)
        y1 = min(y0 + 1, ny - 1)
        z1 = min(z0 + 1, nz - 1)
        acc = 0.0
        acc += (1 - fx) * (1 - fy) * (1 - fz) * data[x0, y0, z0]
        acc += (1 - fx) * (1 - fy) * fz * data[x0, y0, z1]
        acc += (1 - fx) * fy * (1 - fz) * data[x0, y1, z0]
        acc += (1 - fx) * fy * fz * data[x0, y1, z1]
        acc += fx * (1 - fy) * (1 - fz) * data[x1, y0, z0]
        acc += fx * (1 - fy) * fz * data[x1, y0, z1]
        acc += fx * fy * (1 - fz) * data[x1, y1, z0]
        acc += fx * fy * fz * data[x1, y1, z1]
        out[p] = acc
    return out


@njit(cache=True)
def nearest_sample(data, coords):
    nx, ny, nz = data.shape
    n = coords.shape[1]
    out = np.zeros(n, dtype=data.dtype)
    for p in range(n):
        i = int(np.floor(coords[0, p] + 0.5))
        j = int(np.floor(coords[1, p] + 0.5))
        k = int(np.floor(coords[2, p] + 0.5))
        if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
            out[p] = data[i, j, k]
    return out


@njit(cache=True)
def _windowed_ssim(g, r, centers, half, c1, c2):
    nx, ny, nz = g.shape
    m = centers.shape[0]
    out = np.empty(m, dtype=np.float64)
    for p in range(m):
        cx = centers[p, 0]
        cy = centers[p, 1]
        cz = centers[p, 2]
        x0 = max(cx - half, 0)
        x1 = min(cx + half + 1, nx)
        y0 = max(cy - half, 0)
        y1 = min(cy + half + 1, ny)
        z0 = max(cz - half, 0)
        z1 = min(cz + half + 1, nz)
        cnt = (x1 - x0) * (y1 - y0) * (z1 - z0)
        sg = 0.0
        sr = 0.0
        for i in range(x0, x1):
            for j in range(y0, y1):
                for k in range(z0, z1):
                    sg += g[i, j, k]
                    sr += r[i, j, k]
        mg = sg / cnt
        mr = sr / cnt
        vg = 0.0
        vr = 0.0
        cov = 0.0
        for i in range(x0, x1):
            for j in range(y0, y1):
                for k in range(z0, z1):
                    dg = g[i, j, k] - mg
                    dr = r[i, j, k] - mr
                    vg += dg * dg
                    vr += dr * dr
                    cov += dg * dr
        vg /= cnt
        vr /= cnt
        cov /= cnt
        out[p] = ((2 * mg * mr + c1) * (2 * cov + c2)) / ((mg * mg + mr * mr + c1) * (vg + vr + c2))
    return out


def windowed_ssim(g, r, centers, half, c1, c2):
    return _windowed_ssim(np.ascontiguousarray(g, dtype=np.float64),
                          np.ascontiguousarray(r, dtype=np.float64),
                          np.ascontiguousarray(centers, dtype=np.int64),
                          int(half), float(c1), float(c2))
