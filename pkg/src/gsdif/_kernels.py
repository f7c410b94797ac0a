"""Compiled ray kernels for voxel volumes (forward projector and its adjoint).

Both kernels walk the same samples with the same trilinear weights, so the
backprojector is the exact transpose of the projector. The forward pass is
parallel over rays (each output written once); the adjoint scatters into a
shared volume and therefore runs serially to keep the summation order fixed.
"""

import numba
import numpy as np

# TBB in this image is too old for numba; the workqueue layer is always available.
numba.config.THREADING_LAYER = "workqueue"


@numba.njit(cache=True, inline="always")
def _cell(px, py, pz, origin, spacing, nx, ny, nz):
    tx = (px - origin[0]) / spacing[0]
    ty = (py - origin[1]) / spacing[1]
    tz = (pz - origin[2]) / spacing[2]
    if tx < 0.0 or ty < 0.0 or tz < 0.0 or tx > nx - 1 or ty > ny - 1 or tz > nz - 1:
        return False, 0, 0, 0, 0.0, 0.0, 0.0
    ix = min(int(np.floor(tx)), nx - 2)
    iy = min(int(np.floor(ty)), ny - 2)
    iz = min(int(np.floor(tz)), nz - 2)
    return True, ix, iy, iz, tx - ix, ty - iy, tz - iz


@numba.njit(cache=True, parallel=True)
def forward_rays(data, origin, spacing, src, p_d, n_r, lo, hi):
    nz, ny, nx = data.shape
    n_rays = p_d.shape[0]
    out = np.zeros(n_rays)
    for r in numba.prange(n_rays):
        dx = p_d[r, 0] - src[0]
        dy = p_d[r, 1] - src[1]
        dz = p_d[r, 2] - src[2]
        acc = 0.0
        for i in range(lo, hi + 1):
            lam = i / n_r
            ok, ix, iy, iz, fx, fy, fz = _cell(src[0] + lam * dx, src[1] + lam * dy, src[2] + lam * dz,
                                               origin, spacing, nx, ny, nz)
            if not ok:
                continue
            c00 = data[iz, iy, ix] * (1 - fx) + data[iz, iy, ix + 1] * fx
            c01 = data[iz, iy + 1, ix] * (1 - fx) + data[iz, iy + 1, ix + 1] * fx
            c10 = data[iz + 1, iy, ix] * (1 - fx) + data[iz + 1, iy, ix + 1] * fx
            c11 = data[iz + 1, iy + 1, ix] * (1 - fx) + data[iz + 1, iy + 1, ix + 1] * fx
            c0 = c00 * (1 - fy) + c01 * fy
            c1 = c10 * (1 - fy) + c11 * fy
            acc += c0 * (1 - fz) + c1 * fz
        out[r] = np.sqrt(dx * dx + dy * dy + dz * dz) * acc / n_r
    return out


@numba.njit(cache=True)
def backproject_rays(values, shape, origin, spacing, src, p_d, n_r, lo, hi):
    nz, ny, nx = shape
    vol = np.zeros((nz, ny, nx))
    for r in range(p_d.shape[0]):
        dx = p_d[r, 0] - src[0]
        dy = p_d[r, 1] - src[1]
        dz = p_d[r, 2] - src[2]
        scale = values[r] * np.sqrt(dx * dx + dy * dy + dz * dz) / n_r
        if scale == 0.0:
            continue
        for i in range(lo, hi + 1):
            lam = i / n_r
            ok, ix, iy, iz, fx, fy, fz = _cell(src[0] + lam * dx, src[1] + lam * dy, src[2] + lam * dz,
                                               origin, spacing, nx, ny, nz)
            if not ok:
                continue
            for cz in range(2):
                wz = fz if cz else 1 - fz
                for cy in range(2):
                    wy = fy if cy else 1 - fy
                    for cx in range(2):
                        wx = fx if cx else 1 - fx
                        vol[iz + cz, iy + cy, ix + cx] += scale * wz * wy * wx
    return vol
