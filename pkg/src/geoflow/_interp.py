"""Compiled multilinear interpolation kernels (clamp-to-border).

Values are passed flattened C-order as ``(prod(dims), C)``; query points as
``(P, d)`` index coordinates. Derivatives along a clamped coordinate are zero.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _axis(x, n):
    inside = 0.0 <= x <= n - 1.0
    if x < 0.0:
        x = 0.0
    elif x > n - 1.0:
        x = n - 1.0
    i0 = int(math.floor(x))
    if i0 > n - 2:
        i0 = n - 2
    return i0, x - i0, inside


@njit(cache=True)
def interp2(vals, nx, ny, idx, out):
    for p in range(idx.shape[0]):
        i, fx, _ = _axis(idx[p, 0], nx)
        j, fy, _ = _axis(idx[p, 1], ny)
        a = i * ny + j
        b = a + ny
        w00 = (1.0 - fx) * (1.0 - fy)
        w01 = (1.0 - fx) * fy
        w10 = fx * (1.0 - fy)
        w11 = fx * fy
        for c in range(vals.shape[1]):
            out[p, c] = w00 * vals[a, c] + w01 * vals[a + 1, c] + w10 * vals[b, c] + w11 * vals[b + 1, c]


@njit(cache=True)
def interp2_grad(vals, nx, ny, idx, out, jac):
    for p in range(idx.shape[0]):
        i, fx, inx = _axis(idx[p, 0], nx)
        j, fy, iny = _axis(idx[p, 1], ny)
        a = i * ny + j
        b = a + ny
        sx = 1.0 if inx else 0.0
        sy = 1.0 if iny else 0.0
        for c in range(vals.shape[1]):
            v00 = vals[a, c]
            v01 = vals[a + 1, c]
            v10 = vals[b, c]
            v11 = vals[b + 1, c]
            out[p, c] = (1.0 - fx) * (1.0 - fy) * v00 + (1.0 - fx) * fy * v01 + fx * (1.0 - fy) * v10 + fx * fy * v11
            jac[p, c, 0] = sx * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01))
            jac[p, c, 1] = sy * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10))


@njit(cache=True)
def interp2_transpose(wts, nx, ny, idx, out):
    for p in range(idx.shape[0]):
        i, fx, _ = _axis(idx[p, 0], nx)
        j, fy, _ = _axis(idx[p, 1], ny)
        a = i * ny + j
        b = a + ny
        w00 = (1.0 - fx) * (1.0 - fy)
        w01 = (1.0 - fx) * fy
        w10 = fx * (1.0 - fy)
        w11 = fx * fy
        for c in range(wts.shape[1]):
            g = wts[p, c]
            out[a, c] += w00 * g
            out[a + 1, c] += w01 * g
            out[b, c] += w10 * g
            out[b + 1, c] += w11 * g


@njit(cache=True, inline="always")
def _corners3(i, j, k, ny, nz):
    a = (i * ny + j) * nz + k
    return a, a + 1, a + nz, a + nz + 1, a + ny * nz, a + ny * nz + 1, a + ny * nz + nz, a + ny * nz + nz + 1


@njit(cache=True)
def interp3(vals, nx, ny, nz, idx, out):
    for p in range(idx.shape[0]):
        i, fx, _ = _axis(idx[p, 0], nx)
        j, fy, _ = _axis(idx[p, 1], ny)
        k, fz, _ = _axis(idx[p, 2], nz)
        c000, c001, c010, c011, c100, c101, c110, c111 = _corners3(i, j, k, ny, nz)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        for c in range(vals.shape[1]):
            out[p, c] = (gx * (gy * (gz * vals[c000, c] + fz * vals[c001, c])
                               + fy * (gz * vals[c010, c] + fz * vals[c011, c]))
                         + fx * (gy * (gz * vals[c100, c] + fz * vals[c101, c])
                                 + fy * (gz * vals[c110, c] + fz * vals[c111, c])))


@njit(cache=True)
def interp3_grad(vals, nx, ny, nz, idx, out, jac):
    for p in range(idx.shape[0]):
        i, fx, inx = _axis(idx[p, 0], nx)
        j, fy, iny = _axis(idx[p, 1], ny)
        k, fz, inz = _axis(idx[p, 2], nz)
        c000, c001, c010, c011, c100, c101, c110, c111 = _corners3(i, j, k, ny, nz)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        sx = 1.0 if inx else 0.0
        sy = 1.0 if iny else 0.0
        sz = 1.0 if inz else 0.0
        for c in range(vals.shape[1]):
            v000 = vals[c000, c]
            v001 = vals[c001, c]
            v010 = vals[c010, c]
            v011 = vals[c011, c]
            v100 = vals[c100, c]
            v101 = vals[c101, c]
            v110 = vals[c110, c]
            v111 = vals[c111, c]
            e00 = gz * v000 + fz * v001
            e01 = gz * v010 + fz * v011
            e10 = gz * v100 + fz * v101
            e11 = gz * v110 + fz * v111
            out[p, c] = gx * (gy * e00 + fy * e01) + fx * (gy * e10 + fy * e11)
            jac[p, c, 0] = sx * (gy * (e10 - e00) + fy * (e11 - e01))
            jac[p, c, 1] = sy * (gx * (e01 - e00) + fx * (e11 - e10))
            jac[p, c, 2] = sz * (gx * (gy * (v001 - v000) + fy * (v011 - v010))
                                 + fx * (gy * (v101 - v100) + fy * (v111 - v110)))


@njit(cache=True)
def interp3_transpose(wts, nx, ny, nz, idx, out):
    for p in range(idx.shape[0]):
        i, fx, _ = _axis(idx[p, 0], nx)
        j, fy, _ = _axis(idx[p, 1], ny)
        k, fz, _ = _axis(idx[p, 2], nz)
        c000, c001, c010, c011, c100, c101, c110, c111 = _corners3(i, j, k, ny, nz)
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        for c in range(wts.shape[1]):
            g = wts[p, c]
            out[c000, c] += gx * gy * gz * g
            out[c001, c] += gx * gy * fz * g
            out[c010, c] += gx * fy * gz * g
            out[c011, c] += gx * fy * fz * g
            out[c100, c] += fx * gy * gz * g
            out[c101, c] += fx * gy * fz * g
            out[c110, c] += fx * fy * gz * g
            out[c111, c] += fx * fy * fz * g
