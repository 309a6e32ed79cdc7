"""Compiled EPDiff right-hand side and its adjoint on flattened grids.

Arrays are ``(P, d)`` with points in C order over ``dims``. Derivatives use
central differences inside and one-sided differences on the border, exactly
as :func:`geoflow.grid.diff_array`.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _strides(dims):
    d = dims.shape[0]
    st = np.ones(d, dtype=np.int64)
    for a in range(d - 2, -1, -1):
        st[a] = st[a + 1] * dims[a + 1]
    return st


@njit(cache=True)
def _axis_coords(dims):
    """Per-point coordinate index along each axis, shape ``(d, P)``."""
    d = dims.shape[0]
    st = _strides(dims)
    n = st[0] * dims[0]
    q = np.empty((d, n), dtype=np.int64)
    for a in range(d):
        k = 0
        reps = n // (st[a] * dims[a])
        for _ in range(reps):
            for c in range(dims[a]):
                for _ in range(st[a]):
                    q[a, k] = c
                    k += 1
    return q


@njit(cache=True)
def _jacobian(f, dims, st, q, h, out):
    d = dims.shape[0]
    for a in range(d):
        s = st[a]
        last = dims[a] - 1
        inv = 1.0 / h[a]
        half = 0.5 / h[a]
        for p in range(f.shape[0]):
            c = q[a, p]
            if c == 0:
                lo, hi, scale = p, p + s, inv
            elif c == last:
                lo, hi, scale = p - s, p, inv
            else:
                lo, hi, scale = p - s, p + s, half
            for i in range(f.shape[1]):
                out[p, i, a] = (f[hi, i] - f[lo, i]) * scale


@njit(cache=True)
def jacobian(f, dims, h, out):
    """out[p, i, a] = d f_i / d x_a."""
    _jacobian(f, dims, _strides(dims), _axis_coords(dims), h, out)


@njit(cache=True)
def _diffT_add(g, a, dims, st, q, h, out, oc):
    """out[:, oc] += D_a^T g (g is one channel)."""
    s = st[a]
    last = dims[a] - 1
    inv = 1.0 / h[a]
    half = 0.5 / h[a]
    for p in range(g.shape[0]):
        gp = g[p]
        c = q[a, p]
        if c == 0:
            w = gp * inv
            out[p, oc] -= w
            out[p + s, oc] += w
        elif c == last:
            w = gp * inv
            out[p - s, oc] -= w
            out[p, oc] += w
        else:
            w = gp * half
            out[p - s, oc] -= w
            out[p + s, oc] += w


@njit(cache=True)
def rhs(m, v, dims, h, out):
    """out = -(Dv)^T m + sum_a D_a^T (v_a m)."""
    d = dims.shape[0]
    n = m.shape[0]
    st = _strides(dims)
    q = _axis_coords(dims)
    dv = np.empty((n, d, d))
    _jacobian(v, dims, st, q, h, dv)
    for p in range(n):
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += dv[p, j, i] * m[p, j]
            out[p, i] = -acc
    tmp = np.empty(n)
    for a in range(d):
        for i in range(d):
            for p in range(n):
                tmp[p] = v[p, a] * m[p, i]
            _diffT_add(tmp, a, dims, st, q, h, out, i)


@njit(cache=True)
def rhs_adjoint(m, v, mu, dims, h, lam_m, lam_v):
    d = dims.shape[0]
    n = m.shape[0]
    st = _strides(dims)
    q = _axis_coords(dims)
    dv = np.empty((n, d, d))
    dmu = np.empty((n, d, d))
    _jacobian(v, dims, st, q, h, dv)
    _jacobian(mu, dims, st, q, h, dmu)
    for p in range(n):
        for j in range(d):
            am = 0.0
            av = 0.0
            for i in range(d):
                am += -dv[p, j, i] * mu[p, i] + dmu[p, j, i] * v[p, i]
                av += dmu[p, i, j] * m[p, i]
            lam_m[p, j] = am
            lam_v[p, j] = av
    tmp = np.empty(n)
    for a in range(d):
        for i in range(d):
            # lam_v_i -= D_a^T (mu_a m_i)
            for p in range(n):
                tmp[p] = -mu[p, a] * m[p, i]
            _diffT_add(tmp, a, dims, st, q, h, lam_v, i)
