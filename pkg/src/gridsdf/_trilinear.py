"""Numba kernels for trilinear interpolation and its derivatives.

``derivs`` is an int array of shape (D, 3) holding per-axis derivative orders
(0 or 1) for each requested output. Orders >= 2 produce zeros.
"""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _locate(x, res):
    """Cell, fraction and inside flag along one axis (x in lattice units)."""
    inside = 1.0
    if x < 0.0:
        x = 0.0
        inside = 0.0
    elif x > res - 1:
        x = float(res - 1)
        inside = 0.0
    c = int(np.floor(x))
    if c > res - 2:
        c = res - 2
    return c, x - c, inside


@numba.njit(cache=True, inline="always")
def _factor(bit, order, f, scale):
    if order == 0:
        return f if bit == 1 else 1.0 - f
    if order == 1:
        return scale if bit == 1 else -scale
    return 0.0


@numba.njit(cache=True)
def forward(u, flat, res, derivs):
    n = u.shape[0]
    ch = flat.shape[1]
    nd = derivs.shape[0]
    out = np.zeros((nd, n, ch))
    s = float(res - 1)
    for i in range(n):
        cx, fx, ix = _locate(u[i, 0] * s, res)
        cy, fy, iy = _locate(u[i, 1] * s, res)
        cz, fz, iz = _locate(u[i, 2] * s, res)
        for k in range(8):
            bx = (k >> 2) & 1
            by = (k >> 1) & 1
            bz = k & 1
            row = ((cx + bx) * res + (cy + by)) * res + (cz + bz)
            for d in range(nd):
                w = (_factor(bx, derivs[d, 0], fx, s * ix)
                     * _factor(by, derivs[d, 1], fy, s * iy)
                     * _factor(bz, derivs[d, 2], fz, s * iz))
                if w != 0.0:
                    for c in range(ch):
                        out[d, i, c] += w * flat[row, c]
    return out


@numba.njit(cache=True)
def backward_grid(u, g, res, derivs, ch):
    """Scatter-add of ``g`` (D, N, C) into a flat (res^3, C) gradient, serial order."""
    n = u.shape[0]
    nd = derivs.shape[0]
    out = np.zeros((res * res * res, ch))
    s = float(res - 1)
    for i in range(n):
        cx, fx, ix = _locate(u[i, 0] * s, res)
        cy, fy, iy = _locate(u[i, 1] * s, res)
        cz, fz, iz = _locate(u[i, 2] * s, res)
        for k in range(8):
            bx = (k >> 2) & 1
            by = (k >> 1) & 1
            bz = k & 1
            row = ((cx + bx) * res + (cy + by)) * res + (cz + bz)
            for d in range(nd):
                w = (_factor(bx, derivs[d, 0], fx, s * ix)
                     * _factor(by, derivs[d, 1], fy, s * iy)
                     * _factor(bz, derivs[d, 2], fz, s * iz))
                if w != 0.0:
                    for c in range(ch):
                        out[row, c] += w * g[d, i, c]
    return out


def backward_points(u, flat, res, derivs, g):
    """Gradient with respect to the normalized points: one more derivative per axis."""
    gu = np.zeros(u.shape)
    for b in range(3):
        bumped = derivs.copy()
        bumped[:, b] += 1
        gu[:, b] = np.sum(forward(u, flat, res, bumped) * g, axis=(0, 2))
    return gu
