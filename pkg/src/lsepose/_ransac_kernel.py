"""Compiled hypothesis generation for the RANSAC loop.

All randomness arrives as pre-drawn uniforms so the Python side owns the RNG
and results do not depend on how the loop is compiled or scheduled.
"""
import numpy as np
from numba import njit

from ._pnp_kernel import epnp_kernel

OK = 0
SOLVER_FAILED = 1
PRETEST_FAILED = 2


@njit(cache=True)
def _sample_pixels(u, npix, n, out):
    """Floyd's algorithm: ``n`` distinct values of ``range(npix)`` from ``n`` uniforms."""
    m = 0
    for j in range(npix - n, npix):
        t = min(int(u[m] * (j + 1)), j)
        dup = False
        for q in range(m):
            if out[q] == t:
                dup = True
                break
        out[m] = j if dup else t
        m += 1


@njit(cache=True)
def _reproj_err(R, t, X, u, v, fx, fy, cx, cy):
    z = R[2, 0] * X[0] + R[2, 1] * X[1] + R[2, 2] * X[2] + t[2]
    if not z > 0:
        return np.inf
    x = R[0, 0] * X[0] + R[0, 1] * X[1] + R[0, 2] * X[2] + t[0]
    y = R[1, 0] * X[0] + R[1, 1] * X[1] + R[1, 2] * X[2] + t[1]
    du = fx * x / z + cx - u
    dv = fy * y / z + cy - v
    return np.sqrt(du * du + dv * dv)


@njit(cache=True)
def count_inliers(R, t, pixels, offsets, points, fx, fy, cx, cy, thr):
    """Pixels whose best candidate reprojects within ``thr``."""
    c = 0
    for p in range(pixels.shape[0]):
        u = float(pixels[p, 0])
        v = float(pixels[p, 1])
        for j in range(offsets[p], offsets[p + 1]):
            if _reproj_err(R, t, points[j], u, v, fx, fy, cx, cy) < thr:
                c += 1
                break
    return c


@njit(cache=True)
def generate(U, smin, smax, pixels, offsets, points, cumw, gpix, goff, gpts, fx, fy, cx, cy, thr):
    """One hypothesis per row of ``U``.

    Row layout: ``U[i, 0]`` picks the sample size, ``U[i, 1:1+smax]`` the pixels
    and ``U[i, 1+smax:1+2*smax]`` the candidate rank within each pixel, drawn
    through the per-count cumulative weights ``cumw[count]``. Inliers are
    counted over the correspondence subset ``(gpix, goff, gpts)``.

    :return: ``(R, t, status, inliers)`` per iteration.
    """
    N = U.shape[0]
    npix = pixels.shape[0]
    Rs = np.zeros((N, 3, 3))
    ts = np.zeros((N, 3))
    status = np.full(N, SOLVER_FAILED, np.int64)
    inl = np.zeros(N, np.int64)
    sel = np.empty(smax, np.int64)
    for i in range(N):
        n = smin + min(int(U[i, 0] * (smax - smin + 1)), smax - smin)
        _sample_pixels(U[i, 1:1 + n], npix, n, sel)
        uv = np.empty((n, 2))
        X = np.empty((n, 3))
        for s in range(n):
            p = sel[s]
            cnt = offsets[p + 1] - offsets[p]
            r = 0
            us = U[i, 1 + smax + s]
            while r < cnt - 1 and cumw[cnt, r] <= us:
                r += 1
            uv[s, 0] = pixels[p, 0]
            uv[s, 1] = pixels[p, 1]
            X[s] = points[offsets[p] + r]
        R, t, st = epnp_kernel(uv, X, fx, fy, cx, cy)
        if st != 0:
            continue
        Rs[i] = R
        ts[i] = t
        ok = True
        for s in range(n):
            if not _reproj_err(R, t, X[s], uv[s, 0], uv[s, 1], fx, fy, cx, cy) < thr:
                ok = False
                break
        if not ok:
            status[i] = PRETEST_FAILED
            continue
        status[i] = OK
        inl[i] = count_inliers(R, t, gpix, goff, gpts, fx, fy, cx, cy, thr)
    return Rs, ts, status, inl
