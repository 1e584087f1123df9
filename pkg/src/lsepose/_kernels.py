"""Compiled inner loops for embedding a whole sample set at once."""
import numpy as np
from numba import njit


def build_grid(pos, cell):
    """Bucket points into a dense grid of cubic cells of side ``cell``."""
    lo = pos.min(axis=0)
    coords = np.floor((pos - lo) / cell).astype(np.int64)
    dims = coords.max(axis=0) + 1
    keys = (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]
    order = np.argsort(keys, kind="stable")
    starts = np.searchsorted(keys[order], np.arange(dims.prod() + 1))
    return coords, dims.astype(np.int64), order.astype(np.int64), starts.astype(np.int64)


@njit(cache=True)
def _scatter(pos, coords, dims, order, starts, r):
    n = pos.shape[0]
    out = np.zeros((n, 3, 3))
    counts = np.zeros(n, np.int64)
    for i in range(n):
        cx, cy, cz = coords[i, 0], coords[i, 1], coords[i, 2]
        c00 = c01 = c02 = c11 = c12 = c22 = 0.0
        m = 0
        for gx in range(max(cx - 1, 0), min(cx + 2, dims[0])):
            for gy in range(max(cy - 1, 0), min(cy + 2, dims[1])):
                for gz in range(max(cz - 1, 0), min(cz + 2, dims[2])):
                    key = (gx * dims[1] + gy) * dims[2] + gz
                    for s in range(starts[key], starts[key + 1]):
                        j = order[s]
                        dx = pos[j, 0] - pos[i, 0]
                        dy = pos[j, 1] - pos[i, 1]
                        dz = pos[j, 2] - pos[i, 2]
                        if np.sqrt(dx * dx + dy * dy + dz * dz) <= r:
                            c00 += dx * dx
                            c01 += dx * dy
                            c02 += dx * dz
                            c11 += dy * dy
                            c12 += dy * dz
                            c22 += dz * dz
                            m += 1
        out[i, 0, 0] = c00
        out[i, 0, 1] = c01
        out[i, 0, 2] = c02
        out[i, 1, 0] = c01
        out[i, 1, 1] = c11
        out[i, 1, 2] = c12
        out[i, 2, 0] = c02
        out[i, 2, 1] = c12
        out[i, 2, 2] = c22
        counts[i] = m
    return out, counts


@njit(cache=True, inline="always")
def _pw(x, x2, e):
    if e == 0:
        return 1.0
    if e == 1:
        return x
    if e == 2:
        return x2
    out = x2
    for _ in range(e - 2):
        out *= x
    return out


@njit(cache=True)
def _moments(pos, rot, coords, dims, order, starts, r, scale, inv_sigma2, exps, valid):
    n = pos.shape[0]
    ne = exps.shape[0]
    out = np.zeros((n, ne))
    for i in range(n):
        if not valid[i]:
            continue
        acc = np.zeros(ne)
        r00, r01, r02 = rot[i, 0, 0], rot[i, 0, 1], rot[i, 0, 2]
        r10, r11, r12 = rot[i, 1, 0], rot[i, 1, 1], rot[i, 1, 2]
        r20, r21, r22 = rot[i, 2, 0], rot[i, 2, 1], rot[i, 2, 2]
        cx, cy, cz = coords[i, 0], coords[i, 1], coords[i, 2]
        for gx in range(max(cx - 1, 0), min(cx + 2, dims[0])):
            for gy in range(max(cy - 1, 0), min(cy + 2, dims[1])):
                for gz in range(max(cz - 1, 0), min(cz + 2, dims[2])):
                    key = (gx * dims[1] + gy) * dims[2] + gz
                    for s in range(starts[key], starts[key + 1]):
                        j = order[s]
                        dx = pos[j, 0] - pos[i, 0]
                        dy = pos[j, 1] - pos[i, 1]
                        dz = pos[j, 2] - pos[i, 2]
                        if np.sqrt(dx * dx + dy * dy + dz * dz) > r:
                            continue
                        dx *= scale
                        dy *= scale
                        dz *= scale
                        x = r00 * dx + r01 * dy + r02 * dz
                        y = r10 * dx + r11 * dy + r12 * dz
                        z = r20 * dx + r21 * dy + r22 * dz
                        x2 = x * x
                        y2 = y * y
                        z2 = z * z
                        w = np.exp(-(x2 + y2 + z2) * inv_sigma2)
                        for e in range(ne):
                            acc[e] += w * _pw(x, x2, exps[e, 0]) * _pw(y, y2, exps[e, 1]) * _pw(z, z2, exps[e, 2])
        out[i] = acc
    return out


def scatter_matrices(pos, r):
    coords, dims, order, starts = build_grid(pos, r)
    return _scatter(pos, coords, dims, order, starts, float(r))


def neighborhood_moments(pos, rot, r, scale, sigma, exponents, valid):
    coords, dims, order, starts = build_grid(pos, r)
    exps = np.asarray(exponents, dtype=np.int64).reshape(-1, 3)
    return _moments(pos, rot, coords, dims, order, starts, float(r), float(scale),
                    1.0 / float(sigma) ** 2, exps, valid)


@njit(cache=True)
def suppress_rows(ids, counts, pos, r2):
    """Greedy spatial suppression of every row of a distance-sorted candidate table.

    :return: boolean keep table with the shape of ``ids``.
    """
    nq, k = ids.shape
    keep = np.zeros((nq, k), np.bool_)
    alive = np.empty(k, np.bool_)
    for q in range(nq):
        kc = counts[q]
        for s in range(kc):
            alive[s] = True
        for h in range(kc):
            if not alive[h]:
                continue
            keep[q, h] = True
            a = ids[q, h]
            for s in range(h + 1, kc):
                if alive[s]:
                    b = ids[q, s]
                    dx = pos[b, 0] - pos[a, 0]
                    dy = pos[b, 1] - pos[a, 1]
                    dz = pos[b, 2] - pos[a, 2]
                    if dx * dx + dy * dy + dz * dz <= r2:
                        alive[s] = False
    return keep


@njit(cache=True, inline="always")
def _dist(X, j, Q, q):
    acc = 0.0
    for c in range(X.shape[1]):
        t = X[j, c] - Q[q, c]
        acc += t * t
    return np.sqrt(acc)


@njit(cache=True)
def dists_to(X, Q):
    """Euclidean distance of every row of ``X`` to the single query ``Q[0]``."""
    out = np.empty(X.shape[0])
    for j in range(X.shape[0]):
        out[j] = _dist(X, j, Q, 0)
    return out


@njit(cache=True)
def rank_rows(X, Q, cand, unstable, kq):
    """Exact distances of every candidate row, ordered by (distance, unstable, id).

    :return: ``(ids, dists)`` of the first ``kq`` per row.
    """
    nq, kk = cand.shape
    out_i = np.empty((nq, kq), np.int64)
    out_d = np.empty((nq, kq))
    d = np.empty(kk)
    ids = np.empty(kk, np.int64)
    for q in range(nq):
        for s in range(kk):
            d[s] = _dist(X, cand[q, s], Q, q)
        o = np.argsort(d)
        for s in range(kk):
            ids[s] = cand[q, o[s]]
        ds = d[o]
        # insertion sort on (unstable, id) inside runs of equal distance
        s = 0
        while s < kk:
            e = s + 1
            while e < kk and ds[e] == ds[s]:
                e += 1
            for a in range(s + 1, e):
                v = ids[a]
                b = a - 1
                while b >= s and (unstable[ids[b]] > unstable[v]
                                  or (unstable[ids[b]] == unstable[v] and ids[b] > v)):
                    ids[b + 1] = ids[b]
                    b -= 1
                ids[b + 1] = v
            s = e
        for s in range(kq):
            out_i[q, s] = ids[s]
            out_d[q, s] = ds[s]
    return out_i, out_d
