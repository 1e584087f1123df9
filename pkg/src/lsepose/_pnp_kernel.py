"""Compiled control-point PnP used for RANSAC hypothesis generation.

Mirrors :func:`lsepose.pnp.epnp` step by step.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _pairs(nc):
    m = nc * (nc - 1) // 2
    out = np.empty((m, 2), np.int64)
    c = 0
    for a in range(nc):
        for b in range(a + 1, nc):
            out[c, 0] = a
            out[c, 1] = b
            c += 1
    return out


@njit(cache=True)
def _solve(A, b):
    """Gaussian elimination with partial pivoting; ``ok`` is False for a (near) singular ``A``."""
    n = A.shape[0]
    M = A.copy()
    x = b.copy()
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale = max(scale, abs(M[i, j]))
    if not scale > 0:
        return x, False
    for c in range(n):
        p = c
        for r in range(c + 1, n):
            if abs(M[r, c]) > abs(M[p, c]):
                p = r
        if not abs(M[p, c]) > 1e-14 * scale:
            return x, False
        if p != c:
            for j in range(n):
                M[c, j], M[p, j] = M[p, j], M[c, j]
            x[c], x[p] = x[p], x[c]
        for r in range(c + 1, n):
            f = M[r, c] / M[c, c]
            for j in range(c, n):
                M[r, j] -= f * M[c, j]
            x[r] -= f * x[c]
    for c in range(n - 1, -1, -1):
        acc = x[c]
        for j in range(c + 1, n):
            acc -= M[c, j] * x[j]
        x[c] = acc / M[c, c]
    return x, True


@njit(cache=True)
def _betas_init(D, rho, N):
    P = D.shape[0]
    npairs = N * (N + 1) // 2
    if P < npairs:
        return np.zeros(0)
    L = np.empty((P, npairs))
    kk = np.empty(npairs, np.int64)
    ll = np.empty(npairs, np.int64)
    c = 0
    for k in range(N):
        for l in range(k, N):
            kk[c] = k
            ll[c] = l
            f = 1.0 if k == l else 2.0
            for p in range(P):
                L[p, c] = f * (D[p, k, 0] * D[p, l, 0] + D[p, k, 1] * D[p, l, 1] + D[p, k, 2] * D[p, l, 2])
            c += 1
    sol, ok = _solve(L.T @ L, L.T @ rho)
    if not ok:
        return np.zeros(0)
    b = np.zeros(N)
    for c in range(npairs):
        if kk[c] == 0 and ll[c] == 0:
            b[0] = np.sqrt(abs(sol[c]))
    for k in range(1, N):
        s = 1.0
        mag = 0.0
        for c in range(npairs):
            if kk[c] == 0 and ll[c] == k and sol[c] < 0:
                s = -1.0
            if kk[c] == k and ll[c] == k:
                mag = np.sqrt(abs(sol[c]))
        b[k] = s * mag
    return b


@njit(cache=True)
def _gauss_newton(D, rho, beta):
    P, K = D.shape[0], D.shape[1]
    for _ in range(5):
        comb = np.zeros((P, 3))
        for p in range(P):
            for k in range(K):
                for i in range(3):
                    comb[p, i] += beta[k] * D[p, k, i]
        err = np.empty(P)
        J = np.empty((P, K))
        for p in range(P):
            err[p] = -(comb[p, 0] ** 2 + comb[p, 1] ** 2 + comb[p, 2] ** 2 - rho[p])
            for k in range(K):
                J[p, k] = 2.0 * (comb[p, 0] * D[p, k, 0] + comb[p, 1] * D[p, k, 1] + comb[p, 2] * D[p, k, 2])
        step, ok = _solve(J.T @ J, J.T @ err)
        if not ok:
            break
        beta = beta + step
        if np.max(np.abs(step)) < 1e-14 * (np.max(np.abs(beta)) + 1e-300):
            break
    return beta


@njit(cache=True)
def _procrustes(X, Y):
    mx = np.zeros(3)
    my = np.zeros(3)
    n = X.shape[0]
    for i in range(n):
        mx += X[i]
        my += Y[i]
    mx /= n
    my /= n
    H = (X - mx).T @ (Y - my)
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt[2] = -Vt[2]
        R = Vt.T @ U.T
    return R, my - R @ mx


@njit(cache=True)
def epnp_kernel(uv, X, fx, fy, cx, cy):
    """Returns ``(R, t, status)``; status 0 ok, 1 degenerate, 2 failure."""
    n = X.shape[0]
    R_best = np.eye(3)
    t_best = np.zeros(3)
    c0 = np.zeros(3)
    for i in range(n):
        c0 += X[i]
    c0 /= n
    A = X - c0
    w, V = np.linalg.eigh(A.T @ A / n)
    w = w[::-1].copy()
    V = V[:, ::-1].copy()
    if not w[0] > 0 or w[1] <= 1e-12 * w[0]:
        return R_best, t_best, 1
    nc = 3 if w[2] <= 1e-10 * w[0] else 4
    axes = np.empty((nc - 1, 3))
    for j in range(nc - 1):
        axes[j] = np.sqrt(w[j]) * V[:, j]
    cw = np.empty((nc, 3))
    cw[0] = c0
    for j in range(nc - 1):
        cw[j + 1] = c0 + axes[j]
    # the axes are orthogonal, so the pseudo-inverse is a scaled transpose
    coef = A @ (V[:, :nc - 1].copy() / np.sqrt(w[:nc - 1]))
    alphas = np.empty((n, nc))
    for i in range(n):
        s = 0.0
        for j in range(nc - 1):
            alphas[i, j + 1] = coef[i, j]
            s += coef[i, j]
        alphas[i, 0] = 1.0 - s
    M = np.zeros((2 * n, 3 * nc))
    for i in range(n):
        xn = (uv[i, 0] - cx) / fx
        yn = (uv[i, 1] - cy) / fy
        for j in range(nc):
            a = alphas[i, j]
            M[2 * i, 3 * j] = a
            M[2 * i, 3 * j + 2] = -a * xn
            M[2 * i + 1, 3 * j + 1] = a
            M[2 * i + 1, 3 * j + 2] = -a * yn
    _, Vm = np.linalg.eigh(M.T @ M)
    pairs = _pairs(nc)
    P = pairs.shape[0]
    rho = np.empty(P)
    for p in range(P):
        d = cw[pairs[p, 0]] - cw[pairs[p, 1]]
        rho[p] = d[0] ** 2 + d[1] ** 2 + d[2] ** 2
    nmax = min(4, nc)
    kernel = np.empty((nmax, nc, 3))
    for k in range(nmax):
        for j in range(nc):
            for i in range(3):
                kernel[k, j, i] = Vm[3 * j + i, k]
    D = np.empty((P, nmax, 3))
    for p in range(P):
        for k in range(nmax):
            D[p, k] = kernel[k, pairs[p, 0]] - kernel[k, pairs[p, 1]]
    best = np.inf
    found = False
    for N in range(1, nmax + 1):
        b0 = _betas_init(D[:, :N].copy(), rho, N)
        if b0.shape[0] == 0:
            continue
        beta = np.zeros(nmax)
        beta[:N] = b0
        beta = _gauss_newton(D, rho, beta)
        cc = np.zeros((nc, 3))
        for k in range(nmax):
            cc += beta[k] * kernel[k]
        pc = alphas @ cc
        if np.mean(pc[:, 2]) < 0:
            pc = -pc
        R, t = _procrustes(X, pc)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            continue
        score = 0.0
        for i in range(n):
            q = R @ X[i] + t
            du = fx * q[0] / q[2] + cx - uv[i, 0]
            dv = fy * q[1] / q[2] + cy - uv[i, 1]
            score += du * du + dv * dv
        if np.isfinite(score) and score < best:
            best = score
            R_best = R
            t_best = t
            found = True
    return R_best, t_best, 0 if found else 2
