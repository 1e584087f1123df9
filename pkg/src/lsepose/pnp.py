"""Perspective-n-Point: closed-form control-point solver and Levenberg-Marquardt refinement."""
from __future__ import annotations

import itertools

import numpy as np

from ._pnp_kernel import epnp_kernel
from .errors import DegenerateConfigurationError, PnPFailure
from .projective import Pose


def rodrigues(w):
    """Rotation matrix of the rotation vector ``w``."""
    th = np.sqrt(w @ w)
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if th < 1e-8:
        # second-order series keeps the result orthogonal to ~1e-24
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1.0 - np.cos(th)) / th**2 * K @ K


def _check_inputs(pixels, points):
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(uv) != len(X):
        raise ValueError("pixels and points differ in length")
    if len(X) < 4:
        raise DegenerateConfigurationError("PnP needs at least 4 correspondences")
    return uv, X


def _control_points(X):
    c0 = X.mean(axis=0)
    A = X - c0
    w, V = np.linalg.eigh(A.T @ A / len(X))
    w, V = w[::-1], V[:, ::-1]
    if not w[0] > 0 or w[1] <= 1e-12 * w[0]:
        raise DegenerateConfigurationError("3D points are collinear or coincident")
    planar = w[2] <= 1e-10 * w[0]
    nc = 3 if planar else 4
    axes = (np.sqrt(w[: nc - 1])[:, None] * V[:, : nc - 1].T)
    cw = np.vstack([c0, c0 + axes])
    # barycentric coordinates w.r.t. the control points
    coef = A @ np.linalg.pinv(axes)
    alphas = np.column_stack([1.0 - coef.sum(axis=1), coef])
    return cw, alphas


def _betas_init(D, rho, N):
    """Linearised distance constraints for the first ``N`` kernel vectors."""
    pairs = list(itertools.combinations_with_replacement(range(N), 2))
    L = np.empty((len(rho), len(pairs)))
    for c, (k, l) in enumerate(pairs):
        L[:, c] = (1.0 if k == l else 2.0) * np.einsum("pi,pi->p", D[:, k], D[:, l])
    if L.shape[0] < L.shape[1]:
        return None
    sol = np.linalg.lstsq(L, rho, rcond=None)[0]
    b = np.zeros(N)
    b[0] = np.sqrt(abs(sol[pairs.index((0, 0))]))
    for k in range(1, N):
        s = np.sign(sol[pairs.index((0, k))]) or 1.0
        b[k] = s * np.sqrt(abs(sol[pairs.index((k, k))]))
    return b


def _gauss_newton(D, rho, beta, iters=8):
    for _ in range(iters):
        comb = np.einsum("pki,k->pi", D, beta)
        err = np.einsum("pi,pi->p", comb, comb) - rho
        J = 2.0 * np.einsum("pi,pki->pk", comb, D)
        step, *_ = np.linalg.lstsq(J, -err, rcond=None)
        beta = beta + step
        if np.abs(step).max() < 1e-14 * (np.abs(beta).max() + 1e-300):
            break
    return beta


def _procrustes(X, Y):
    """Rotation and translation minimising ||R X + t - Y||."""
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    H = (X - mx).T @ (Y - my)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, my - R @ mx


def _reproj_sq(R, t, X, uv, cam):
    pc = X @ R.T + t
    z = pc[:, 2]
    du = cam.fx * pc[:, 0] / z + cam.cx - uv[:, 0]
    dv = cam.fy * pc[:, 1] / z + cam.cy - uv[:, 1]
    return du * du + dv * dv


def epnp(pixels, points, cam):
    """Closed-form pose from n >= 4 correspondences (no iterative polish).

    Compiled path; :func:`epnp_reference` is the plain numpy version and
    also serves inputs below 6 points, where its least-squares solves are
    better conditioned than the kernel's normal equations.
    """
    uv, X = _check_inputs(pixels, points)
    if len(X) < 6:
        return epnp_reference(uv, X, cam)
    R, t, status = epnp_kernel(np.ascontiguousarray(uv), np.ascontiguousarray(X),
                               float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy))
    if status == 1:
        raise DegenerateConfigurationError("3D points are collinear or coincident")
    if status == 2:
        raise PnPFailure("no finite control-point solution")
    return Pose(R, t, check=False)


def epnp_reference(pixels, points, cam):
    """Numpy control-point solver, kept as a readable reference for :func:`epnp`."""
    uv, X = _check_inputs(pixels, points)
    cw, alphas = _control_points(X)
    nc = len(cw)
    xn = (uv[:, 0] - cam.cx) / cam.fx
    yn = (uv[:, 1] - cam.cy) / cam.fy
    n = len(X)
    M = np.zeros((2 * n, 3 * nc))
    M[0::2, 0::3] = alphas
    M[0::2, 2::3] = -alphas * xn[:, None]
    M[1::2, 1::3] = alphas
    M[1::2, 2::3] = -alphas * yn[:, None]
    _, V = np.linalg.eigh(M.T @ M)
    pairs = list(itertools.combinations(range(nc), 2))
    rho = np.array([np.sum((cw[a] - cw[b]) ** 2) for a, b in pairs])
    nmax = min(4, nc)
    kernel = V[:, :nmax].T.reshape(nmax, nc, 3)
    # D[pair, kernel vector] = difference of the two control points in that kernel vector
    D = np.stack([kernel[:, a] - kernel[:, b] for a, b in pairs])
    best = None
    for N in range(1, nmax + 1):
        b0 = _betas_init(D[:, :N], rho, N)
        if b0 is None:
            continue
        beta = _gauss_newton(D, rho, np.concatenate([b0, np.zeros(nmax - N)]))
        cc = np.einsum("k,kci->ci", beta, kernel)
        pc = alphas @ cc
        if pc[:, 2].mean() < 0:
            pc = -pc
        R, t = _procrustes(X, pc)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            continue
        err = _reproj_sq(R, t, X, uv, cam)
        score = err.sum() if np.all(np.isfinite(err)) else np.inf
        if best is None or score < best[0]:
            best = (score, R, t)
    if best is None or not np.isfinite(best[0]):
        raise PnPFailure("no finite control-point solution")
    return Pose(best[1], best[2], check=False)


def reprojection_residuals(pose, pixels, points, cam):
    """Stacked ``(u_pred - u, v_pred - v)`` residuals, length 2n."""
    pc = pose.apply(points)
    z = pc[:, 2]
    r = np.empty((len(pc), 2))
    r[:, 0] = cam.fx * pc[:, 0] / z + cam.cx - pixels[:, 0]
    r[:, 1] = cam.fy * pc[:, 1] / z + cam.cy - pixels[:, 1]
    return r.reshape(-1)


def reprojection_jacobian(pose, points, cam):
    """Jacobian of :func:`reprojection_residuals` w.r.t. ``(w, dt)`` of the update
    ``R <- exp([w]x) R``, ``t <- t + dt`` at ``w = dt = 0``."""
    X = np.asarray(points, dtype=np.float64)
    a = X @ pose.R.T
    pc = a + pose.t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    n = len(X)
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = cam.fx * iz
    Jp[:, 0, 2] = -cam.fx * x * iz * iz
    Jp[:, 1, 1] = cam.fy * iz
    Jp[:, 1, 2] = -cam.fy * y * iz * iz
    # d(exp(w) a)/dw at 0 is -[a]x
    skew = np.zeros((n, 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = a[:, 2], -a[:, 1]
    skew[:, 1, 0], skew[:, 1, 2] = -a[:, 2], a[:, 0]
    skew[:, 2, 0], skew[:, 2, 1] = a[:, 1], -a[:, 0]
    J = np.concatenate([Jp @ skew, Jp], axis=2)
    return J.reshape(2 * n, 6)


def apply_update(pose, delta):
    return Pose(rodrigues(delta[:3]) @ pose.R, pose.t + delta[3:], check=False)


def refine_pose(initial, pixels, points, cam, max_iter=100, gtol=1e-10, xtol=1e-12):
    """Levenberg-Marquardt minimisation of the summed squared reprojection error.

    Never returns a pose with higher cost than ``initial``.
    """
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pose = initial
    r = reprojection_residuals(pose, uv, X, cam)
    if not np.all(np.isfinite(r)):
        return initial
    cost = 0.5 * (r @ r)
    mu, nu = None, 2.0
    for _ in range(max_iter):
        J = reprojection_jacobian(pose, X, cam)
        g = J.T @ r
        if np.linalg.norm(g) < gtol:
            break
        A = J.T @ J
        if mu is None:
            mu = 1e-3 * max(np.max(np.diag(A)), 1e-12)
        try:
            delta = np.linalg.solve(A + mu * np.eye(6), -g)
        except np.linalg.LinAlgError:
            break
        if np.linalg.norm(delta) < xtol:
            break
        cand = apply_update(pose, delta)
        r_new = reprojection_residuals(cand, uv, X, cam)
        cost_new = 0.5 * (r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        predicted = 0.5 * delta @ (mu * delta - g)
        gain = (cost - cost_new) / predicted if predicted > 0 else -1.0
        if cost_new < cost and gain > 0:
            pose, r, cost = cand, r_new, cost_new
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
            nu = 2.0
        else:
            mu *= nu
            nu *= 2.0
            if mu > 1e32:
                break
    return pose


def solve_pnp(pixels, points, cam):
    """Pose from >= 4 non-collinear 2D-3D correspondences: closed form, then LM polish."""
    uv, X = _check_inputs(pixels, points)
    pose = refine_pose(epnp(uv, X, cam), uv, X, cam)
    if not (np.all(np.isfinite(pose.R)) and np.all(np.isfinite(pose.t))):
        raise PnPFailure("solver produced a non-finite pose")
    return pose
