"""Rotation-invariant local surface embeddings (LSE).

For a surface point ``P`` with normal ``n`` and neighbours ``M`` inside a
sphere of radius ``r``, the offsets ``v = M - P`` are rotated into a local
frame obtained from the SVD of their scatter matrix, then summarised by
Gaussian-weighted moments ``sum w x^i y^j z^k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFrameError
from .mesh_geom import PointSamples

DEFAULT_EXPONENTS = tuple(
    (i, j, k) for i in (0, 2) for j in (0, 2) for k in (0, 1, 2) if (i, j, k) != (0, 0, 0)
)


@dataclass(frozen=True)
class LseParams:
    """Embedding parameters.

    ``radius`` and ``sigma`` are in centimetres; ``unit_scale_to_cm`` converts
    model units to centimetres (0.1 for millimetre models).
    """

    radius: float = 3.0
    sigma: float = 5.0
    exponents: tuple = DEFAULT_EXPONENTS
    degeneracy_gap: float = 1e-6
    unit_scale_to_cm: float = 1.0

    def __post_init__(self):
        exps = tuple(tuple(int(x) for x in e) for e in self.exponents)
        object.__setattr__(self, "exponents", exps)
        if not self.radius > 0 or not self.sigma > 0:
            raise ValueError("radius and sigma must be positive")
        if not self.unit_scale_to_cm > 0:
            raise ValueError("unit_scale_to_cm must be positive")
        if not exps:
            raise ValueError("exponent list is empty")
        for i, j, k in exps:
            if (i, j, k) == (0, 0, 0):
                raise ValueError("(0, 0, 0) is a constant moment")
            if i % 2 or j % 2:
                raise ValueError("x and y exponents must be even")
            if min(i, j, k) < 0:
                raise ValueError("exponents must be non-negative")

    @property
    def dim(self):
        return len(self.exponents)

    @property
    def radius_model(self):
        """Neighbourhood radius in model units."""
        return self.radius / self.unit_scale_to_cm


@dataclass(frozen=True)
class LocalFrame:
    rotation: np.ndarray
    stable: bool
    singular_values: np.ndarray


@dataclass(frozen=True)
class LseVector:
    values: np.ndarray
    normalized: bool = False
    stats_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.normalized and self.stats_id is None:
            raise ValueError("normalized vectors must carry their statistics id")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    model_id: str = "model"
    zero_variance: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        zv = self.zero_variance
        zv = np.zeros(len(self.mean), bool) if zv is None else np.asarray(zv, bool)
        object.__setattr__(self, "zero_variance", zv)
        if np.any(self.std <= 0):
            raise ValueError("standard deviations must be positive")


def _offsets(neighbors, center):
    pts = neighbors.positions if isinstance(neighbors, PointSamples) else np.asarray(neighbors, dtype=np.float64)
    return pts.reshape(-1, 3) - np.asarray(center, dtype=np.float64)


def _span_representative(basis):
    """Unit vector in span(basis rows) with lexicographically largest |components|."""
    for axis in np.eye(3):
        proj = basis.T @ (basis @ axis)
        norm = np.linalg.norm(proj)
        if norm > 1e-8:
            return proj / norm
    return basis[0]


def _fix_sign(v):
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def frame_from_scatter(C, normal, gap=1e-6):
    """Local rotation from a 3x3 scatter matrix, sign-fixed by ``normal``."""
    _, s, Vt = np.linalg.svd(C)
    if not s[0] > np.finfo(np.float64).tiny:
        raise DegenerateFrameError("neighbourhood collapses onto its centre")
    rel = (s[:-1] - s[1:]) / s[0]
    stable = bool(np.all(rel >= gap))
    r1, r2, r3 = Vt
    if rel[0] < gap and rel[1] < gap:
        r1, r2, r3 = np.eye(3)
    elif rel[0] < gap:
        r1 = _span_representative(np.stack([r1, r2]))
        r2 = np.cross(r3, r1)
    elif rel[1] < gap:
        r2 = _span_representative(np.stack([r2, r3]))
        r3 = np.cross(r1, r2)
    r1 = _fix_sign(r1)
    r3 = r3 if float(r3 @ normal) >= 0 else -r3
    # re-orthogonalise r1 against r3 in case the tie branches left tiny drift
    r1 = r1 - (r1 @ r3) * r3
    r1 /= np.linalg.norm(r1)
    r2 = np.cross(r3, r1)
    return LocalFrame(np.stack([r1, r2, r3]), stable, s)


def frames_from_scatter_batch(C, normals, gap=1e-6):
    """Vectorised :func:`frame_from_scatter` over a stack of scatter matrices.

    :return: ``(rotations, stable, ok)``; ``ok`` is False for degenerate frames.
    """
    C = np.asarray(C, dtype=np.float64)
    n = len(C)
    _, s, Vt = np.linalg.svd(C)
    ok = s[:, 0] > np.finfo(np.float64).tiny
    safe = np.where(ok, s[:, 0], 1.0)
    rel = (s[:, :-1] - s[:, 1:]) / safe[:, None]
    stable = ok & np.all(rel >= gap, axis=1)
    r1, r3 = Vt[:, 0].copy(), Vt[:, 2].copy()
    peak = np.abs(r1).argmax(axis=1)
    r1 *= np.where(r1[np.arange(n), peak] < 0, -1.0, 1.0)[:, None]
    r3 *= np.where(np.einsum("ij,ij->i", r3, normals) >= 0, 1.0, -1.0)[:, None]
    r1 = r1 - np.einsum("ij,ij->i", r1, r3)[:, None] * r3
    r1 /= np.linalg.norm(r1, axis=1, keepdims=True)
    R = np.stack([r1, np.cross(r3, r1), r3], axis=1)
    for i in np.flatnonzero(ok & ~stable):
        R[i] = frame_from_scatter(C[i], normals[i], gap).rotation
    R[~ok] = np.eye(3)
    return R, stable, ok


def local_frame(neighbors, center, normal, gap=1e-6):
    """Rotation taking neighbourhood offsets into the canonical local frame.

    Rows are the right singular vectors of ``sum v v^T`` ordered by decreasing
    singular value; the third row is flipped to agree with ``normal`` and the
    second row completes a right-handed frame.
    """
    v = _offsets(neighbors, center)
    if len(v) == 0:
        raise DegenerateFrameError("empty neighbourhood")
    return frame_from_scatter(v.T @ v, np.asarray(normal, dtype=np.float64), gap)


def moments(local, params):
    """Weighted moments of offsets already expressed in the local frame (cm)."""
    local = np.asarray(local, dtype=np.float64)
    w = np.exp(-np.einsum("ij,ij->i", local, local) / params.sigma**2)
    x, y, z = local[:, 0], local[:, 1], local[:, 2]
    xp = {0: None, 2: x * x}
    yp = {0: None, 2: y * y}
    zp = {0: None, 1: z, 2: z * z}
    out = np.empty(len(params.exponents))
    for n, (i, j, k) in enumerate(params.exponents):
        term = w
        for powers, e, base in ((xp, i, x), (yp, j, y), (zp, k, z)):
            if e:
                term = term * (powers[e] if e in powers else base**e)
        out[n] = term.sum()
    return out


def lse_values(offsets, normal, params):
    """Raw embedding of model-unit offsets; returns ``(values, frame)``."""
    frame = frame_from_scatter(offsets.T @ offsets, normal, params.degeneracy_gap)
    local = (offsets * params.unit_scale_to_cm) @ frame.rotation.T
    return moments(local, params), frame


def lse_raw(neighbors, center, normal, params=LseParams()):
    """Raw (unnormalised) embedding of one surface point."""
    values, _ = lse_values(_offsets(neighbors, center), np.asarray(normal, dtype=np.float64), params)
    return LseVector(values)


def _as_matrix(raw):
    if isinstance(raw, np.ndarray):
        return np.asarray(raw, dtype=np.float64)
    rows = []
    for v in raw:
        if isinstance(v, LseVector):
            if v.normalized:
                raise ValueError("fit_normalization expects raw vectors")
            rows.append(v.values)
        else:
            rows.append(np.asarray(v, dtype=np.float64))
    return np.array(rows, dtype=np.float64)


def fit_normalization(raw, model_id="model"):
    """Per-dimension mean and population standard deviation.

    Dimensions with zero spread get ``std = 1`` and are flagged.
    """
    X = _as_matrix(raw)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("need at least 2 vectors to fit normalisation")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    zero = ~(std > 0)
    std = np.where(zero, 1.0, std)
    return NormalizationStats(mean, std, model_id, zero)


def normalize(v, stats):
    if isinstance(v, LseVector):
        if v.normalized:
            raise ValueError("vector is already normalised")
        values = v.values
    else:
        values = np.asarray(v, dtype=np.float64)
    if values.shape[-1] != len(stats.mean):
        raise ValueError(f"dimension mismatch: {values.shape[-1]} vs {len(stats.mean)}")
    return LseVector((values - stats.mean) / stats.std, True, stats.model_id)


def normalize_array(X, stats):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != len(stats.mean):
        raise ValueError(f"dimension mismatch: {X.shape[-1]} vs {len(stats.mean)}")
    return (X - stats.mean) / stats.std


def denormalize(v, stats):
    return LseVector(v.values * stats.std + stats.mean)
