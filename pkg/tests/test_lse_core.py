import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from lsepose.embed_index import compute_raw_embeddings
from lsepose.errors import DegenerateFrameError
from lsepose.lse_core import (
    DEFAULT_EXPONENTS, LseParams, LseVector, denormalize, fit_normalization, local_frame, lse_raw, moments,
    normalize,
)
from lsepose.mesh_geom import PointSamples, radius_neighbors, sample_surface

PARAMS = LseParams()


def oracle_lse(points, center, normal, sigma=5.0, exponents=DEFAULT_EXPONENTS):
    """Scalar evaluation of the weighted moments.

    The frame comes from an eigen-decomposition of the scatter matrix; the x/y
    exponents are even, so the signs of the first two axes do not matter.
    """
    v = [np.asarray(p, float) - np.asarray(center, float) for p in points]
    C = sum(np.outer(a, a) for a in v)
    _, vecs = np.linalg.eigh(C)
    r1, r2, r3 = vecs[:, 2], vecs[:, 1], vecs[:, 0]
    if r3 @ normal < 0:
        r3 = -r3
    out = []
    for i, j, k in exponents:
        acc = 0.0
        for a in v:
            x, y, z = float(r1 @ a), float(r2 @ a), float(r3 @ a)
            acc += np.exp(-(a @ a) / sigma**2) * x**i * y**j * z**k
        out.append(acc)
    return np.array(out)


def random_patch(rng, n=60, radius=3.0):
    """Noisy curved patch around the origin with normal roughly +z."""
    xy = rng.uniform(-radius, radius, (n, 2)) * rng.uniform(0.3, 1.0, 2)
    z = 0.05 * rng.normal() * xy[:, 0] ** 2 + 0.08 * rng.normal() * xy[:, 1] ** 2 + 0.02 * rng.normal(size=n)
    return np.column_stack([xy, z]), np.array([0.0, 0.0, 1.0])


def test_ellipsoid_patch_frame():
    rng = np.random.default_rng(0)
    u = rng.uniform(0, 2 * np.pi, 400)
    t = rng.uniform(0, 0.6, 400)
    # cap of an ellipsoid with semi-axes 3 > 2 > 1 around its +z pole
    pts = np.column_stack([3 * np.sin(t) * np.cos(u), 2 * np.sin(t) * np.sin(u), np.cos(t)])
    P = np.array([0.0, 0.0, 1.0])
    f = local_frame(pts, P, np.array([0.0, 0.0, 1.0]))
    v = pts - P
    _, vecs = np.linalg.eigh(v.T @ v)
    assert abs(abs(f.rotation[0] @ vecs[:, 2]) - 1) < 1e-9
    assert abs(f.rotation[0, 0]) > 0.99
    assert (f.rotation @ [0, 0, 1.0])[2] > 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_frame_is_rotation(seed):
    pts, n = random_patch(np.random.default_rng(seed))
    R = local_frame(pts, np.zeros(3), n).rotation
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9
    assert R[2] @ n >= 0


def test_frame_equivariance_over_100_rotations():
    rng = np.random.default_rng(1)
    pts, n = random_patch(rng)
    f0 = local_frame(pts, np.zeros(3), n)
    v0 = pts @ f0.rotation.T
    for s in range(100):
        R0 = Rotation.random(random_state=s).as_matrix()
        f1 = local_frame(pts @ R0.T, np.zeros(3), R0 @ n)
        v1 = (pts @ R0.T) @ f1.rotation.T
        same = np.allclose(v1, v0, atol=1e-9)
        flipped = np.allclose(v1 * [-1, -1, 1], v0, atol=1e-9)
        assert same or flipped


def test_single_point_is_degenerate():
    P = np.array([1.0, 2.0, 3.0])
    with pytest.raises(DegenerateFrameError):
        lse_raw(P[None, :], P, np.array([0, 0, 1.0]))


def test_odd_moments_vanish_for_mirror_symmetric_sets():
    rng = np.random.default_rng(2)
    half = rng.normal(size=(40, 3)) * [2.0, 1.0, 0.5]
    pts = np.vstack([half, half * [1, 1, -1]])
    v = lse_raw(pts, np.zeros(3), np.array([0, 0, 1.0]), PARAMS).values
    for e, val in zip(PARAMS.exponents, v):
        if e[2] % 2:
            assert abs(val) < 1e-9


def test_moments_match_scalar_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        pts = rng.uniform(-3, 3, (50, 3))
        c = rng.uniform(-0.5, 0.5, 3)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        got = lse_raw(pts, c, n, PARAMS).values
        want = oracle_lse(pts, c, n)
        assert np.all(np.abs(got - want) <= 1e-12 * np.abs(want))


def test_frame_row_sign_flip_leaves_moments():
    rng = np.random.default_rng(4)
    pts, n = random_patch(rng)
    R = local_frame(pts, np.zeros(3), n).rotation
    a = moments(pts @ R.T, PARAMS)
    b = moments(pts @ (R * [[-1], [-1], [1]]).T, PARAMS)
    assert np.all(np.abs(a - b) <= 1e-12 * np.abs(a))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_rotation_and_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    pts, n = random_patch(rng)
    frame = local_frame(pts, np.zeros(3), n)
    if not frame.stable:
        return
    base = lse_raw(pts, np.zeros(3), n).values
    R0 = Rotation.random(random_state=seed).as_matrix()
    t0 = rng.normal(size=3) * 100
    moved = lse_raw(pts @ R0.T + t0, t0, R0 @ n).values
    assert np.all(np.abs(moved - base) <= 1e-8 * np.abs(base))
    shifted = lse_raw(pts + t0, t0, n).values
    assert np.allclose(shifted, base, rtol=1e-12, atol=1e-12 * np.abs(base).max())


def test_weights_decrease_with_distance():
    d = np.linspace(0, 3, 50)
    local = np.column_stack([d, np.zeros(50), np.zeros(50)])
    w = np.array([moments(local[i:i + 1], LseParams(exponents=((0, 0, 2),)))[0] for i in range(50)])
    zero_z = np.array([moments(local[i:i + 1] + [0, 0, 1], LseParams(exponents=((0, 0, 2),)))[0]
                       for i in range(50)])
    assert np.all(w == 0) and np.all(np.diff(zero_z) < 0)


def test_units_scale_into_centimetres():
    rng = np.random.default_rng(5)
    pts, n = random_patch(rng)
    cm = lse_raw(pts, np.zeros(3), n, LseParams()).values
    mm = lse_raw(pts * 10, np.zeros(3), n, LseParams(unit_scale_to_cm=0.1)).values
    assert np.allclose(cm, mm, rtol=1e-12)


def test_normalization_examples():
    st_ = fit_normalization([np.zeros(11), np.r_[2.0, np.zeros(10)]])
    assert st_.mean[0] == 1 and st_.std[0] == 1
    assert st_.zero_variance[1:].all() and np.all(st_.std[1:] == 1)
    v = LseVector(st_.mean)
    assert np.array_equal(normalize(v, st_).values, np.zeros(11))
    ident = fit_normalization(np.array([[1.0] * 11, [-1.0] * 11]))
    x = np.arange(11.0)
    assert np.array_equal(normalize(x, ident).values, x)


def test_normalization_round_trips():
    rng = np.random.default_rng(6)
    X = rng.normal(3, 7, (1000, 11))
    stats = fit_normalization(X)
    Z = np.array([normalize(x, stats).values for x in X])
    refit = fit_normalization(Z)
    assert np.allclose(refit.mean, 0, atol=1e-9) and np.allclose(refit.std, 1, atol=1e-9)
    v = LseVector(X[0])
    assert np.allclose(denormalize(normalize(v, stats), stats).values, X[0], rtol=1e-12, atol=0)


def test_normalize_guards():
    stats = fit_normalization(np.random.default_rng(0).normal(size=(5, 11)))
    z = normalize(np.ones(11), stats)
    assert z.normalized and z.stats_id == stats.model_id
    with pytest.raises(ValueError):
        normalize(z, stats)
    with pytest.raises(ValueError):
        normalize(np.ones(3), stats)
    with pytest.raises(ValueError):
        fit_normalization([np.ones(11)])


def test_params_validation():
    with pytest.raises(ValueError):
        LseParams(exponents=((1, 0, 0),))
    with pytest.raises(ValueError):
        LseParams(exponents=((0, 0, 0),))
    with pytest.raises(ValueError):
        LseParams(radius=0)
    assert LseParams().dim == 11


def test_batch_embedding_matches_per_point(sphere):
    s = sample_surface(sphere, 3000, 0)
    params = LseParams(radius=0.3, sigma=0.5)
    raw, stable, ok = compute_raw_embeddings(s, params)
    for i in range(0, 3000, 300):
        nb = radius_neighbors(s, s.positions[i], params.radius)
        assert np.allclose(raw[i], lse_raw(nb, s.positions[i], s.normals[i], params).values, rtol=1e-9)
    assert ok.all()
