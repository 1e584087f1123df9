import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsepose.bench import BENCH_CAMERA, random_scene_spec
from lsepose.embed_index import (
    LseIndex, build_correspondences, build_index, discriminative_mask, dump_index, knn_query, knn_query_batch,
    load_index, load_index_bytes, save_index, suppress_clusters,
)
from lsepose.errors import FormatError
from lsepose.lse_core import LseParams, LseVector, fit_normalization
from lsepose.mesh_geom import PointSamples, sample_surface
from lsepose.primitives import box
from lsepose.synth_oracle import LseMap, render_scene


def synthetic_index(n=1000, dim=11, seed=0, duplicates=True):
    """Random entries; a block of duplicated vectors and mixed stability exercise the tie rules."""
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, dim))
    if duplicates:
        raw[n // 2:n // 2 + 50] = raw[:50]
        raw[-20:] = raw[-40:-20]
    samples = PointSamples(rng.uniform(0, 100, (n, 3)), np.tile([0, 0, 1.0], (n, 1)))
    stable = rng.random(n) > 0.2
    return LseIndex("synthetic", samples, raw, stable, fit_normalization(raw, "synthetic"), LseParams())


def linear_scan(index, q, k):
    """Independent O(N) reference: sort by (distance, unstable, id)."""
    d = np.sqrt(((index.vectors - q) ** 2).sum(axis=1))
    rows = sorted(range(len(d)), key=lambda i: (d[i], not index.stable[i], i))[:k]
    return np.array(rows), d[rows]


@pytest.fixture(scope="module")
def cube_index():
    mesh = box((100.0, 100.0, 100.0))
    return build_index(sample_surface(mesh, 5000, 0), LseParams(unit_scale_to_cm=0.1), "cube")


def test_cube_index_contract(cube_index):
    assert len(cube_index) <= 5000
    assert np.allclose(cube_index.vectors.mean(axis=0), 0, atol=1e-9)
    again = build_index(sample_surface(box((100.0, 100.0, 100.0)), 5000, 0), LseParams(unit_scale_to_cm=0.1),
                        "cube")
    assert again == cube_index
    assert dump_index(again) == dump_index(cube_index)


def test_self_query(cube_index):
    for i in (0, 17, 4321):
        ids, d = knn_query(cube_index, cube_index.entry_vector(i), 1)
        assert d[0] == 0.0
        assert np.array_equal(cube_index.vectors[ids[0]], cube_index.vectors[i])


def test_full_k_sorts_everything():
    ix = synthetic_index(300)
    q = np.random.default_rng(1).normal(size=11)
    ids, d = knn_query(ix, q, len(ix))
    assert sorted(ids.tolist()) == list(range(len(ix)))
    assert np.all(np.diff(d) >= 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tree_matches_linear_scan(seed):
    ix = synthetic_index(1000, seed=seed)
    rng = np.random.default_rng(seed + 10)
    Q = np.vstack([rng.normal(size=(80, 11)), ix.vectors[rng.choice(1000, 20)]])
    ids, d = knn_query_batch(ix, Q, 100)
    for r, q in enumerate(Q):
        want_i, want_d = linear_scan(ix, q, 100)
        assert np.array_equal(ids[r], want_i)
        assert np.allclose(d[r], want_d, rtol=1e-12, atol=0)
    bi, bd = knn_query_batch(ix, Q, 100, method="brute")
    assert np.array_equal(ids, bi) and np.array_equal(d, bd)


def test_ties_rank_stable_first_then_id():
    ix = synthetic_index(200, duplicates=False)
    raw = ix.raw.copy()
    raw[[3, 7, 11]] = raw[5]
    stable = ix.stable.copy()
    stable[[3, 11]] = True
    stable[[5, 7]] = False
    tied = LseIndex("t", ix.samples, raw, stable, ix.stats, ix.params)
    ids, d = knn_query(tied, tied.vectors[5], 4)
    assert ids.tolist() == [3, 11, 5, 7] and np.all(d == 0)


def test_query_guards():
    ix = synthetic_index(50, duplicates=False)
    with pytest.raises(ValueError):
        knn_query(ix, np.zeros(11), 0)
    with pytest.raises(ValueError):
        knn_query(ix, LseVector(np.zeros(11)), 3)
    with pytest.raises(ValueError):
        knn_query_batch(ix, np.zeros((1, 11)), 3, method="faiss")
    assert len(knn_query(ix, np.zeros(11), 500)[0]) == 50


def test_suppression_examples():
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [100, 0, 0], [101, 0, 0], [100, 1, 0.0]])
    assert suppress_clusters([0, 1, 2], pos, 5.0).tolist() == [0]
    assert suppress_clusters([0, 3], pos, 5.0).tolist() == [0, 1]
    # interleaved two-cluster list sorted by embedding distance: 4 is the best of its cluster
    order = [4, 1, 3, 0, 5, 2]
    kept = suppress_clusters(order, pos, 5.0)
    assert [order[k] for k in kept] == [4, 1]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), radius=st.floats(0.5, 30.0))
def test_suppression_soundness(seed, radius):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 50, (60, 3))
    order = rng.permutation(60)
    kept = order[suppress_clusters(order, pos, radius)]
    for a in range(len(kept)):
        for b in range(a + 1, len(kept)):
            assert np.linalg.norm(pos[kept[a]] - pos[kept[b]]) > radius
    # every dropped candidate lies within the radius of an earlier survivor
    for i, c in enumerate(order):
        if c not in kept:
            earlier = [k for k in kept if list(order).index(k) < i]
            assert min(np.linalg.norm(pos[c] - pos[k]) for k in earlier) <= radius


def test_discriminative_mask_examples():
    v = np.full((4, 5, 11), np.nan, np.float32)
    v[1:3, 1:4] = 0.0
    m = LseMap(v)
    assert not discriminative_mask(m, 0.5).any()
    assert np.array_equal(discriminative_mask(m, 0.0), m.foreground)
    v2 = v.copy()
    v2[2, 2, 4] = 5.0
    only = discriminative_mask(LseMap(v2), 0.5)
    assert only.sum() == 1 and only[2, 2]


def test_empty_inputs_give_empty_sets(cube_index):
    cam = BENCH_CAMERA
    bg = LseMap.empty(cam.height, cam.width, 11)
    full = np.ones(cam.shape, bool)
    assert len(build_correspondences(bg, [full], cube_index)) == 0
    noise = LseMap(np.random.default_rng(0).normal(size=cam.shape + (11,)).astype(np.float32))
    assert len(build_correspondences(noise, [], cube_index)) == 0


def test_oracle_correspondences_are_sound(bench_models):
    rng = np.random.default_rng(5)
    for model in ("bracket", "wedge"):
        spec = random_scene_spec([model], rng)
        scene = render_scene(spec, bench_models.meshes, bench_models.indices)
        ix = bench_models.indices[model]
        corr = build_correspondences(scene.lse_map, scene.masks, ix)
        truth = scene.maps.object_points[corr.pixels[:, 1], corr.pixels[:, 0]]
        d = np.linalg.norm(corr.points - truth[corr.pixel_of_candidate], axis=1)
        hit = np.maximum.reduceat(d <= ix.params.radius_model, corr.offsets[:-1])
        assert hit.mean() >= 0.95
        # candidates of one pixel are spread farther than the suppression radius
        for i in range(0, len(corr), 500):
            P, _ = corr.candidates(i)
            dd = np.linalg.norm(P[:, None] - P[None], axis=2)
            assert np.all(dd[np.triu_indices(len(P), 1)] > ix.params.radius_model)


def test_symmetric_repeats_yield_multiple_candidates(bench_models):
    ix = bench_models.indices["cross"]
    # an entry near the tip of the +x arm
    tip = np.argmin(np.linalg.norm(ix.positions - [55.0, 0.0, 0.0], axis=1))
    ids, _ = knn_query(ix, ix.entry_vector(tip), 100)
    kept = ids[suppress_clusters(ids, ix.positions, ix.params.radius_model)]
    P = ix.positions[kept]
    arms = {int(np.round(np.arctan2(p[1], p[0]) / (np.pi / 2))) % 4 for p in P if np.hypot(p[0], p[1]) > 35}
    assert len(arms) >= 2


def test_index_file_round_trip(tmp_path):
    ix = synthetic_index(120)
    path = tmp_path / "m.lsei"
    save_index(path, ix)
    back = load_index(path)
    assert back == ix and np.array_equal(back.vectors, ix.vectors)
    data = dump_index(ix)
    with pytest.raises(FormatError):
        load_index_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_index_bytes(data[:-3])
    with pytest.raises(FormatError):
        load_index_bytes(data + b"\0")
    with pytest.raises(FormatError):
        load_index_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])


def test_repeated_queries_match_linear_scan():
    ix = synthetic_index(1000, seed=5)
    rng = np.random.default_rng(6)
    base = rng.normal(size=(30, 11))
    Q = base[rng.integers(0, 30, 90)]
    ids, d = knn_query_batch(ix, Q, 40)
    for r, q in enumerate(Q):
        assert np.array_equal(ids[r], linear_scan(ix, q, 40)[0])
