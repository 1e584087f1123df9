import json

import numpy as np
import pytest

from _oracle import oracle_correspondences
from lsepose.bench import MatchConfig, estimate_scene, random_scene_spec
from lsepose.embed_index import CorrespondenceSet, build_correspondences
from lsepose.metrics import add_error, adi_error
from lsepose.projective import Pose, iou, render
from lsepose.robust_pose import (
    PoseHypothesis, PoseScorer, RansacConfig, estimate_all, estimate_pose_for_mask, hypotheses_from_json,
    hypotheses_to_json, inliers_of, sampling_pool, score_pose,
)
from lsepose.synth_oracle import LseMap, render_scene

FAST = RansacConfig(n_iter=400)


@pytest.fixture(scope="module")
def scene(bench_models):
    spec = random_scene_spec(["bracket", "cross", "wedge"], np.random.default_rng(11))
    return render_scene(spec, bench_models.meshes, bench_models.indices)


@pytest.fixture(scope="module")
def corr(scene, bench_models):
    return {m: build_correspondences(scene.lse_map, scene.masks, ix) for m, ix in bench_models.indices.items()}


def test_config_validation():
    for bad in (dict(n_iter=0), dict(sample_min=3), dict(sample_min=8, sample_max=7), dict(alpha=1.5),
                dict(min_score=-0.1), dict(candidate_rule="best"), dict(score_gate="x"), dict(pixel_pool=0.0),
                dict(inlier_threshold=0.0)):
        with pytest.raises(ValueError):
            RansacConfig(**bad)


def test_score_examples(scene, bench_models):
    g = scene.gt[0]
    mesh, ix = bench_models.meshes[g.model_id], bench_models.indices[g.model_id]
    mask = scene.masks[g.instance_id]
    assert score_pose(g.pose, mesh, scene.camera, mask, scene.lse_map, ix) >= 0.99
    away = Pose(g.pose.R, g.pose.t + [5000.0, 0, 0])
    assert score_pose(away, mesh, scene.camera, mask, scene.lse_map, ix) == 0.0
    shifted = Pose(g.pose.R, g.pose.t + [15.0, 0, 0])
    s1 = score_pose(shifted, mesh, scene.camera, mask, scene.lse_map, ix, RansacConfig(alpha=1.0))
    assert s1 == pytest.approx(iou(render(mesh, shifted, scene.camera).ids == 1, mask), abs=1e-15)
    s = PoseScorer(mesh, scene.camera, mask, scene.lse_map, ix)(shifted)
    assert 0.0 <= s <= 1.0


def test_oracle_scene_recovers_poses(scene, bench_models, corr):
    for g in scene.gt:
        mask = scene.masks[g.instance_id]
        c = corr[g.model_id].restrict(mask)
        h = estimate_pose_for_mask(c, bench_models.meshes[g.model_id], bench_models.indices[g.model_id],
                                   scene.camera, mask, scene.lse_map, RansacConfig(), g.instance_id)
        assert h is not None and h.model_id == g.model_id and h.mask_id == g.instance_id
        err = add_error(bench_models.points(g.model_id), g.pose, h.pose)
        if bench_models.symmetric[g.model_id]:
            err = adi_error(bench_models.points(g.model_id), g.pose, h.pose)
        assert err < 0.02 * bench_models.diameters[g.model_id]


def test_determinism_inliers_and_trace(scene, bench_models, corr):
    g = scene.gt[2]
    mask = scene.masks[g.instance_id]
    c = corr[g.model_id].restrict(mask)
    args = (c, bench_models.meshes[g.model_id], bench_models.indices[g.model_id], scene.camera, mask,
            scene.lse_map, FAST, g.instance_id)
    trace = []
    a = estimate_pose_for_mask(*args, trace=trace)
    b = estimate_pose_for_mask(*args)
    assert a.pose == b.pose and a.score == b.score
    assert len(trace) == FAST.n_iter and all(y >= x for (_, x), (_, y) in zip(trace, trace[1:]))
    proj = a.pose.apply(a.inlier_points)
    uv = np.column_stack([scene.camera.fx * proj[:, 0] / proj[:, 2] + scene.camera.cx,
                          scene.camera.fy * proj[:, 1] / proj[:, 2] + scene.camera.cy])
    assert len(uv) > 0 and np.all(np.linalg.norm(uv - a.inlier_pixels, axis=1) < FAST.inlier_threshold)
    px, _ = inliers_of(a.pose, c, scene.camera, FAST.inlier_threshold)
    assert np.array_equal(px, a.inlier_pixels)
    other = estimate_pose_for_mask(*args[:-2], RansacConfig(n_iter=400, seed=5), g.instance_id)
    assert other is not None


def test_too_few_correspondences(scene, bench_models, corr):
    g = scene.gt[0]
    c = corr[g.model_id].select(np.arange(5))
    assert estimate_pose_for_mask(c, bench_models.meshes[g.model_id], bench_models.indices[g.model_id],
                                  scene.camera, scene.masks[g.instance_id], scene.lse_map) is None
    assert estimate_pose_for_mask(CorrespondenceSet.empty(g.model_id), bench_models.meshes[g.model_id],
                                  bench_models.indices[g.model_id], scene.camera, scene.masks[g.instance_id],
                                  scene.lse_map) is None


def test_estimate_all_assigns_models(scene, bench_models, corr):
    hyps = estimate_all(scene.masks, corr, bench_models.meshes, bench_models.indices, scene.camera,
                        scene.lse_map, FAST)
    assert [h.mask_id for h in hyps] == [g.instance_id for g in scene.gt]
    assert [h.model_id for h in hyps] == [g.model_id for g in scene.gt]
    # a mask over pure embedding noise yields nothing
    rng = np.random.default_rng(0)
    noise = LseMap(rng.normal(size=scene.lse_map.values.shape).astype(np.float32))
    box = np.zeros(scene.camera.shape, bool)
    box[10:60, 10:60] = True
    noisy_corr = {m: build_correspondences(noise, {9: box}, ix) for m, ix in bench_models.indices.items()}
    assert estimate_all({9: box}, noisy_corr, bench_models.meshes, bench_models.indices, scene.camera, noise,
                        FAST) == []


def test_single_model_reduction_and_threads(scene, bench_models, corr):
    g = scene.gt[1]
    m = g.model_id
    masks = {g.instance_id: scene.masks[g.instance_id]}
    one = estimate_all(masks, {m: corr[m]}, bench_models.meshes, bench_models.indices, scene.camera,
                       scene.lse_map, FAST)
    direct = estimate_pose_for_mask(corr[m].restrict(masks[g.instance_id]), bench_models.meshes[m],
                                    bench_models.indices[m], scene.camera, masks[g.instance_id], scene.lse_map,
                                    FAST, g.instance_id)
    assert len(one) == 1 and one[0].pose == direct.pose and one[0].score == direct.score
    par = estimate_scene(scene, bench_models, FAST, MatchConfig(), threads=2)
    seq = estimate_scene(scene, bench_models, FAST, MatchConfig(), threads=1)
    assert hypotheses_to_json(par) == hypotheses_to_json(seq)


def test_outlier_robustness_smoke(scene, bench_models):
    g = scene.gt[0]
    ix = bench_models.indices[g.model_id]
    rng = np.random.default_rng(3)
    c = oracle_correspondences(scene, g.instance_id, ix, 300, 0.4, rng)
    h = estimate_pose_for_mask(c, bench_models.meshes[g.model_id], ix, scene.camera,
                               scene.masks[g.instance_id], scene.lse_map, RansacConfig(), g.instance_id)
    assert add_error(bench_models.points(g.model_id), g.pose, h.pose) < 0.02 * bench_models.diameters[g.model_id]


def test_sampling_pool():
    d = np.array([1.0, 2.0, 1.0, 1.0, 0.5, 0.5, 3.0])
    c = CorrespondenceSet("m", np.zeros((4, 2), np.int64), np.array([0, 2, 4, 5, 7]), np.arange(7),
                          np.zeros((7, 3)), d)
    # ratios: 0.5, 1.0, 0 (single candidate), 1/6
    assert sampling_pool(c, 1.0).tolist() == [0, 1, 2, 3]
    assert sampling_pool(c, 0.25).tolist() == [2]
    assert sampling_pool(c, 0.5).tolist() == [2, 3]


def test_hypothesis_json_round_trip():
    h = PoseHypothesis(Pose.from_rotvec([0.1, 0.2, 0.3], [1, 2, 300]), 0.75, "wedge", 3,
                       np.array([[1.0, 2.0]]), np.array([[3.0, 4.0, 5.0]]))
    text = json.dumps(hypotheses_to_json([h]))
    back = hypotheses_from_json(json.loads(text))
    assert back[0].pose == h.pose and back[0].score == 0.75 and back[0].model_id == "wedge"
    assert back[0].mask_id == 3
