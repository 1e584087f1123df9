"""Seeded synthetic benchmark: oracle scenes of the three primitive models, end to end."""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .embed_index import DEFAULT_K, DEFAULT_THRESHOLD, build_correspondences, build_index, load_index, save_index
from .lse_core import LseParams
from .mesh_geom import model_diameter, sample_surface
from .metrics import VsdParams, aggregate, evaluate_scene
from .primitives import benchmark_models
from .projective import CameraIntrinsics, Pose, backproject
from .robust_pose import RansacConfig, estimate_all
from .synth_oracle import NoiseSpec, SceneSpec, render_scene

BENCH_CAMERA = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
BENCH_PARAMS = LseParams(unit_scale_to_cm=0.1)
CLEAN = NoiseSpec()
NOISY = NoiseSpec(lse_sd=0.25, dropout=0.2)


@dataclass(frozen=True)
class MatchConfig:
    k: int = DEFAULT_K
    suppression_radius: float | None = None
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.suppression_radius is not None and not self.suppression_radius > 0:
            raise ValueError("suppression_radius must be > 0")
        if not self.threshold >= 0:
            raise ValueError("threshold must be >= 0")


@dataclass
class ModelSet:
    meshes: dict
    indices: dict
    symmetric: dict
    diameters: dict = field(default_factory=dict)

    def __post_init__(self):
        for m, ix in self.indices.items():
            self.diameters.setdefault(m, model_diameter(ix.positions))

    def points(self, m):
        return self.indices[m].positions


def build_model_set(sample_count=20000, params=BENCH_PARAMS, seed=0, cache_dir=None):
    """Meshes, indices and symmetry flags of the benchmark models.

    With ``cache_dir`` the indices are loaded from (or saved to) ``<id>.lsei``
    files tagged with the sample count and seed.
    """
    models = benchmark_models()
    meshes, indices, sym = {}, {}, {}
    for i, (mid, (mesh, symmetric)) in enumerate(sorted(models.items())):
        meshes[mid], sym[mid] = mesh, symmetric
        path = None
        if cache_dir is not None:
            os.makedirs(cache_dir, exist_ok=True)
            path = os.path.join(cache_dir, f"{mid}_{sample_count}_{seed}.lsei")
            if os.path.exists(path):
                ix = load_index(path)
                if ix.params == params:
                    indices[mid] = ix
                    continue
        indices[mid] = build_index(sample_surface(mesh, sample_count, seed + i), params, mid)
        if path is not None:
            save_index(path, indices[mid])
    return ModelSet(meshes, indices, sym)


def random_scene_spec(model_ids, rng, cam=BENCH_CAMERA, noise=CLEAN, seed=0, depth=(550.0, 800.0),
                      min_separation=140.0, margin=110):
    """One instance per entry of ``model_ids`` at a random pose, image centres kept apart."""
    centres = []
    objects = []
    for mid in model_ids:
        for _ in range(1000):
            uv = np.array([rng.uniform(margin, cam.width - margin), rng.uniform(margin, cam.height - margin)])
            if all(np.linalg.norm(uv - c) >= min_separation for c in centres):
                break
        centres.append(uv)
        z = rng.uniform(*depth)
        t = backproject(uv, z, cam)
        R = Rotation.random(random_state=rng).as_matrix()
        objects.append((mid, Pose(R, t)))
    return SceneSpec(tuple(objects), cam, noise, seed)


def make_scenes(models, n_scenes=20, noise=CLEAN, seed=0, instances=None):
    """Seeded oracle scenes; by default each holds one instance of every model."""
    rng = np.random.default_rng(seed)
    ids = sorted(models.meshes) if instances is None else list(instances)
    specs = [random_scene_spec(ids, rng, noise=noise, seed=seed * 1000 + s) for s in range(n_scenes)]
    return [render_scene(sp, models.meshes, models.indices) for sp in specs]


def estimate_scene(scene, models, ransac=RansacConfig(), match=MatchConfig(), threads=1):
    corr = {
        mid: build_correspondences(scene.lse_map, scene.masks, ix, match.k, match.suppression_radius,
                                   match.threshold)
        for mid, ix in sorted(models.indices.items())
    }
    return estimate_all(scene.masks, corr, models.meshes, models.indices, scene.camera, scene.lse_map, ransac,
                        threads)


@dataclass
class BenchResult:
    name: str
    report: object
    seconds: float
    hypotheses: list

    def summary(self):
        r = self.report
        return (f"{self.name}: ADD(-I) recall {r.add_recall:.3f}, VSD recall {r.vsd_recall:.3f} "
                f"over {r.n_evaluated} objects in {self.seconds:.1f} s")


def run_condition(name, models, noise, n_scenes=20, seed=0, ransac=RansacConfig(), match=MatchConfig(),
                  vsd=VsdParams(), threads=1):
    t0 = time.perf_counter()
    scenes = make_scenes(models, n_scenes, noise, seed)
    records, hyps = [], []
    for s, scene in enumerate(scenes):
        h = estimate_scene(scene, models, ransac, match, threads)
        hyps.append(h)
        records += evaluate_scene(f"{name}-{s:03d}", scene, h, models.meshes,
                                  {m: models.points(m) for m in models.meshes}, models.diameters,
                                  models.symmetric, vsd)
    return BenchResult(name, aggregate(records, vsd), time.perf_counter() - t0, hyps)
