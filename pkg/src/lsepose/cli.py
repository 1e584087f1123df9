"""Command-line entry point: ``lsepose {config,embed,synth,estimate,evaluate,bench}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 ran fine but
detected nothing. Failures print one JSON error record on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np
import yaml

from . import bench
from .config import BUILTIN_PREFIX, check_paths, default_yaml, load_config
from .embed_index import build_index, load_index, save_index
from .errors import ConfigError, LsePoseError
from .mesh_geom import load_mesh, model_diameter, sample_surface
from .metrics import aggregate, evaluate_scene
from .primitives import benchmark_models
from .projective import Pose
from .robust_pose import hypotheses_from_json, hypotheses_to_json
from .synth_oracle import NoiseSpec, SceneSpec, camera_from_record, read_scene, render_scene, write_scene

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NO_DETECTION = 0, 2, 3, 4
FORMAT_VERSION = 1


class DataError(LsePoseError):
    """Input data missing or inconsistent with the configuration."""


def _dump(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_meshes(cfg):
    builtin = benchmark_models()
    meshes = {}
    for m in cfg.models:
        p = cfg.path(m.path)
        meshes[m.id] = builtin[p[len(BUILTIN_PREFIX):]][0] if p.startswith(BUILTIN_PREFIX) else load_mesh(p)
    return meshes


def _load_indices(cfg):
    indices = {}
    for m in cfg.models:
        path = cfg.index_path(m.id)
        if not os.path.exists(path):
            raise DataError(f"no index for model {m.id!r} at {path}; run `lsepose embed` first")
        ix = load_index(path)
        if ix.params != cfg.lse:
            raise DataError(f"index {path} was built with different embedding parameters")
        indices[m.id] = ix
    return indices


def _model_set(cfg):
    return bench.ModelSet(_load_meshes(cfg), _load_indices(cfg), {m.id: m.symmetric for m in cfg.models})


# ---------------------------------------------------------------------------
# commands

def cmd_config(cfg, args):
    text = default_yaml()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_embed(cfg, args):
    meshes = _load_meshes(cfg)
    os.makedirs(cfg.path(cfg.index_dir), exist_ok=True)
    for i, m in enumerate(cfg.models):
        samples = sample_surface(meshes[m.id], cfg.sample_count, cfg.seed + i)
        ix = build_index(samples, cfg.lse, m.id)
        save_index(cfg.index_path(m.id), ix)
        degenerate = 1.0 - len(ix) / cfg.sample_count
        print(f"{m.id}: {len(ix)} entries, degenerate-frame fraction {degenerate:.4f}, "
              f"diameter {model_diameter(ix.positions):.3f} -> {cfg.index_path(m.id)}")
    return EXIT_OK


def _noise_from(d):
    try:
        return NoiseSpec(**(d or {}))
    except TypeError as e:
        raise ConfigError(f"invalid noise record: {e}") from None


def _scene_specs(spec, cfg, models):
    """Explicit scene list and/or a ``random`` block drawn with the benchmark generator."""
    if not isinstance(spec, dict):
        raise ConfigError("scene spec must be a mapping")
    cam = camera_from_record(spec["camera"]) if "camera" in spec else bench.BENCH_CAMERA
    out = []
    for k, sc in enumerate(spec.get("scenes", [])):
        try:
            objs = tuple((str(o["model_id"]), Pose.from_record(o)) for o in sc["objects"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"scene {k}: invalid object record ({e})") from None
        out.append(SceneSpec(objs, cam, _noise_from(sc.get("noise")), int(sc.get("seed", cfg.seed + k))))
    rnd = spec.get("random")
    if rnd:
        rng = np.random.default_rng(int(rnd.get("seed", cfg.seed)))
        ids = rnd.get("instances", sorted(models))
        noise = _noise_from(rnd.get("noise"))
        for s in range(int(rnd.get("count", 1))):
            out.append(bench.random_scene_spec(ids, rng, cam, noise, seed=int(rnd.get("seed", cfg.seed)) * 1000 + s))
    for sp in out:
        for mid, _ in sp.objects:
            if mid not in models:
                raise ConfigError(f"scene refers to unknown model {mid!r}")
    return out


def cmd_synth(cfg, args):
    try:
        with open(args.spec) as fh:
            spec = yaml.safe_load(fh)
    except OSError as e:
        raise DataError(f"cannot read scene spec {args.spec}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"scene spec is not valid YAML/JSON: {e}") from None
    ms = _model_set(cfg)
    specs = _scene_specs(spec, cfg, ms.meshes)
    for s, sp in enumerate(specs):
        d = os.path.join(args.out, f"scene_{s:03d}")
        write_scene(d, render_scene(sp, ms.meshes, ms.indices))
        print(d)
    return EXIT_OK


def cmd_estimate(cfg, args):
    ms = _model_set(cfg)
    scene = read_scene(args.scene)
    hyps = bench.estimate_scene(scene, ms, cfg.ransac, cfg.matching, args.threads)
    out = args.out or os.path.join(cfg.path(cfg.output_dir), "hypotheses.json")
    _dump(out, hypotheses_to_json(hyps))
    print(f"{len(hyps)} hypotheses for {len(scene.masks)} masks -> {out}")
    return EXIT_OK if hyps else EXIT_NO_DETECTION


def cmd_evaluate(cfg, args):
    ms = _model_set(cfg)
    scene = read_scene(args.scene)
    if not scene.gt:
        raise DataError(f"{args.scene} has no gt_poses.json")
    try:
        with open(args.hypotheses) as fh:
            hyps = hypotheses_from_json(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"cannot read hypotheses {args.hypotheses}: {e}") from None
    for g in scene.gt:
        if g.model_id not in ms.meshes:
            raise DataError(f"ground truth refers to unknown model {g.model_id!r}")
    records = evaluate_scene(os.path.basename(os.path.normpath(args.scene)), scene, hyps, ms.meshes,
                             {m: ms.points(m) for m in ms.meshes}, ms.diameters, ms.symmetric, cfg.vsd)
    report = aggregate(records, cfg.vsd)
    out = args.out or cfg.path(cfg.output_dir)
    os.makedirs(out, exist_ok=True)
    report.write(os.path.join(out, "metrics.json"), os.path.join(out, "metrics.csv"))
    print(f"ADD(-I) recall {report.add_recall:.3f}, VSD recall {report.vsd_recall:.3f} "
          f"({report.n_evaluated} objects) -> {out}")
    return EXIT_OK


BENCH_TARGETS = {"clean": 0.90, "noisy": 0.70}


def cmd_bench(cfg, args):
    """Seeded oracle benchmark on the bundled models, clean and noisy."""
    t0 = time.perf_counter()
    ms = bench.build_model_set(cfg.sample_count, cfg.lse, cfg.seed, cache_dir=cfg.path(cfg.index_dir))
    conditions = {"clean": bench.CLEAN, "noisy": bench.NOISY}
    summary = {"format_version": FORMAT_VERSION, "conditions": {}}
    ok = True
    for name, noise in conditions.items():
        r = bench.run_condition(name, ms, noise, args.scenes, cfg.seed, cfg.ransac, cfg.matching, cfg.vsd,
                                args.threads)
        target = BENCH_TARGETS[name]
        passed = r.report.add_recall >= target and r.report.vsd_recall >= target
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {r.summary()} (target {target:.2f})")
        summary["conditions"][name] = {"add_recall": r.report.add_recall, "vsd_recall": r.report.vsd_recall,
                                       "n_evaluated": r.report.n_evaluated, "seconds": r.seconds,
                                       "target": target, "passed": bool(passed)}
    total = time.perf_counter() - t0
    summary["seconds"] = total
    summary["passed"] = bool(ok)
    print(f"{'PASS' if ok else 'FAIL'} total {total:.1f} s")
    _dump(args.out or os.path.join(cfg.path(cfg.output_dir), "bench.json"), summary)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker processes for per-mask estimation (default: all cores)")
    p = argparse.ArgumentParser(prog="lsepose", description="Local-surface-embedding 6D pose pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("config", parents=[common], help="print or write the full default configuration")
    s.add_argument("--out")
    s.set_defaults(func=cmd_config)
    s = sub.add_parser("embed", parents=[common], help="build and save one embedding index per model")
    s.set_defaults(func=cmd_embed)
    s = sub.add_parser("synth", parents=[common], help="render oracle scenes from a scene spec file")
    s.add_argument("spec")
    s.add_argument("out")
    s.set_defaults(func=cmd_synth)
    s = sub.add_parser("estimate", parents=[common], help="estimate poses in a scene directory")
    s.add_argument("scene")
    s.add_argument("--out", help="hypotheses JSON (default <output_dir>/hypotheses.json)")
    s.set_defaults(func=cmd_estimate)
    s = sub.add_parser("evaluate", parents=[common], help="score hypotheses against a scene's ground truth")
    s.add_argument("scene")
    s.add_argument("hypotheses")
    s.add_argument("--out", help="directory for metrics.json and metrics.csv")
    s.set_defaults(func=cmd_evaluate)
    s = sub.add_parser("bench", parents=[common], help="run the seeded synthetic benchmark")
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def _error(kind, exc, code):
    rec = {"format_version": FORMAT_VERSION, "error": kind, "type": type(exc).__name__, "message": str(exc),
           "exit_code": code}
    sys.stderr.write(json.dumps(rec, sort_keys=True) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command != "config":
            check_paths(cfg)
        return args.func(cfg, args)
    except ConfigError as e:
        return _error("config", e, EXIT_CONFIG)
    except (LsePoseError, OSError, ValueError, KeyError) as e:
        return _error("data", e, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
