"""Synthetic oracle scenes: z-buffered depth, instance masks and per-pixel LSE maps.

The LSE map plays the part of a learned per-pixel embedding predictor; the
masks play the part of an instance segmenter. Both come straight from geometry,
with optional seeded corruption.
"""
from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FormatError, SchemaError
from .lse_core import lse_raw, normalize_array
from .projective import CameraIntrinsics, Pose, SceneMaps, read_depth, read_mask, render_into, write_depth, write_mask

FORMAT_VERSION = 1
LSEM_MAGIC = b"LSEM"
LSEM_VERSION = 1


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption applied after rendering, in this order.

    :param lse_sd: sd of additive Gaussian noise on every LSE channel (normalised units).
    :param mask_morph: pixels of dilation (> 0) or erosion (< 0) applied to each mask.
    :param dropout: fraction of foreground LSE pixels replaced by the sentinel.
    """

    lse_sd: float = 0.0
    mask_morph: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if not self.lse_sd >= 0:
            raise ValueError("lse_sd must be >= 0")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")
        if int(self.mask_morph) != self.mask_morph:
            raise ValueError("mask_morph must be an integer")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple  # of (model_id, Pose)
    camera: CameraIntrinsics
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0


@dataclass
class LseMap:
    """Per-pixel normalised embeddings, float32 ``(H, W, C)``; NaN marks background."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("LSE map must be (H, W, C)")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    @property
    def foreground(self):
        return np.all(np.isfinite(self.values), axis=-1)

    @classmethod
    def empty(cls, height, width, channels):
        return cls(np.full((height, width, channels), np.nan, np.float32))

    def __eq__(self, other):
        return isinstance(other, LseMap) and np.array_equal(self.values, other.values, equal_nan=True)


@dataclass(frozen=True)
class GtPose:
    instance_id: int
    model_id: str
    pose: Pose

    def to_record(self):
        return {"instance_id": self.instance_id, "model_id": self.model_id, **self.pose.to_record()}


@dataclass
class OracleScene:
    """Everything a scene directory holds.

    ``depth`` is the float32 scene depth (inf = background). ``maps`` carries the
    full-precision render and is only present for freshly generated scenes.
    """

    camera: CameraIntrinsics
    depth: np.ndarray
    masks: dict  # instance id -> bool (H, W)
    lse_map: LseMap
    gt: list  # of GtPose
    maps: SceneMaps | None = None


def _check_indices(spec, meshes, indices):
    params = None
    for model_id, _ in spec.objects:
        if model_id not in meshes:
            raise KeyError(f"no mesh for model {model_id!r}")
        if model_id not in indices:
            raise KeyError(f"no index for model {model_id!r}")
        p = indices[model_id].params
        if params is not None and p != params:
            raise ValueError("all indices in a scene must share LseParams")
        params = p
    return params


def _exact_lse(index, points):
    """Recompute embeddings at ``points`` against the index's own sample cloud."""
    p = index.params
    pos = index.positions
    tree = index.position_tree
    near, _ = index.nearest_entries(points)
    out = np.full((len(points), p.dim), np.nan)
    for row, (x, j) in enumerate(zip(points, near)):
        nb = pos[tree.query_ball_point(x, p.radius_model)]
        try:
            out[row] = lse_raw(nb, x, index.samples.normals[j], p).values
        except ValueError:
            pass
    return normalize_array(out, index.stats)


def render_scene(spec, meshes, indices, exact=False):
    """Render ``spec`` into an :class:`OracleScene`.

    Instance ``k`` (1-based) is the k-th entry of ``spec.objects``. A pixel's
    LSE is the normalised vector of the index entry nearest to the rendered
    object point, or the sentinel when that entry is farther than the LSE
    radius. With ``exact`` the embedding is recomputed at the point instead.
    """
    params = _check_indices(spec, meshes, indices)
    cam = spec.camera
    if len(spec.objects) > 255:
        raise ValueError("at most 255 instances per scene")
    maps = SceneMaps.empty(cam)
    for k, (model_id, pose) in enumerate(spec.objects, start=1):
        if np.any(pose.apply(meshes[model_id].vertices)[:, 2] <= 0):
            raise ValueError(f"instance {k} is not fully in front of the camera")
        render_into(maps, meshes[model_id], pose, cam, k)

    dim = params.dim if params is not None else 11
    lse = np.full(cam.shape + (dim,), np.nan, np.float32)
    for k, (model_id, _) in enumerate(spec.objects, start=1):
        ys, xs = np.nonzero(maps.ids == k)
        if len(ys) == 0:
            continue
        index = indices[model_id]
        pts = maps.object_points[ys, xs]
        ids, d = index.nearest_entries(pts)
        vals = _exact_lse(index, pts) if exact else index.vectors[ids]
        vals = np.where((d <= params.radius_model)[:, None], vals, np.nan)
        lse[ys, xs] = vals.astype(np.float32)

    masks = {k: maps.ids == k for k in range(1, len(spec.objects) + 1)}
    lse_map, masks = apply_noise(LseMap(lse), masks, spec.noise, spec.seed)
    gt = [GtPose(k, m, p) for k, (m, p) in enumerate(spec.objects, start=1)]
    return OracleScene(cam, maps.depth.astype(np.float32), masks, lse_map, gt, maps)


def apply_noise(lse_map, masks, noise, seed):
    """Seeded corruption: Gaussian LSE noise, then mask morphology, then LSE dropout."""
    rng = np.random.default_rng(seed)
    values = lse_map.values.copy()
    fg = np.all(np.isfinite(values), axis=-1)
    ys, xs = np.nonzero(fg)
    if noise.lse_sd > 0:
        values[ys, xs] += rng.normal(0.0, noise.lse_sd, (len(ys), values.shape[2])).astype(np.float32)
    out_masks = {}
    for k, m in masks.items():
        if noise.mask_morph > 0:
            m = ndimage.binary_dilation(m, iterations=int(noise.mask_morph))
        elif noise.mask_morph < 0:
            m = ndimage.binary_erosion(m, iterations=int(-noise.mask_morph))
        out_masks[k] = m
    if noise.dropout > 0:
        drop = rng.random(len(ys)) < noise.dropout
        values[ys[drop], xs[drop]] = np.nan
    return LseMap(values), out_masks


# ---------------------------------------------------------------------------
# files

def write_lsem(path, lse_map):
    H, W, C = lse_map.values.shape
    with open(path, "wb") as fh:
        fh.write(LSEM_MAGIC + struct.pack("<4I", LSEM_VERSION, W, H, C))
        fh.write(lse_map.values.astype("<f4").tobytes())


def read_lsem(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20 or data[:4] != LSEM_MAGIC:
        raise FormatError(f"{path}: not an LSE map (bad magic)")
    version, W, H, C = struct.unpack("<4I", data[4:20])
    if version != LSEM_VERSION:
        raise FormatError(f"{path}: unsupported LSE map version {version}")
    if len(data) != 20 + 4 * W * H * C:
        raise FormatError(f"{path}: truncated LSE map")
    return LseMap(np.frombuffer(data, dtype="<f4", offset=20).reshape(H, W, C).astype(np.float32))


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON ({e})") from None


def camera_from_record(rec):
    try:
        return CameraIntrinsics(float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]),
                                int(rec["width"]), int(rec["height"]))
    except KeyError as e:
        raise SchemaError(f"camera record is missing {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        raise SchemaError(f"invalid camera record: {e}") from None


def read_camera(path):
    return camera_from_record(_load_json(path))


def write_camera(path, cam):
    _dump_json(path, {"format_version": FORMAT_VERSION, **cam.to_dict()})


def gt_from_records(obj):
    """Accepts ``{"format_version", "poses": [...]}`` or a bare list of pose records."""
    recs = obj["poses"] if isinstance(obj, dict) else obj
    if not isinstance(recs, list):
        raise SchemaError("ground-truth poses must be a list")
    out = []
    for k, rec in enumerate(recs, start=1):
        try:
            out.append(GtPose(int(rec.get("instance_id", k)), str(rec["model_id"]), Pose.from_record(rec)))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"invalid pose record {k}: {e}") from None
    return out


def write_scene(directory, scene):
    os.makedirs(directory, exist_ok=True)
    write_camera(os.path.join(directory, "camera.json"), scene.camera)
    write_depth(os.path.join(directory, "depth.dpth"), scene.depth)
    for k, m in sorted(scene.masks.items()):
        write_mask(os.path.join(directory, f"mask_{k}.png"), m, k)
    write_lsem(os.path.join(directory, "lse.lsem"), scene.lse_map)
    _dump_json(os.path.join(directory, "gt_poses.json"),
               {"format_version": FORMAT_VERSION, "poses": [g.to_record() for g in scene.gt]})


_MASK_RE = re.compile(r"^mask_(\d+)\.png$")


def read_masks(directory):
    masks = {}
    for name in os.listdir(directory):
        m = _MASK_RE.match(name)
        if m:
            mask, _ = read_mask(os.path.join(directory, name))
            masks[int(m.group(1))] = mask
    return dict(sorted(masks.items()))


def read_scene(directory):
    """Load a scene directory; ground truth is optional (absent for real inputs)."""
    cam = read_camera(os.path.join(directory, "camera.json"))
    depth = read_depth(os.path.join(directory, "depth.dpth"))
    lse_map = read_lsem(os.path.join(directory, "lse.lsem"))
    if depth.shape != cam.shape or lse_map.values.shape[:2] != cam.shape:
        raise FormatError(f"{directory}: map sizes do not match the camera")
    masks = read_masks(directory)
    for k, m in masks.items():
        if m.shape != cam.shape:
            raise FormatError(f"{directory}: mask_{k}.png size does not match the camera")
    gt_path = os.path.join(directory, "gt_poses.json")
    gt = gt_from_records(_load_json(gt_path)) if os.path.exists(gt_path) else []
    return OracleScene(cam, depth, masks, lse_map, gt)
