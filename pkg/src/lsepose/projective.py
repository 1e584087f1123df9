"""Pinhole camera, rigid poses, software depth rendering and mask utilities."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from ._raster import rasterize
from .errors import FormatError

NEAR_PLANE = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


class Pose:
    """Rigid transform ``x_cam = R x_obj + t``."""

    __slots__ = ("R", "t")

    def __init__(self, R, t, check=True):
        R = np.array(R, dtype=np.float64).reshape(3, 3)
        t = np.array(t, dtype=np.float64).reshape(3)
        if check:
            if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
                raise ValueError("rotation is not a proper rotation matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        self.R = R
        self.t = t

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, t):
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), t)

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t, check=False)

    def inverse(self):
        return Pose(self.R.T, -self.R.T @ self.t, check=False)

    def to_record(self):
        return {"R": [float(x) for x in self.R.reshape(-1)], "t": [float(x) for x in self.t]}

    @classmethod
    def from_record(cls, rec):
        return cls(np.array(rec["R"], dtype=np.float64).reshape(3, 3), rec["t"])

    def __eq__(self, other):
        return isinstance(other, Pose) and np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    def __repr__(self):
        return f"Pose(rotvec={Rotation.from_matrix(self.R).as_rotvec().round(4)}, t={self.t.round(4)})"


def rotation_error(Ra, Rb):
    """Geodesic angle between two rotations, radians."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def project(points, cam):
    """Pixel coordinates ``(fx x/z + cx, fy y/z + cy)`` of camera-frame points."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise ValueError("cannot project points with non-positive depth")
    return np.stack([cam.fx * p[..., 0] / z + cam.cx, cam.fy * p[..., 1] / z + cam.cy], axis=-1)


def backproject(uv, depth, cam):
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    return np.stack([(uv[..., 0] - cam.cx) * z / cam.fx, (uv[..., 1] - cam.cy) * z / cam.fy, z], axis=-1)


@dataclass
class SceneMaps:
    """Dense render outputs: camera-z depth (inf = background), instance ids, object-frame points."""

    depth: np.ndarray
    ids: np.ndarray
    object_points: np.ndarray

    @classmethod
    def empty(cls, cam):
        H, W = cam.shape
        return cls(np.full((H, W), np.inf), np.zeros((H, W), np.int32), np.full((H, W, 3), np.nan))

    def copy(self):
        return SceneMaps(self.depth.copy(), self.ids.copy(), self.object_points.copy())

    @property
    def shape(self):
        return self.depth.shape


def _clip_near(tris_cam, tris_obj, near):
    """Clip triangles against ``z >= near``; returns new (T', 3, 3) arrays."""
    z = tris_cam[:, :, 2]
    inside = z >= near
    full = inside.all(axis=1)
    if full.all():
        return tris_cam, tris_obj
    out_c, out_o = [tris_cam[full]], [tris_obj[full]]
    for t in np.flatnonzero(~full & inside.any(axis=1)):
        poly_c, poly_o = [], []
        for i in range(3):
            j = (i + 1) % 3
            ci, cj = tris_cam[t, i], tris_cam[t, j]
            oi, oj = tris_obj[t, i], tris_obj[t, j]
            if inside[t, i]:
                poly_c.append(ci)
                poly_o.append(oi)
            if inside[t, i] != inside[t, j]:
                s = (near - ci[2]) / (cj[2] - ci[2])
                poly_c.append(ci + s * (cj - ci))
                poly_o.append(oi + s * (oj - oi))
        for k in range(1, len(poly_c) - 1):
            out_c.append(np.array([poly_c[0], poly_c[k], poly_c[k + 1]])[None])
            out_o.append(np.array([poly_o[0], poly_o[k], poly_o[k + 1]])[None])
    return np.concatenate(out_c), np.concatenate(out_o)


def _prepare(mesh, pose, cam, near=NEAR_PLANE):
    tri_obj = mesh.vertices[mesh.triangles]
    tri_cam = pose.apply(tri_obj.reshape(-1, 3)).reshape(-1, 3, 3)
    tri_cam, tri_obj = _clip_near(tri_cam, tri_obj, near)
    z = tri_cam[:, :, 2]
    uv = np.empty(tri_cam.shape[:2] + (2,))
    uv[..., 0] = cam.fx * tri_cam[..., 0] / z + cam.cx
    uv[..., 1] = cam.fy * tri_cam[..., 1] / z + cam.cy
    return uv, 1.0 / z, np.ascontiguousarray(tri_obj)


def render_into(maps, mesh, pose, cam, instance_id, origin=(0, 0), near=NEAR_PLANE):
    """In-place rasterisation into ``maps`` (which may be a crop starting at ``origin``)."""
    uv, inv_z, attr = _prepare(mesh, pose, cam, near)
    if len(uv):
        rasterize(uv, inv_z, attr, maps.depth, maps.ids, maps.object_points,
                  np.int32(instance_id), int(origin[0]), int(origin[1]))
    return maps


def render(mesh, pose, cam, instance_id=1, target=None, near=NEAR_PLANE):
    """Render ``mesh`` under ``pose`` and z-merge it with ``target``.

    Returns a new :class:`SceneMaps`; ``target`` is left untouched.
    """
    maps = SceneMaps.empty(cam) if target is None else target.copy()
    if maps.shape != cam.shape:
        raise ValueError(f"target shape {maps.shape} does not match camera {cam.shape}")
    return render_into(maps, mesh, pose, cam, instance_id, near=near)


def projected_bbox(mesh, pose, cam, pad=1):
    """Integer pixel box ``(x0, y0, x1, y1)`` (exclusive end) covering the projected mesh, clipped to the image."""
    pc = pose.apply(mesh.vertices)
    if np.any(pc[:, 2] < NEAR_PLANE):
        return 0, 0, cam.width, cam.height
    uv = project(pc, cam)
    x0 = max(int(np.floor(uv[:, 0].min())) - pad, 0)
    y0 = max(int(np.floor(uv[:, 1].min())) - pad, 0)
    x1 = min(int(np.ceil(uv[:, 0].max())) + pad + 1, cam.width)
    y1 = min(int(np.ceil(uv[:, 1].max())) + pad + 1, cam.height)
    return x0, y0, max(x1, x0), max(y1, y0)


def mask_of(maps, instance_id):
    if instance_id < 1:
        raise ValueError("instance ids start at 1")
    return maps.ids == instance_id


def iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


# ---------------------------------------------------------------------------
# files

DEPTH_MAGIC = b"DPTH"


def write_depth(path, depth):
    """Raw little-endian float32 depth with a 16-byte header."""
    depth = np.asarray(depth)
    H, W = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<3I", W, H, 0))
        fh.write(depth.astype("<f4").tobytes())


def read_depth(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != DEPTH_MAGIC:
        raise FormatError(f"{path}: not a depth map (bad magic)")
    W, H, _ = struct.unpack("<3I", data[4:16])
    if len(data) != 16 + 4 * W * H:
        raise FormatError(f"{path}: truncated depth map")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(H, W).astype(np.float32)


def write_mask(path, mask, instance_id):
    if not 1 <= instance_id <= 255:
        raise ValueError("8-bit masks hold instance ids 1..255")
    img = np.where(np.asarray(mask, dtype=bool), instance_id, 0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def read_mask(path):
    """Returns ``(mask, instance_id)``; the id is 0 for an empty mask."""
    img = np.asarray(Image.open(path))
    ids = np.unique(img[img > 0])
    return img > 0, int(ids[0]) if len(ids) else 0
