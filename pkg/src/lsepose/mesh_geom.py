"""Triangle meshes, oriented surface samples and basic model statistics."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial import QhullError

from .errors import EmptyMeshError, MeshParseError


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SurfaceMesh:
    """Indexed triangle mesh in the units of its source file.

    ``normals`` is always populated: either passed through from the file or
    computed by area-weighted averaging of adjacent triangle normals.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = None
    dropped_degenerate: int = 0

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64)
        t = _frozen(self.triangles, np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshParseError(f"vertices must be (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshParseError(f"triangles must be (T, 3), got {t.shape}")
        if len(t) == 0:
            raise EmptyMeshError("mesh has no triangles")
        if t.min() < 0 or t.max() >= len(v):
            raise MeshParseError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.normals is None:
            n = vertex_normals(v, t)
        else:
            n = np.asarray(self.normals, dtype=np.float64)
            if n.shape != v.shape:
                raise MeshParseError("normals must match vertices")
        object.__setattr__(self, "normals", _frozen(n, np.float64))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def triangle_areas(self):
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0)):
        """Return a rigidly moved copy (normals rotated with it)."""
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        return SurfaceMesh(self.vertices @ R.T + t, self.triangles, self.normals @ R.T)

    def subdivided(self):
        """Split every triangle into four via edge midpoints."""
        tris = self.triangles
        edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        mid = 0.5 * (self.vertices[uniq[:, 0]] + self.vertices[uniq[:, 1]])
        mid_n = self.normals[uniq[:, 0]] + self.normals[uniq[:, 1]]
        norms = np.linalg.norm(mid_n, axis=1, keepdims=True)
        mid_n = np.where(norms > 0, mid_n / np.where(norms > 0, norms, 1), self.normals[uniq[:, 0]])
        nv = len(self.vertices)
        T = len(tris)
        m01 = nv + inverse[:T]
        m12 = nv + inverse[T:2 * T]
        m20 = nv + inverse[2 * T:]
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        new = np.concatenate([
            np.stack([a, m01, m20], 1),
            np.stack([m01, b, m12], 1),
            np.stack([m20, m12, c], 1),
            np.stack([m01, m12, m20], 1),
        ])
        return SurfaceMesh(np.vstack([self.vertices, mid]), new, np.vstack([self.normals, mid_n]))


def vertex_normals(vertices, triangles):
    """Area-weighted vertex normals, unit length.

    Vertices not referenced by any triangle get ``+z``.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    # cross product magnitude is twice the area, so the sum is area-weighted
    fn = np.cross(b - a, c - a)
    acc = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(acc, triangles[:, i], fn)
    norms = np.linalg.norm(acc, axis=1)
    out = np.zeros_like(acc)
    out[:, 2] = 1.0
    ok = norms > 0
    out[ok] = acc[ok] / norms[ok, None]
    return out


def _drop_degenerate(vertices, triangles):
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    keep = area2 > 0
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"dropped {dropped} zero-area triangle(s)", stacklevel=3)
    return triangles[keep], dropped


def _build(vertices, triangles, normals):
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(triangles) == 0:
        raise EmptyMeshError("mesh file contains no faces")
    if triangles.min() < 0 or triangles.max() >= len(vertices):
        raise MeshParseError("face references a vertex index outside [0, vertex count)")
    triangles, dropped = _drop_degenerate(vertices, triangles)
    if len(triangles) == 0:
        raise EmptyMeshError("all triangles are degenerate")
    return SurfaceMesh(vertices, triangles, normals, dropped_degenerate=dropped)


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(data):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshParseError("not a PLY file")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise MeshParseError("truncated PLY header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]
    fmt = None
    elements = []
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise MeshParseError("property before element")
            if parts[1] == "list":
                try:
                    elements[-1]["props"].append((parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                except (KeyError, IndexError) as exc:
                    raise MeshParseError(f"bad list property: {line}") from exc
            else:
                try:
                    elements[-1]["props"].append((parts[2], _PLY_TYPES[parts[1]], None))
                except (KeyError, IndexError) as exc:
                    raise MeshParseError(f"bad property: {line}") from exc
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshParseError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body


def _read_ply(data):
    fmt, elements, body = _parse_ply_header(data)
    values = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        try:
            for el in elements:
                rows = []
                for _ in range(el["count"]):
                    row = {}
                    for name, t, item_t in el["props"]:
                        if item_t is None:
                            row[name] = float(tokens[pos]) if t.startswith("f") else int(tokens[pos])
                            pos += 1
                        else:
                            n = int(tokens[pos])
                            pos += 1
                            row[name] = [int(x) for x in tokens[pos:pos + n]]
                            pos += n
                    rows.append(row)
                values[el["name"]] = rows
        except (IndexError, ValueError) as exc:
            raise MeshParseError("malformed ASCII PLY body") from exc
    else:
        pos = 0
        try:
            for el in elements:
                props = el["props"]
                if all(p[2] is None for p in props):
                    dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                    nbytes = dt.itemsize * el["count"]
                    if pos + nbytes > len(body):
                        raise MeshParseError("truncated binary PLY")
                    arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=pos)
                    pos += nbytes
                    values[el["name"]] = arr
                    continue
                rows = []
                for _ in range(el["count"]):
                    row = {}
                    for name, t, item_t in props:
                        if item_t is None:
                            size = np.dtype(t).itemsize
                            row[name] = np.frombuffer(body, "<" + t, 1, pos)[0]
                            pos += size
                        else:
                            n = int(np.frombuffer(body, "<" + t, 1, pos)[0])
                            pos += np.dtype(t).itemsize
                            row[name] = np.frombuffer(body, "<" + item_t, n, pos).tolist()
                            pos += n * np.dtype(item_t).itemsize
                    rows.append(row)
                values[el["name"]] = rows
        except ValueError as exc:
            raise MeshParseError("truncated binary PLY") from exc

    if "vertex" not in values or "face" not in values:
        raise MeshParseError("PLY needs vertex and face elements")
    verts = values["vertex"]

    def column(name):
        if isinstance(verts, np.ndarray):
            return verts[name].astype(np.float64)
        return np.array([r[name] for r in verts], dtype=np.float64)

    try:
        xyz = np.stack([column("x"), column("y"), column("z")], axis=1)
    except (KeyError, ValueError) as exc:
        raise MeshParseError("vertex element lacks x/y/z") from exc
    vnames = verts.dtype.names if isinstance(verts, np.ndarray) else (verts[0].keys() if verts else ())
    normals = None
    if all(k in vnames for k in ("nx", "ny", "nz")):
        normals = np.stack([column("nx"), column("ny"), column("nz")], axis=1)
    tris = []
    for row in values["face"]:
        idx = row.get("vertex_indices", row.get("vertex_index"))
        if idx is None:
            raise MeshParseError("face element lacks vertex_indices")
        if len(idx) < 3:
            raise MeshParseError("face with fewer than 3 vertices")
        tris.extend(_fan(list(idx)))
    return _build(xyz, tris, normals)


# ---------------------------------------------------------------------------
# OBJ

def _read_obj(text):
    v, vn, faces = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                v.append([float(x) for x in parts[1:4]])
                if len(v[-1]) != 3:
                    raise ValueError
            elif parts[0] == "vn":
                vn.append([float(x) for x in parts[1:4]])
                if len(vn[-1]) != 3:
                    raise ValueError
            elif parts[0] == "f":
                corners = []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    vi = int(fields[0])
                    ni = int(fields[2]) if len(fields) > 2 and fields[2] else None
                    corners.append((vi, ni))
                if len(corners) < 3:
                    raise ValueError
                faces.append(corners)
        except ValueError as exc:
            raise MeshParseError(f"malformed OBJ record at line {lineno}") from exc

    def resolve(i, n):
        j = i - 1 if i > 0 else n + i
        if i == 0 or not 0 <= j < n:
            raise MeshParseError(f"OBJ index {i} out of range")
        return j

    nv, nn = len(v), len(vn)
    corners = [[(resolve(vi, nv), None if ni is None else resolve(ni, nn)) for vi, ni in f] for f in faces]
    have_normals = nn > 0 and all(ni is not None for f in corners for _, ni in f)
    verts = np.array(v, dtype=np.float64).reshape(-1, 3)
    if not have_normals:
        tris = [t for f in corners for t in _fan([vi for vi, _ in f])]
        return _build(verts, tris, None)
    # one normal per vertex when consistent, otherwise split vertices per (v, vn) pair
    mapping = {}
    consistent = True
    for f in corners:
        for vi, ni in f:
            if mapping.setdefault(vi, ni) != ni:
                consistent = False
    normals_arr = np.array(vn, dtype=np.float64)
    if consistent and len(mapping) == nv:
        normals = normals_arr[[mapping[i] for i in range(nv)]]
        tris = [t for f in corners for t in _fan([vi for vi, _ in f])]
        return _build(verts, tris, normals)
    keys = {}
    out_v, out_n = [], []
    tris = []
    for f in corners:
        ids = []
        for key in f:
            if key not in keys:
                keys[key] = len(out_v)
                out_v.append(verts[key[0]])
                out_n.append(normals_arr[key[1]])
            ids.append(keys[key])
        tris.extend(_fan(ids))
    return _build(np.array(out_v), tris, np.array(out_n))


def load_mesh(path, format=None):
    """Read a PLY (ASCII or binary little-endian) or ASCII OBJ mesh.

    :param path: mesh file.
    :param format: ``"ply"`` or ``"obj"``; inferred from the suffix when omitted.
    :return: a :class:`SurfaceMesh` with zero-area triangles removed.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    data = path.read_bytes()
    if fmt == "ply":
        return _read_ply(data)
    if fmt == "obj":
        return _read_obj(data.decode("utf-8", errors="replace"))
    raise MeshParseError(f"unknown mesh format {fmt!r}")


def write_ply(path, mesh, binary=True):
    """Debug dump of a mesh with its normals."""
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {mesh.n_vertices}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property double nx\nproperty double ny\nproperty double nz\n"
        f"element face {mesh.n_triangles}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.hstack([mesh.vertices, mesh.normals]).astype("<f8").tobytes())
            for tri in mesh.triangles:
                fh.write(struct.pack("<B3i", 3, *tri))
        else:
            for p, n in zip(mesh.vertices, mesh.normals):
                fh.write((" ".join(repr(float(x)) for x in (*p, *n)) + "\n").encode())
            for tri in mesh.triangles:
                fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode())


# ---------------------------------------------------------------------------
# samples

@dataclass(frozen=True)
class PointSample:
    position: np.ndarray
    normal: np.ndarray
    triangle: int


@dataclass(frozen=True)
class PointSamples:
    """Struct-of-arrays container for oriented surface samples."""

    positions: np.ndarray
    normals: np.ndarray
    triangle_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        p = _frozen(self.positions, np.float64).reshape(-1, 3)
        n = _frozen(self.normals, np.float64).reshape(-1, 3)
        if p.shape != n.shape:
            raise ValueError("positions and normals must have the same shape")
        tid = self.triangle_ids
        tid = np.full(len(p), -1) if tid is None else tid
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "triangle_ids", _frozen(tid, np.int64))

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return PointSample(self.positions[i], self.normals[i], int(self.triangle_ids[i]))
        return PointSamples(self.positions[i], self.normals[i], self.triangle_ids[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0)):
        R = np.asarray(rotation, dtype=np.float64)
        return PointSamples(self.positions @ R.T + np.asarray(translation), self.normals @ R.T, self.triangle_ids)


def sample_surface(mesh, count, seed=0):
    """Draw ``count`` area-uniform oriented samples from ``mesh``.

    Triangles are picked with probability proportional to area and points are
    placed by uniform barycentric sampling. Normals are interpolated from the
    vertex normals and renormalised.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise EmptyMeshError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    uv = rng.random((count, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    u, v = uv[:, :1], uv[:, 1:]
    idx = mesh.triangles[tri]
    a, b, c = (mesh.vertices[idx[:, i]] for i in range(3))
    pos = a + u * (b - a) + v * (c - a)
    na, nb, nc = (mesh.normals[idx[:, i]] for i in range(3))
    nrm = (1.0 - u - v) * na + u * nb + v * nc
    length = np.linalg.norm(nrm, axis=1)
    bad = length < 1e-12
    if bad.any():
        fn = np.cross(b[bad] - a[bad], c[bad] - a[bad])
        nrm[bad] = fn
        length[bad] = np.linalg.norm(fn, axis=1)
    nrm /= length[:, None]
    return PointSamples(pos, nrm, tri)


def _positions(samples):
    if isinstance(samples, PointSamples):
        return samples.positions
    return np.asarray(samples, dtype=np.float64).reshape(-1, 3)


def radius_neighbors(samples, center, radius):
    """Samples within ``radius`` (inclusive) of ``center``, in index order."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    idx = radius_neighbor_indices(samples, center, radius)
    return samples[idx] if isinstance(samples, PointSamples) else _positions(samples)[idx]


def radius_neighbor_indices(samples, center, radius):
    pos = _positions(samples)
    d = np.linalg.norm(pos - np.asarray(center, dtype=np.float64), axis=1)
    return np.flatnonzero(d <= radius)


class NeighborSearch:
    """KD-tree backed radius search returning the same sets as :func:`radius_neighbors`."""

    def __init__(self, samples):
        self.positions = _positions(samples)
        self.tree = cKDTree(self.positions)

    def indices(self, center, radius):
        idx = np.asarray(self.tree.query_ball_point(center, radius), dtype=np.int64)
        idx.sort()
        return idx

    def batch_indices(self, centers, radius):
        out = self.tree.query_ball_point(np.asarray(centers), radius, return_sorted=True)
        return [np.asarray(i, dtype=np.int64) for i in out]


def _max_pairwise(points, chunk=2048):
    best = 0.0
    for s in range(0, len(points), chunk):
        block = points[s:s + chunk]
        d = np.linalg.norm(block[:, None, :] - points[None, :, :], axis=2)
        best = max(best, float(d.max()))
    return best


def model_diameter(samples):
    """Maximum pairwise distance between sample positions (exact)."""
    pts = _positions(samples)
    if len(pts) < 2:
        raise ValueError("need at least 2 samples for a diameter")
    try:
        hull = ConvexHull(pts)
        pts = pts[hull.vertices]
    except (QhullError, ValueError):
        pass
    return _max_pairwise(pts)


@dataclass(frozen=True)
class ModelStats:
    diameter: float
    sample_count: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray


def model_stats(samples):
    pts = _positions(samples)
    return ModelStats(model_diameter(pts), len(pts), pts.min(axis=0), pts.max(axis=0))
