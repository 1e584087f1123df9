"""Procedural CAD-like meshes used by the oracle benchmark, tests and demos.

Planar faces get their own vertices so that vertex normals equal face
normals, as in a typical CAD export with split normals.
"""
from __future__ import annotations

import numpy as np

from .mesh_geom import SurfaceMesh


def _signed_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _point_in_tri(p, a, b, c):
    def cross(o, u, v):
        return (u[0] - o[0]) * (v[1] - o[1]) - (u[1] - o[1]) * (v[0] - o[0])

    return cross(a, b, p) >= 0 and cross(b, c, p) >= 0 and cross(c, a, p) >= 0


def ear_clip(poly):
    """Triangulate a simple polygon given counter-clockwise; returns index triples."""
    poly = np.asarray(poly, dtype=np.float64)
    idx = list(range(len(poly)))
    out = []
    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 10 * len(poly) ** 2:
            raise ValueError("polygon is not simple")
        for k in range(len(idx)):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            a, b, c = poly[i0], poly[i1], poly[i2]
            if (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]) <= 0:
                continue
            if any(_point_in_tri(poly[j], a, b, c) for j in idx if j not in (i0, i1, i2)):
                continue
            out.append((i0, i1, i2))
            idx.pop(k)
            break
    out.append(tuple(idx))
    return out


class _Builder:
    def __init__(self):
        self.v, self.n, self.t = [], [], []

    def face(self, pts, tris):
        pts = np.asarray(pts, dtype=np.float64)
        a, b, c = pts[tris[0][0]], pts[tris[0][1]], pts[tris[0][2]]
        fn = np.cross(b - a, c - a)
        fn /= np.linalg.norm(fn)
        base = len(self.v)
        self.v.extend(pts)
        self.n.extend([fn] * len(pts))
        self.t.extend([(base + i, base + j, base + k) for i, j, k in tris])

    def mesh(self):
        return SurfaceMesh(np.array(self.v), np.array(self.t), np.array(self.n))


def loft(bottom, top, height):
    """Closed solid between a bottom polygon at z=0 and a top polygon at z=height.

    Both polygons are 2D, counter-clockwise and have matching vertex counts;
    the top should be a similar copy of the bottom so one triangulation fits
    both caps.
    """
    bottom = np.asarray(bottom, dtype=np.float64)
    top = np.asarray(top, dtype=np.float64)
    if _signed_area(bottom) < 0:
        bottom, top = bottom[::-1], top[::-1]
    tris = ear_clip(bottom)
    b3 = np.column_stack([bottom, np.zeros(len(bottom))])
    t3 = np.column_stack([top, np.full(len(top), float(height))])
    out = _Builder()
    out.face(b3, [(i, k, j) for i, j, k in tris])
    out.face(t3, tris)
    m = len(bottom)
    for i in range(m):
        j = (i + 1) % m
        out.face([b3[i], b3[j], t3[j], t3[i]], [(0, 1, 2), (0, 2, 3)])
    return out.mesh()


def box(size=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)):
    sx, sy, sz = size
    sq = np.array([[-sx, -sy], [sx, -sy], [sx, sy], [-sx, sy]]) / 2
    m = loft(sq, sq, sz)
    return SurfaceMesh(m.vertices + np.asarray(center) - [0, 0, sz / 2], m.triangles, m.normals)


def uv_sphere(radius=1.0, n_lat=24, n_lon=48):
    """Smooth-shaded sphere (shared vertices, radial normals)."""
    verts = [[0.0, 0.0, radius]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append([radius * np.sin(th) * np.cos(ph), radius * np.sin(th) * np.sin(ph), radius * np.cos(th)])
    verts.append([0.0, 0.0, -radius])
    verts = np.array(verts)
    tris = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        tris.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            tris.append((a, c, d))
            tris.append((a, d, b))
    south = len(verts) - 1
    for j in range(n_lon):
        tris.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    return SurfaceMesh(verts, np.array(tris), verts / radius)


def _centered(mesh):
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    c = 0.5 * (lo + hi)
    return SurfaceMesh(mesh.vertices - c, mesh.triangles, mesh.normals)


def bracket_model():
    """Asymmetric tapered L-shaped solid (~ 130 mm diameter, mm units)."""
    L = np.array([[0, 0], [110, 0], [110, 35], [45, 35], [45, 85], [0, 85]], dtype=float)
    top = 0.7 * L + [6.0, 4.0]
    return _centered(loft(L, top, 45.0))


def cross_model():
    """Tapered plus-shaped solid with exact 4-fold symmetry about +z (mm units)."""
    a, b = 20.0, 55.0
    plus = np.array([
        [a, -a], [b, -a], [b, a], [a, a], [a, b], [-a, b],
        [-a, a], [-b, a], [-b, -a], [-a, -a], [-a, -b], [a, -b],
    ])
    m = loft(plus, 0.55 * plus, 40.0)
    return SurfaceMesh(m.vertices - [0, 0, 20.0], m.triangles, m.normals)


def wedge_model():
    """Irregular tapered pentagonal solid without symmetry (mm units)."""
    pent = np.array([[0, 0], [100, 0], [112, 52], [42, 84], [-12, 46]], dtype=float)
    top = 0.6 * pent + [18.0, 12.0]
    return _centered(loft(pent, top, 60.0))


# rotations about +z that map the cross model onto itself
CROSS_SYMMETRIES = tuple(
    np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
    for a in (0.0, np.pi / 2, np.pi, 3 * np.pi / 2)
)


def benchmark_models():
    """The three models of the oracle benchmark: ``{id: (mesh, symmetric)}``."""
    return {
        "bracket": (bracket_model(), False),
        "cross": (cross_model(), True),
        "wedge": (wedge_model(), False),
    }
