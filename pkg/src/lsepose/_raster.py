"""Z-buffer triangle rasterisation kernel.

Pixel ``(x, y)`` samples the image plane at its centre, which sits at integer
coordinates. Shared edges follow a half-plane tie rule so that a pixel centre
lying exactly on an edge between two triangles is written once.
"""
import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _owns_edge(ax, ay, bx, by):
    dy = by - ay
    return dy < 0.0 or (dy == 0.0 and bx - ax > 0.0)


@njit(cache=True)
def rasterize(uv, inv_z, attr, depth, ids, obj, inst, x0, y0):
    """Draw triangles into crop buffers whose pixel (0, 0) is image pixel (x0, y0).

    :param uv: (T, 3, 2) projected vertex coordinates in image pixels.
    :param inv_z: (T, 3) reciprocal camera depths (all vertices in front).
    :param attr: (T, 3, 3) per-vertex object-frame coordinates.
    """
    H, W = depth.shape
    for t in range(uv.shape[0]):
        ax, ay = uv[t, 0, 0], uv[t, 0, 1]
        bx, by = uv[t, 1, 0], uv[t, 1, 1]
        cx, cy = uv[t, 2, 0], uv[t, 2, 1]
        ia, ib, ic = 0, 1, 2
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0 or not np.isfinite(area):
            continue
        if area < 0.0:
            bx, by, cx, cy = cx, cy, bx, by
            ib, ic = 2, 1
            area = -area
        xmin = max(int(np.ceil(min(ax, bx, cx))) - x0, 0)
        xmax = min(int(np.floor(max(ax, bx, cx))) - x0, W - 1)
        ymin = max(int(np.ceil(min(ay, by, cy))) - y0, 0)
        ymax = min(int(np.floor(max(ay, by, cy))) - y0, H - 1)
        if xmin > xmax or ymin > ymax:
            continue
        own_ab = _owns_edge(ax, ay, bx, by)
        own_bc = _owns_edge(bx, by, cx, cy)
        own_ca = _owns_edge(cx, cy, ax, ay)
        za, zb, zc = inv_z[t, ia], inv_z[t, ib], inv_z[t, ic]
        for py in range(ymin, ymax + 1):
            fy = float(py + y0)
            for px in range(xmin, xmax + 1):
                fx = float(px + x0)
                w_c = (bx - ax) * (fy - ay) - (by - ay) * (fx - ax)
                if w_c < 0.0 or (w_c == 0.0 and not own_ab):
                    continue
                w_a = (cx - bx) * (fy - by) - (cy - by) * (fx - bx)
                if w_a < 0.0 or (w_a == 0.0 and not own_bc):
                    continue
                w_b = (ax - cx) * (fy - cy) - (ay - cy) * (fx - cx)
                if w_b < 0.0 or (w_b == 0.0 and not own_ca):
                    continue
                la = w_a / area
                lb = w_b / area
                lc = w_c / area
                iz = la * za + lb * zb + lc * zc
                if iz <= 0.0:
                    continue
                z = 1.0 / iz
                if z < depth[py, px]:
                    depth[py, px] = z
                    ids[py, px] = inst
                    for k in range(3):
                        obj[py, px, k] = z * (la * za * attr[t, ia, k] + lb * zb * attr[t, ib, k]
                                              + lc * zc * attr[t, ic, k])
