import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lsepose.errors import FormatError
from lsepose.mesh_geom import SurfaceMesh
from lsepose.primitives import box, uv_sphere
from lsepose.projective import (
    CameraIntrinsics, Pose, SceneMaps, backproject, iou, mask_of, project, read_depth, read_mask, render,
    write_depth, write_mask,
)

CAM = CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
# unit focal scale: image coordinates of a vertex at z = 1 are exactly 64 * (x, y)
GRID = CameraIntrinsics(64.0, 64.0, 0.0, 0.0, 64, 48)


def flat(points_px, z=1.0):
    """Triangles given in GRID pixel coordinates at constant depth."""
    v = np.array([[u / 64.0 * z, w / 64.0 * z, z] for u, w in points_px])
    return v


def test_project_examples():
    cam = CameraIntrinsics(100.0, 100.0, 320.0, 240.0, 640, 480)
    assert np.array_equal(project([0, 0, 1.0], cam), [320, 240])
    assert project([1.0, 0, 2.0], cam)[0] == 370
    with pytest.raises(ValueError):
        project([0, 0, -1.0], cam)


def test_backproject_inverts_project():
    rng = np.random.default_rng(0)
    P = rng.uniform([-100, -100, 300], [100, 100, 900], (50, 3))
    assert np.allclose(backproject(project(P, CAM), P[:, 2], CAM), P, rtol=1e-12)


def test_pose_algebra():
    a = Pose.from_rotvec([0.1, -0.2, 0.3], [1, 2, 3])
    b = Pose.from_rotvec([-0.4, 0.1, 0.2], [-3, 0, 5])
    p = np.random.default_rng(1).normal(size=(10, 3))
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)))
    assert np.allclose(a.inverse().apply(a.apply(p)), p)
    assert Pose.from_record(a.to_record()) == a
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_constant_depth_plane():
    mesh = SurfaceMesh(flat([(5, 5), (40, 8), (12, 30)], z=2.5), [[0, 1, 2]])
    maps = render(mesh, Pose.identity(), GRID)
    covered = np.isfinite(maps.depth)
    assert covered.sum() > 100
    assert np.all(np.abs(maps.depth[covered] - 2.5) < 1e-6)


def test_z_buffer_keeps_nearer_instance():
    near = SurfaceMesh(flat([(0, 0), (40, 0), (0, 40)], z=1.0), [[0, 1, 2]])
    far = SurfaceMesh(flat([(10, 10), (60, 10), (10, 45)], z=2.0), [[0, 1, 2]])
    for order in ((near, 1, far, 2), (far, 2, near, 1)):
        maps = render(order[0], Pose.identity(), GRID, order[1])
        maps = render(order[2], Pose.identity(), GRID, order[3], target=maps)
        overlap = np.zeros(GRID.shape, bool)
        overlap[10:31, 10:31] = True
        overlap &= np.add.outer(np.arange(48), np.arange(64)) < 40
        assert np.all(np.abs(maps.depth[overlap] - 1.0) < 1e-12) and np.all(maps.ids[overlap] == 1)


def test_shared_edges_written_once():
    # square with integer corners split along a diagonal that passes through pixel centres
    sq = flat([(10, 10), (20, 10), (20, 20), (10, 20)])
    a = render(SurfaceMesh(sq, [[0, 1, 2]]), Pose.identity(), GRID)
    b = render(SurfaceMesh(sq, [[0, 2, 3]]), Pose.identity(), GRID)
    both = render(SurfaceMesh(sq, [[0, 1, 2], [0, 2, 3]]), Pose.identity(), GRID)
    ma, mb = np.isfinite(a.depth), np.isfinite(b.depth)
    assert not (ma & mb).any()
    assert np.array_equal(ma | mb, np.isfinite(both.depth))
    assert np.isfinite(both.depth).sum() == 100
    # the same square tiled by a neighbour leaves no gaps and no overlaps
    right = render(SurfaceMesh(flat([(20, 10), (30, 10), (30, 20), (20, 20)]), [[0, 1, 2], [0, 2, 3]]),
                   Pose.identity(), GRID)
    assert not (np.isfinite(right.depth) & np.isfinite(both.depth)).any()


def test_sphere_depth_matches_ray_intersection():
    r = 50.0
    mesh = uv_sphere(r, 48, 96)
    rng = np.random.default_rng(2)
    for _ in range(3):
        c = np.array([rng.uniform(-60, 60), rng.uniform(-40, 40), rng.uniform(400, 700)])
        pose = Pose(Rotation.random(random_state=rng).as_matrix(), c)
        maps = render(mesh, pose, CAM)
        ys, xs = np.nonzero(np.isfinite(maps.depth))
        d = np.column_stack([(xs - CAM.cx) / CAM.fx, (ys - CAM.cy) / CAM.fy, np.ones(len(xs))])
        dn = d / np.linalg.norm(d, axis=1, keepdims=True)
        b = dn @ c
        disc = b * b - (c @ c - r * r)
        ok = disc >= 0
        s = b - np.sqrt(np.where(ok, disc, 0))
        z_true = s * dn[:, 2]
        good = ok & (np.abs(maps.depth[ys, xs] - z_true) <= 0.01 * r)
        assert good.mean() >= 0.99


def test_object_points_reproject_to_their_pixel():
    mesh = box((80.0, 60.0, 40.0))
    pose = Pose.from_rotvec([0.4, -0.3, 0.9], [10, -5, 500])
    maps = render(mesh, pose, CAM)
    ys, xs = np.nonzero(maps.ids == 1)
    uv = project(pose.apply(maps.object_points[ys, xs]), CAM)
    assert np.all(np.linalg.norm(uv - np.column_stack([xs, ys]), axis=1) < 1.0)


def test_masks_and_determinism():
    a, b = box((60, 60, 60)), uv_sphere(30.0)
    pa = Pose.from_rotvec([0.3, 0.2, 0.1], [-40, 0, 500])
    pb = Pose.from_rotvec([0, 0, 0], [30, 10, 520])
    one = render(a, pa, CAM, 1)
    assert not mask_of(one, 7).any()
    assert np.array_equal(mask_of(one, 1), np.isfinite(one.depth))
    two = render(b, pb, CAM, 2, target=one)
    m1, m2 = mask_of(two, 1), mask_of(two, 2)
    assert not (m1 & m2).any() and np.array_equal(m1 | m2, np.isfinite(two.depth))
    again = render(b, pb, CAM, 2, target=render(a, pa, CAM, 1))
    assert np.array_equal(again.depth, two.depth) and np.array_equal(again.ids, two.ids)
    assert np.array_equal(again.object_points, two.object_points, equal_nan=True)
    assert np.isfinite(one.depth).sum() == np.isfinite(render(a, pa, CAM, 1).depth).sum()
    with pytest.raises(ValueError):
        mask_of(one, 0)


@pytest.mark.parametrize("mesh", [box((70, 50, 40)), uv_sphere(40.0, 16, 32)], ids=["box", "sphere"])
def test_coverage_stable_under_subdivision(mesh):
    pose = Pose.from_rotvec([0.5, 0.4, -0.2], [0, 0, 450])
    n0 = np.isfinite(render(mesh, pose, CAM).depth).sum()
    n1 = np.isfinite(render(mesh.subdivided(), pose, CAM).depth).sum()
    assert abs(n1 - n0) < 0.02 * n0


def test_iou_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    b = np.zeros((4, 4), bool)
    b[2:] = True
    half = np.zeros((4, 4), bool)
    half[0] = True
    assert iou(a, a) == 1.0 and iou(a, b) == 0.0 and iou(half, a) == 0.5
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0


def test_near_plane_clipping():
    # a quad reaching behind the camera still renders its visible part
    quad = SurfaceMesh([[-1, -1, -1.0], [1, -1, -1.0], [1, 1, 3.0], [-1, 1, 3.0]], [[0, 1, 2], [0, 2, 3]])
    maps = render(quad, Pose.identity(), CAM)
    fin = np.isfinite(maps.depth)
    assert fin.any() and np.all(maps.depth[fin] > 0)


def test_depth_and_mask_files(tmp_path):
    d = np.full((6, 8), np.inf, np.float32)
    d[2:4, 3:6] = 1.25
    write_depth(tmp_path / "d.dpth", d)
    assert np.array_equal(read_depth(tmp_path / "d.dpth"), d)
    (tmp_path / "bad.dpth").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        read_depth(tmp_path / "bad.dpth")
    (tmp_path / "short.dpth").write_bytes((tmp_path / "d.dpth").read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_depth(tmp_path / "short.dpth")
    m = np.isfinite(d)
    write_mask(tmp_path / "m.png", m, 3)
    back, k = read_mask(tmp_path / "m.png")
    assert k == 3 and np.array_equal(back, m)
    assert isinstance(SceneMaps.empty(CAM).shape, tuple)
