import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ray_triangle_depth
from pcofmod.errors import InvalidArgumentError
from pcofmod.pose import Pose6D, rot_x, rot_y, rot_z
from pcofmod.render import (
    CameraIntrinsics, TriangleMesh, backproject, backproject_pixels, depth_to_png_array, normals_from_depth,
    project, render_depth,
)

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def plane_triangle(z, size=200.0, facing=True):
    v = np.array([[-size, -size, z], [size, -size, z], [0.0, size, z]])
    f = np.array([[0, 2, 1]] if facing else [[0, 1, 2]])
    return TriangleMesh(v, f)


def test_fronto_parallel_triangle_centre():
    d = render_depth(plane_triangle(900.0), Pose6D.identity(), K)
    assert d[240, 320] == pytest.approx(900.0)


def test_empty_footprint_is_all_missing():
    behind = plane_triangle(-500.0)
    off = TriangleMesh(np.array([[5000.0, 0, 900], [5100.0, 0, 900], [5000.0, 100, 900]]), np.array([[0, 2, 1]]))
    for mesh in (behind, off):
        assert not render_depth(mesh, Pose6D.identity(), K).any()


def test_zbuffer_keeps_nearest():
    a, b = plane_triangle(800.0), plane_triangle(900.0)
    mesh = TriangleMesh(np.vstack([b.vertices, a.vertices]), np.vstack([b.faces, a.faces + 3]))
    d = render_depth(mesh, Pose6D.identity(), K)
    assert d[240, 320] == pytest.approx(800.0)
    assert set(np.unique(d[d > 0]).round(3).tolist()) == {800.0}


def test_backfaces_are_culled():
    d = render_depth(plane_triangle(900.0, facing=False), Pose6D.identity(), K)
    assert not d.any()
    d = render_depth(plane_triangle(900.0, facing=False), Pose6D.identity(), K, cull_backfaces=False)
    assert d[240, 320] == pytest.approx(900.0)


def test_window_render_matches_full_render():
    mesh = plane_triangle(700.0)
    full = render_depth(mesh, Pose6D.identity(), K)
    win = render_depth(mesh, Pose6D.identity(), K, window=(100, 50, 300, 200))
    np.testing.assert_array_equal(win, full[50:250, 100:400])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_rasterizer_matches_ray_caster(seed):
    rng = np.random.default_rng(seed)
    tri = np.column_stack([rng.uniform(-150, 150, 3), rng.uniform(-150, 150, 3), rng.uniform(500, 1200, 3)])
    mesh = TriangleMesh(tri, np.array([[0, 1, 2]]))
    d = render_depth(mesh, Pose6D.identity(), K, cull_backfaces=False)
    rows, cols = np.nonzero(d)
    pick = rng.choice(len(rows), size=min(len(rows), 40), replace=False) if len(rows) else []
    for i in pick:
        z = ray_triangle_depth(tri, cols[i] + 0.5, rows[i] + 0.5, K)
        assert z is not None
        assert abs(z - d[rows[i], cols[i]]) < 0.5


def test_render_is_equivariant(toy_mesh):
    pose = Pose6D(rot_x(20) @ rot_y(-15), np.array([10.0, -5.0, 700.0]))
    G = Pose6D(rot_z(33) @ rot_x(12), np.array([4.0, 7.0, -3.0]))
    moved = TriangleMesh(G.inverse().apply(toy_mesh.vertices), toy_mesh.faces)
    a = render_depth(toy_mesh, pose, K)
    b = render_depth(moved, pose @ G, K)
    assert np.array_equal(a > 0, b > 0)
    np.testing.assert_allclose(a, b, atol=1e-3)


def test_render_is_deterministic(toy_mesh):
    pose = Pose6D(rot_x(30), np.array([0.0, 0.0, 650.0]))
    assert render_depth(toy_mesh, pose, K).tobytes() == render_depth(toy_mesh, pose, K).tobytes()


def test_backproject_examples():
    d = np.zeros((480, 640), np.float32)
    d[240, 320] = 900.0
    np.testing.assert_allclose(backproject_pixels(320.0, 240.0, 900.0, K), [0, 0, 900])
    np.testing.assert_allclose(backproject_pixels(320.0 + 500.0, 240.0, 1000.0, K), [1000, 0, 1000])
    pts = backproject(d, K)
    assert pts.shape == (1, 3)
    np.testing.assert_allclose(pts[0], [0.5 * 900 / 500, 0.5 * 900 / 500, 900])


def test_missing_pixels_yield_no_points():
    assert backproject(np.zeros((10, 10)), K).shape == (0, 3)


@settings(max_examples=100, deadline=None)
@given(u=st.floats(0, 640), v=st.floats(0, 480), z=st.floats(1, 65535))
def test_project_backproject_roundtrip(u, v, z):
    uv = project(backproject_pixels(u, v, z, K), K)
    np.testing.assert_allclose(uv, [u, v], atol=1e-6)


def _ramp_depth(z0, a, K, shape=(60, 80)):
    # plane z = z0 + a * X in camera coordinates, sampled at pixel centres
    h, w = shape
    u = (np.arange(w) + 0.5 - K.cx) / K.fx
    z = z0 / (1.0 - a * u)
    return np.tile(z, (h, 1))


def test_fronto_parallel_normals():
    Ks = CameraIntrinsics(500.0, 500.0, 40.0, 30.0, 80, 60)
    n = normals_from_depth(np.full((60, 80), 900.0), Ks)
    np.testing.assert_allclose(n.reshape(-1, 3), np.tile([0.0, 0.0, -1.0], (60 * 80, 1)), atol=1e-6)


@pytest.mark.parametrize("a", [0.2, -0.5, 0.577])
def test_ramp_normals_match_analytic_plane(a):
    Ks = CameraIntrinsics(500.0, 500.0, 40.0, 30.0, 80, 60)
    n = normals_from_depth(_ramp_depth(800.0, a, Ks), Ks, max_jump=1e9)
    expect = np.array([a, 0.0, -1.0]) / np.hypot(a, 1.0)
    np.testing.assert_allclose(n.reshape(-1, 3), np.tile(expect, (60 * 80, 1)), atol=1e-3)
    np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-6)


def test_isolated_pixel_has_no_normal():
    d = np.zeros((9, 9))
    d[4, 4] = 900.0
    n = normals_from_depth(d, CameraIntrinsics(500.0, 500.0, 4.0, 4.0, 9, 9))
    assert np.isnan(n).all()


def test_normals_do_not_bleed_across_jumps():
    Ks = CameraIntrinsics(500.0, 500.0, 20.0, 10.0, 40, 20)
    d = np.full((20, 40), 900.0)
    d[:, 20:] = 1000.0
    n = normals_from_depth(d, Ks)
    np.testing.assert_allclose(n[:, 18:22].reshape(-1, 3), np.tile([0, 0, -1.0], (80, 1)), atol=1e-6)


def test_normal_window_validation():
    with pytest.raises(InvalidArgumentError):
        normals_from_depth(np.ones((5, 5)), K, window=4)


@pytest.mark.parametrize("args", [(0.0, 1.0, 1.0, 1.0, 4, 4), (1.0, 1.0, 4.0, 1.0, 4, 4), (1.0, 1.0, 1.0, -1.0, 4, 4)])
def test_intrinsics_validation(args):
    with pytest.raises(InvalidArgumentError):
        CameraIntrinsics(*args)


def test_intrinsics_pyramid_levels():
    sizes = [(K.at_level(k).width, K.at_level(k).height) for k in range(4)]
    assert sizes == [(640, 480), (320, 240), (160, 120), (80, 60)]


def test_depth_png_conversion_clamps_and_rounds():
    out = depth_to_png_array(np.array([[0.0, 899.6, 70000.0, -3.0]]))
    assert out.dtype == np.uint16
    assert out.tolist() == [[0, 900, 65535, 0]]


def test_mesh_validation():
    with pytest.raises(InvalidArgumentError):
        TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    with pytest.raises(InvalidArgumentError):
        TriangleMesh(np.array([[0, 0, np.inf], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


def test_diameter_of_cube():
    from pcofmod.meshes import box

    assert box(10.0, 20.0, 20.0).diameter() == pytest.approx(30.0)
