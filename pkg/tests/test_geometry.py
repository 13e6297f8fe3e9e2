import numpy as np
import pytest
from hypothesis import given, strategies as st

from invrender.geometry import (
    DegenerateMeshError, MeshFormatError, Ray, TriangleMesh, _brute_many, build_and_intersect,
    degenerate_faces, load_mesh, save_obj, shading_frame, vertex_normals,
)
from invrender.primitives import uv_sphere

from conftest import CUBE_OBJ, cube_obj


def test_cube_loads_without_removals(cube_path):
    m = load_mesh(cube_path)
    assert m.n_faces == 12
    assert m.report.removed_faces == 0
    assert m.n_components == 1


def test_repeated_index_face_is_dissolved(tmp_path):
    p = tmp_path / "c.obj"
    p.write_text(CUBE_OBJ + "f 1 1 2\n")
    m = load_mesh(p)
    assert m.n_faces == 12
    assert m.report.removed_faces == 1


def test_two_disjoint_cubes(tmp_path):
    a = cube_obj()
    b = cube_obj((3.0, 0.0, 0.0))
    nv = 8
    b_lines = []
    for line in b.splitlines():
        if line.startswith("f "):
            b_lines.append("f " + " ".join(str(int(x) + nv) for x in line.split()[1:]))
        else:
            b_lines.append(line)
    # vertices first, then faces, to keep OBJ indices valid
    text = "\n".join([l for l in a.splitlines() if l.startswith("v ")]
                     + [l for l in b_lines if l.startswith("v ")]
                     + [l for l in a.splitlines() if l.startswith("f ")]
                     + [l for l in b_lines if l.startswith("f ")]) + "\n"
    p = tmp_path / "two.obj"
    p.write_text(text)
    m = load_mesh(p)
    assert m.n_faces == 24
    assert m.report.components == 2


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(MeshFormatError) as exc:
        load_mesh(p)
    assert exc.value.lineno == 4


def test_all_degenerate_raises(tmp_path):
    p = tmp_path / "deg.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n")
    with pytest.raises(DegenerateMeshError):
        load_mesh(p)


def test_quad_fan_triangulated(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert load_mesh(p).n_faces == 2


def test_zero_area_is_scale_relative():
    v = np.array([[0, 0, 0], [1e-3, 0, 0], [0, 1e-3, 0], [0, 0, 0], [1, 0, 0], [2, 1e-13, 0]], dtype=float)
    f = np.array([[0, 1, 2], [3, 4, 5]])
    assert degenerate_faces(v, f).tolist() == [False, True]


def test_cleanup_idempotent_roundtrip(tmp_path, cube_path):
    m = load_mesh(cube_path)
    out = tmp_path / "again.obj"
    save_obj(m, out)
    m2 = load_mesh(out)
    assert m2.n_faces == m.n_faces
    assert m2.report.removed_faces == 0
    np.testing.assert_array_equal(m2.vertices, m.vertices)


def test_normals_are_unit(cube_path):
    m = load_mesh(cube_path)
    assert np.abs(np.linalg.norm(m.normals, axis=1) - 1).max() < 1e-6


def _single_triangle():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    f = np.array([[0, 1, 2]])
    return TriangleMesh(v, f, np.tile([0.0, 0.0, 1.0], (3, 1)))


def test_ray_triangle_hit():
    hit = build_and_intersect(_single_triangle(), Ray((0.25, 0.25, -1), (0, 0, 1)))
    assert hit is not None
    assert hit.t == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(hit.barycentric, [0.5, 0.25, 0.25], atol=1e-12)
    n, t, b = shading_frame(hit)
    np.testing.assert_allclose(n, [0, 0, 1], atol=1e-12)


def test_ray_pointing_away_misses():
    assert build_and_intersect(_single_triangle(), Ray((0.25, 0.25, -1), (0, 0, -1))) is None


def test_ray_requires_ordered_bounds():
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (0, 0, 1), t_min=2.0, t_max=1.0)


def test_bvh_matches_brute_force_on_soup():
    rng = np.random.default_rng(3)
    n = 10_000
    centers = rng.uniform(-1, 1, (n, 1, 3))
    tri = centers + rng.normal(scale=0.04, size=(n, 3, 3))
    v = tri.reshape(-1, 3)
    f = np.arange(3 * n).reshape(n, 3)
    mesh = TriangleMesh(v, f, vertex_normals(v, f))
    o = rng.uniform(-2, 2, (n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tri_bvh, t_bvh, _ = mesh.bvh.closest(o, d)
    tri_bf, t_bf = _brute_many(mesh.bvh.arrays, o, d, 0.0, np.inf)
    assert (tri_bvh >= 0).sum() > 1000
    np.testing.assert_array_equal(tri_bvh, tri_bf)
    hit = tri_bf >= 0
    np.testing.assert_array_equal(t_bvh[hit], t_bf[hit])


def test_pole_hit_normal_matches_sphere():
    mesh = uv_sphere(1.0, 32, 16)
    hit = build_and_intersect(mesh, Ray((0.001, 3.0, 0.002), (0, -1, 0)))
    n, _, _ = shading_frame(hit)
    p = hit.position / np.linalg.norm(hit.position)
    assert np.linalg.norm(n - p) < 1e-3


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_frame_orthonormal_right_handed(x, y, z):
    mesh = uv_sphere(1.0, 16, 8)
    d = np.array([x, y, z])
    if np.linalg.norm(d) < 1e-3:
        d = np.array([0.0, 0.0, 1.0])
    d = d / np.linalg.norm(d)
    hit = build_and_intersect(mesh, Ray(-3 * d, d))
    assert hit is not None
    assert hit.t >= 0
    assert abs(hit.barycentric.sum() - 1) < 1e-6 and (hit.barycentric >= -1e-12).all()
    n, t, b = shading_frame(hit)
    for a in (n, t, b):
        assert abs(np.linalg.norm(a) - 1) < 1e-6
    assert abs(n @ t) < 1e-6 and abs(n @ b) < 1e-6 and abs(t @ b) < 1e-6
    np.testing.assert_allclose(np.cross(t, b), n, atol=1e-6)
    assert n @ hit.geometric_normal >= 0


def test_shading_frame_falls_back_to_geometric_normal():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    normals = np.array([[0, 0, 1.0], [0, 0, -1.0], [0, 0, 0.0]])
    mesh = TriangleMesh(v, np.array([[0, 1, 2]]), normals)
    hit = build_and_intersect(mesh, Ray((0.5, 0.0, -1), (0, 0, 1)))
    # barycentrics (0.5, 0.5, 0): interpolated normal cancels exactly
    n, _, _ = shading_frame(hit)
    np.testing.assert_allclose(n, hit.geometric_normal)
