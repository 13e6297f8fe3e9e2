import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from invrender.geometry import TriangleMesh, vertex_normals
from invrender.primitives import cube, cylinder_strip, grid, merge, uv_sphere
from invrender.uv_atlas import (
    Chart, PackingError, ParameterizationError, angle_distortion, bake_atlas, conformal_energy, is_disk,
    lscm_parameterize, pack_atlas, rasterize_atlas, read_chart_sidecar, segment_charts, texel_footprint,
    write_chart_sidecar,
)


def _whole_chart(mesh):
    return Chart.from_faces(mesh, np.arange(mesh.n_faces))


# ---------------------------------------------------------------------------
# dense oracle: per-triangle Cauchy-Riemann residuals assembled with numpy and
# solved with numpy's least squares (no sparse matrices, no iterative solver)


def _cr_rows(chart):
    nv = len(chart.vertices)
    rows = []
    for tri in chart.local_faces:
        p = chart.positions[tri]
        e1, e2 = p[1] - p[0], p[2] - p[0]
        x = e1 / np.linalg.norm(e1)
        n = np.cross(e1, e2)
        area = 0.5 * np.linalg.norm(n)
        y = np.cross(n / np.linalg.norm(n), x)
        q = np.array([[0.0, 0.0], [e1 @ x, e1 @ y], [e2 @ x, e2 @ y]])
        # gradient of a linear function from its corner values: solve [q1-q0; q2-q0] g = [f1-f0, f2-f0]
        m_inv = np.linalg.inv(np.array([q[1] - q[0], q[2] - q[0]]))
        grad_of = np.zeros((2, 3))
        grad_of[:, 1] = m_inv[:, 0]
        grad_of[:, 2] = m_inv[:, 1]
        grad_of[:, 0] = -grad_of[:, 1] - grad_of[:, 2]
        s = np.sqrt(2 * area)
        r1 = np.zeros(2 * nv)  # u_x - v_y
        r2 = np.zeros(2 * nv)  # v_x + u_y
        for k in range(3):
            r1[tri[k]] += s * grad_of[0, k]
            r1[nv + tri[k]] -= s * grad_of[1, k]
            r2[nv + tri[k]] += s * grad_of[0, k]
            r2[tri[k]] += s * grad_of[1, k]
        rows += [r1, r2]
    return np.array(rows)


def _dense_energy(chart, uv):
    a = _cr_rows(chart)
    r = a @ np.concatenate([uv[:, 0], uv[:, 1]])
    return float(r @ r)


def _dense_solve(chart, pins):
    nv = len(chart.vertices)
    a = _cr_rows(chart)
    fixed = [pins[0], pins[1], pins[0] + nv, pins[1] + nv]
    vals = np.array([0.0, 1.0, 0.0, 0.0])
    free = [i for i in range(2 * nv) if i not in fixed]
    x = np.zeros(2 * nv)
    x[fixed] = vals
    sol = np.linalg.lstsq(a[:, free], -a[:, fixed] @ vals, rcond=None)[0]
    x[free] = sol
    return np.stack([x[:nv], x[nv:]], 1)


# ---------------------------------------------------------------------------
# segmentation


def test_disjoint_cubes_give_multiple_charts():
    m = merge(cube((0, 0, 0)), cube((3, 0, 0)))
    charts = segment_charts(m)
    assert len(charts) >= 2
    assert sorted(np.concatenate([c.faces for c in charts]).tolist()) == list(range(m.n_faces))


def test_flat_quad_single_chart():
    assert len(segment_charts(grid(1, 1))) == 1


def test_closed_sphere_is_cut():
    charts = segment_charts(uv_sphere(1.0, 16, 8))
    assert len(charts) >= 2
    assert all(is_disk(c.local_faces) for c in charts)


def test_cone_threshold_splits_cube_faces():
    assert len(segment_charts(cube(), 60.0)) == 6


# ---------------------------------------------------------------------------
# LSCM


def test_planar_chart_is_conformal():
    ch = lscm_parameterize(_whole_chart(grid(5, 4)))
    assert angle_distortion(ch).max() < 1e-6
    assert conformal_energy(ch) < 1e-12


def test_pins_exact():
    ch = lscm_parameterize(_whole_chart(cylinder_strip()))
    np.testing.assert_array_equal(ch.uv[ch.pins[0]], [0.0, 0.0])
    np.testing.assert_array_equal(np.abs(ch.uv[ch.pins[1]]), [1.0, 0.0])


def test_quarter_cylinder_distortion_and_dense_oracle():
    ch = lscm_parameterize(_whole_chart(cylinder_strip()))
    assert angle_distortion(ch).mean() < 1e-2
    assert (ch.signed_areas() > 0).all()
    # the two energy formulations agree on the same coordinates
    assert conformal_energy(ch) == pytest.approx(_dense_energy(ch, ch.uv), abs=1e-12)
    # and the iterative solution reaches the dense optimum
    ref = _dense_solve(ch, ch.pins)
    assert abs(conformal_energy(ch) - _dense_energy(ch, ref)) < 1e-6


def test_local_optimality():
    ch = lscm_parameterize(_whole_chart(cylinder_strip(n_around=8, n_along=3)))
    e0 = conformal_energy(ch)
    rng = np.random.default_rng(0)
    free = np.setdiff1d(np.arange(len(ch.vertices)), ch.pins)
    for _ in range(50):
        uv = ch.uv.copy()
        uv[free] += rng.normal(scale=1e-3, size=(len(free), 2))
        assert conformal_energy(ch, uv) >= e0


def test_degenerate_chart_raises():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    mesh = TriangleMesh(v, np.array([[0, 1, 2]]), np.tile([0, 0, 1.0], (3, 1)))
    with pytest.raises(ParameterizationError, match="chart"):
        lscm_parameterize(_whole_chart(mesh))


def test_sphere_charts_have_no_flips(atlased_sphere):
    charts = segment_charts(uv_sphere(1.0, 24, 12))
    for c in charts:
        lscm_parameterize(c)
        assert (c.signed_areas() > 0).all()


# ---------------------------------------------------------------------------
# packing


def _box_gap(a, b):
    gx = max(b[0] - a[2], a[0] - b[2])
    gy = max(b[1] - a[3], a[1] - b[3])
    return max(gx, gy)


def test_single_chart_fills_atlas():
    ch = lscm_parameterize(_whole_chart(grid(2, 2)))
    at = pack_atlas([ch], 64, 2)
    x0, y0, x1, y1 = at.boxes[0]
    assert (x0, y0) == (2, 2)
    assert max(x1, y1) == 62


def test_two_identical_charts():
    a = lscm_parameterize(_whole_chart(grid(2, 2)))
    b = lscm_parameterize(_whole_chart(grid(2, 2)))
    at = pack_atlas([a, b], 128, 2)
    s = at.boxes[:, 2:] - at.boxes[:, :2]
    assert np.abs(s[0] - s[1]).max() <= 1
    assert _box_gap(at.boxes[0], at.boxes[1]) >= 2


def test_twenty_random_charts_separated():
    rng = np.random.default_rng(7)
    charts = []
    for k in range(20):
        g = grid(int(rng.integers(1, 4)), int(rng.integers(1, 4)), float(rng.uniform(0.2, 2.0)))
        charts.append(lscm_parameterize(_whole_chart(g)))
    at = pack_atlas(charts, 256, 2)
    for i in range(20):
        assert at.boxes[i, 0] >= 2 and at.boxes[i, 1] >= 2
        assert at.boxes[i, 2] <= 254 and at.boxes[i, 3] <= 254
        for j in range(i + 1, 20):
            assert _box_gap(at.boxes[i], at.boxes[j]) >= 2


def test_packing_error_when_too_small():
    charts = [lscm_parameterize(_whole_chart(grid(1, 1))) for _ in range(50)]
    with pytest.raises(PackingError, match="resolution"):
        pack_atlas(charts, 8, 2)


def test_baked_uvs_in_unit_square_and_charts_complete(atlased_sphere):
    m = atlased_sphere
    assert m.uvs.min() >= 0 and m.uvs.max() <= 1
    assert (m.chart_ids >= 0).all()


def test_atlas_round_trip_chart_membership():
    mesh, atlas = bake_atlas(uv_sphere(1.0, 16, 8), 128, 2)
    owner = atlas.texel_chart_map()
    rng = np.random.default_rng(1)
    for f in rng.choice(mesh.n_faces, 200):
        b = rng.dirichlet([1, 1, 1])
        uv = b @ mesh.uvs[f]
        ij, w = texel_footprint(atlas, uv)
        for (i, j), wk in zip(ij, w):
            if wk > 0:
                assert owner[j, i] == mesh.chart_ids[f]


def test_sidecar_round_trip(tmp_path):
    mesh, atlas = bake_atlas(cube(), 32, 2)
    p = tmp_path / "m.obj"
    write_chart_sidecar(p, atlas, mesh.chart_ids)
    doc = read_chart_sidecar(p)
    assert doc["chart_ids"] == mesh.chart_ids.tolist()
    assert json.loads(json.dumps(doc)) == doc


def test_rasterize_covers_charts():
    mesh, atlas = bake_atlas(cube(), 64, 2)
    tri, bary, _ = rasterize_atlas(mesh, 64, 64)
    hit = tri >= 0
    assert set(mesh.chart_ids[tri[hit]]) == set(range(len(atlas.charts)))
    np.testing.assert_allclose(bary[hit].sum(1), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# footprints


def test_footprint_texel_center():
    ij, w = texel_footprint((2, 2), (0.25, 0.25))
    assert w[0] == 1.0 and tuple(ij[0]) == (0, 0)
    assert w[1:].sum() == 0.0


def test_footprint_symmetric():
    ij, w = texel_footprint((2, 2), (0.5, 0.5))
    np.testing.assert_allclose(w, 0.25)
    assert sorted(map(tuple, ij)) == [(0, 0), (0, 1), (1, 0), (1, 1)]


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_footprint_matches_direct_bilinear(u, v):
    wd, ht = 7, 5
    grid_vals = np.arange(wd * ht, dtype=float).reshape(ht, wd) ** 1.3
    ij, w = texel_footprint((wd, ht), (u, v))
    assert (w >= 0).all() and abs(w.sum() - 1) < 1e-12
    got = sum(wk * grid_vals[j, i] for (i, j), wk in zip(ij, w))
    # direct formula with clamp-to-edge
    x = min(max(u * wd - 0.5, 0.0), wd - 1.0)
    y = min(max(v * ht - 0.5, 0.0), ht - 1.0)
    i0, j0 = int(np.floor(x)), int(np.floor(y))
    i1, j1 = min(i0 + 1, wd - 1), min(j0 + 1, ht - 1)
    fx, fy = x - i0, y - j0
    ref = ((1 - fx) * (1 - fy) * grid_vals[j0, i0] + fx * (1 - fy) * grid_vals[j0, i1]
           + (1 - fx) * fy * grid_vals[j1, i0] + fx * fy * grid_vals[j1, i1])
    assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_out_of_range_uv_is_clamped_and_counted():
    from invrender.uv_atlas import FootprintCounter

    before = FootprintCounter.clamped
    ij, w = texel_footprint((4, 4), (1.5, -0.2))
    assert FootprintCounter.clamped == before + 1
    assert (ij[:, 0] <= 3).all() and (ij[:, 1] >= 0).all()
    assert w.sum() == pytest.approx(1.0)
