import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invrender.lighting import (
    EnvironmentMap, build_table, env_eval, env_pdf, env_sample, env_texel_footprint, evening_sky, morning_sky, sky,
)

unit = st.tuples(st.floats(0.0, math.pi), st.floats(-math.pi, math.pi)).map(
    lambda a: np.array([math.sin(a[0]) * math.cos(a[1]), math.cos(a[0]), math.sin(a[0]) * math.sin(a[1])]))


def _uv(d):
    u = (math.atan2(d[2], d[0]) + math.pi) / (2 * math.pi)
    v = math.acos(min(max(d[1], -1.0), 1.0)) / math.pi
    return u % 1.0, v


def _bilinear(rad, u, v):
    """Direct bilinear formula: horizontal wrap, vertical clamp."""
    h, w = rad.shape[:2]
    x = u * w - 0.5
    y = min(max(v * h - 0.5, 0.0), h - 1.0)
    i0 = math.floor(x)
    j0 = math.floor(y)
    fx, fy = x - i0, y - j0
    j1 = min(j0 + 1, h - 1)
    i0w, i1w = i0 % w, (i0 + 1) % w
    return ((1 - fx) * (1 - fy) * rad[j0, i0w] + fx * (1 - fy) * rad[j0, i1w]
            + (1 - fx) * fy * rad[j1, i0w] + fx * fy * rad[j1, i1w])


def _texel_of(d, h, w):
    u, v = _uv(d)
    return min(int(v * h), h - 1), min(int(u * w), w - 1)


RNG_ENV = np.random.default_rng(11).uniform(0.0, 2.0, (8, 16, 3))


def test_constant_map_any_direction():
    env = EnvironmentMap.constant(0.7, 8, 16)
    for d in np.random.default_rng(0).normal(size=(50, 3)):
        np.testing.assert_allclose(env_eval(env, d / np.linalg.norm(d)), 0.7, rtol=1e-15)


def test_up_direction_reads_top_row():
    rad = np.zeros((4, 8, 3))
    rad[0] = 3.0
    rad[1:] = 1.0
    np.testing.assert_allclose(env_eval(EnvironmentMap(rad), np.array([0.0, 1.0, 0.0])), 3.0)


@given(unit)
@settings(max_examples=300)
def test_eval_matches_direct_bilinear(d):
    env = EnvironmentMap(RNG_ENV)
    u, v = _uv(d)
    np.testing.assert_allclose(env_eval(env, d), _bilinear(RNG_ENV, u, v), rtol=1e-12, atol=1e-12)


def test_eval_is_linear_in_texels():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(2, 8, 16, 3))
    for d in rng.normal(size=(30, 3)):
        d /= np.linalg.norm(d)
        lhs = env_eval(EnvironmentMap(2.0 * a + 3.0 * b), d)
        rhs = 2.0 * env_eval(EnvironmentMap(a), d) + 3.0 * env_eval(EnvironmentMap(b), d)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-13)


def test_invalid_radiance_rejected():
    with pytest.raises(ValueError):
        EnvironmentMap(-np.ones((4, 8, 3)))
    with pytest.raises(ValueError):
        EnvironmentMap(np.full((4, 8, 3), np.nan))


def test_table_marginals_normalised():
    t = build_table(RNG_ENV)
    assert t.marginal_cdf[0] == 0.0 and abs(t.marginal_cdf[-1] - 1.0) < 1e-9
    assert np.abs(t.conditional_cdf[:, -1] - 1.0).max() < 1e-9
    _, omega = __import__("invrender.lighting", fromlist=["texel_solid_angles"]).texel_solid_angles(8, 16)
    assert abs((t.texel_pdf * omega).sum() - 1.0) < 1e-9


def test_constant_map_samples_uniformly():
    env = EnvironmentMap.constant(1.0, 16, 32)
    rng = np.random.default_rng(3)
    for u in rng.random((500, 2)):
        _, pdf, _ = env_sample(env, u)
        assert abs(pdf - 1 / (4 * math.pi)) < 1e-6


def test_black_map_falls_back_to_uniform():
    env = EnvironmentMap(np.zeros((8, 16, 3)))
    for u in np.random.default_rng(4).random((100, 2)):
        d, pdf, rad = env_sample(env, u)
        assert pdf == pytest.approx(1 / (4 * math.pi), rel=1e-12)
        np.testing.assert_array_equal(rad, 0.0)


def test_bright_texel_captures_samples():
    rad = np.full((16, 32, 3), 0.01)
    rad[5, 9] = 1e4
    env = EnvironmentMap(rad)
    rng = np.random.default_rng(5)
    hits = sum(_texel_of(env_sample(env, u)[0], 16, 32) == (5, 9) for u in rng.random((10_000, 2)))
    assert hits >= 9900


@given(st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True))
@settings(max_examples=1000)
def test_sample_pdf_consistency(u1, u2):
    env = EnvironmentMap(RNG_ENV * np.linspace(0.1, 3, 16)[None, :, None])
    d, pdf, rad = env_sample(env, (u1, u2))
    assert abs(np.linalg.norm(d) - 1) < 1e-12
    assert abs(env_pdf(env, d) - pdf) <= 1e-9 * max(1.0, pdf)
    np.testing.assert_array_equal(rad, env_eval(env, d))


def _quadrature_integral(rad, sub=16):
    """Midpoint rule in (phi, cos theta) of the bilinear radiance: exact measure, fine grid."""
    h, w = rad.shape[:2]
    nu, nz = w * sub, h * sub * 2
    total = np.zeros(3)
    us = (np.arange(nu) + 0.5) / nu
    zs = 1 - 2 * (np.arange(nz) + 0.5) / nz
    dw = (2 * math.pi / nu) * (2.0 / nz)
    for z in zs:
        v = math.acos(z) / math.pi
        for u in us:
            total += _bilinear(rad, u, v)
    return total * dw


def test_mc_estimate_matches_quadrature():
    rad = sky(8, 16, sun_strength=3.0, sun_size=0.4)
    env = EnvironmentMap(rad)
    ref = _quadrature_integral(rad, 6)
    rng = np.random.default_rng(6)
    vals = np.array([(lambda s: s[2] / s[1])(env_sample(env, u)) for u in rng.random((100_000, 2))])
    mean = vals.mean(0)
    se = vals.std(0) / math.sqrt(len(vals))
    assert (np.abs(mean - ref) <= 3 * se + 1e-3 * np.abs(ref)).all()


def test_rebuild_keeps_eval_and_normalisation():
    env = EnvironmentMap(RNG_ENV.copy())
    d = np.array([0.3, 0.5, -0.8]) / np.linalg.norm([0.3, 0.5, -0.8])
    before = env_eval(env, d)
    env.radiance *= 1.7
    env.rebuild()
    np.testing.assert_allclose(env_eval(env, d), 1.7 * before, rtol=1e-14)
    assert abs(env.table.marginal_cdf[-1] - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# footprints


def test_footprint_at_texel_centre():
    h, w = 8, 16
    u, v = (3 + 0.5) / w, (2 + 0.5) / h
    phi, th = 2 * math.pi * u - math.pi, math.pi * v
    d = np.array([math.sin(th) * math.cos(phi), math.cos(th), math.sin(th) * math.sin(phi)])
    ij, wt = env_texel_footprint(EnvironmentMap(RNG_ENV), d)
    k = int(np.argmax(wt))
    assert wt[k] == pytest.approx(1.0, abs=1e-12)
    assert tuple(ij[k]) == (3, 2)


def test_footprint_wraps_at_seam():
    h, w = 8, 16
    u, v = 1e-4, (4 + 0.5) / h
    phi, th = 2 * math.pi * u - math.pi, math.pi * v
    d = np.array([math.sin(th) * math.cos(phi), math.cos(th), math.sin(th) * math.sin(phi)])
    ij, wt = env_texel_footprint(EnvironmentMap(RNG_ENV), d)
    cols = {int(i) for (i, j), x in zip(ij, wt) if x > 0}
    assert cols == {w - 1, 0}


@given(unit)
@settings(max_examples=300)
def test_footprint_matches_direct_formula(d):
    env = EnvironmentMap(RNG_ENV)
    ij, wt = env_texel_footprint(env, d)
    assert (wt >= 0).all() and abs(wt.sum() - 1) < 1e-12
    got = sum(x * RNG_ENV[j, i] for (i, j), x in zip(ij, wt))
    u, v = _uv(d)
    np.testing.assert_allclose(got, _bilinear(RNG_ENV, u, v), rtol=1e-12, atol=1e-12)


def test_named_skies_are_valid():
    for f in (morning_sky, evening_sky):
        r = f(16, 32)
        assert r.shape == (16, 32, 3) and np.isfinite(r).all() and (r >= 0).all()
    assert not np.allclose(morning_sky(16, 32), evening_sky(16, 32))
