import math

import numba
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invrender.geometry import frame_from_normal
from invrender.reflectance import (
    ALPHA_MIN, BrdfParams, brdf_eval, brdf_param_derivatives, brdf_pdf, brdf_sample, eval_brdf, pdf_brdf,
    sample_brdf,
)

N = np.array([0.0, 0.0, 1.0])
FRAME = (N,) + tuple(frame_from_normal(N))


def _dir(theta, phi):
    return np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])


upper = st.tuples(st.floats(0.0, math.pi / 2 - 1e-3), st.floats(0.0, 2 * math.pi)).map(lambda a: _dir(*a))
anydir = st.tuples(st.floats(0.0, math.pi), st.floats(0.0, 2 * math.pi)).map(lambda a: _dir(*a))
rgb = st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)).map(np.array)
params = st.builds(BrdfParams, rgb, rgb, st.floats(ALPHA_MIN, 1.0))


# independent scalar formulas used as the oracle
def _ref_brdf(rho, f0, alpha, wi, wo):
    ci, co = wi[2], wo[2]
    if ci <= 0 or co <= 0:
        return np.zeros(3)
    h = (wi + wo) / np.linalg.norm(wi + wo)
    e = 2 / alpha ** 2 - 2
    d = (e + 2) / (2 * math.pi) * h[2] ** e
    k = alpha ** 2 / 2
    g = ci / (ci * (1 - k) + k) * co / (co * (1 - k) + k)
    s = (1 - h @ wi) ** 5
    f = f0 + (1 - f0) * s
    return rho / math.pi + d * f * g / (4 * ci * co)


def test_lambertian_only_when_f0_zero():
    p = BrdfParams((0.6, 0.3, 0.1), 0.0, 0.5)
    for wi, wo in [(_dir(0.2, 0.1), _dir(1.3, 2.0)), (_dir(1.5, 0.0), _dir(1.5, math.pi)), (N, N)]:
        np.testing.assert_allclose(eval_brdf(p, wi, wo, FRAME), [0.19099, 0.09549, 0.03183], atol=5e-6)
        np.testing.assert_allclose(eval_brdf(p, wi, wo, FRAME), np.array([0.6, 0.3, 0.1]) / math.pi, rtol=1e-15)


def test_below_horizon_is_zero():
    p = BrdfParams(0.5, 0.5, 0.3)
    np.testing.assert_array_equal(eval_brdf(p, _dir(2.0, 0.0), N, FRAME), 0.0)
    np.testing.assert_array_equal(eval_brdf(p, N, _dir(1.6, 1.0), FRAME), 0.0)


def test_normal_incidence_matches_scalar_formula():
    p = BrdfParams(0.0, 0.04, 0.5)
    e = 2 / 0.25 - 2
    ref = (e + 2) / (2 * math.pi) * 0.04 * 1.0 / 4.0
    np.testing.assert_allclose(eval_brdf(p, N, N, FRAME), ref, rtol=1e-14)


@given(params.filter(lambda p: p.f0.min() >= 0.02), upper, upper)
@settings(max_examples=200)
def test_matches_independent_formula(p, wi, wo):
    np.testing.assert_allclose(eval_brdf(p, wi, wo, FRAME), _ref_brdf(p.rho, p.f0, p.alpha, wi, wo),
                               rtol=1e-10, atol=1e-12)


@given(params, anydir, anydir)
@settings(max_examples=1000)
def test_reciprocity_and_non_negativity(p, wi, wo):
    a = eval_brdf(p, wi, wo, FRAME)
    b = eval_brdf(p, wo, wi, FRAME)
    assert np.isfinite(a).all() and (a >= 0).all()
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


@given(rgb, rgb, st.floats(0.0, 1e-6), st.floats(0.0, 2 * math.pi))
@settings(max_examples=1000)
def test_finite_at_grazing_and_min_roughness(rho, f0, grazing, phi):
    p = BrdfParams(rho, f0, ALPHA_MIN)
    wi = _dir(math.pi / 2 - grazing, phi)
    wo = _dir(math.pi / 2 - grazing, phi + 0.3)
    v = eval_brdf(p, wi, wo, FRAME)
    assert np.isfinite(v).all() and (v >= 0).all()
    d = brdf_param_derivatives(p, wi, wo, FRAME)
    assert all(np.isfinite(x).all() for x in d)


# ---------------------------------------------------------------------------
# sampling


def test_f0_zero_samples_diffuse_only():
    p = BrdfParams(0.5, 0.0, 0.3)
    rng = np.random.default_rng(0)
    for _ in range(200):
        wi, pdf, val = sample_brdf(p, _dir(0.4, 0.0), FRAME, rng.random(2), rng.random())
        assert pdf == pytest.approx(wi[2] / math.pi, rel=1e-12)


def test_rho_zero_samples_specular_only():
    rho, f0 = np.zeros(3), np.full(3, 0.5)
    wi = np.empty(3)
    t, b = frame_from_normal(N)
    rng = np.random.default_rng(1)
    for _ in range(200):
        _, spec = brdf_sample(rho, f0, 0.3, N, t, b, _dir(0.4, 0.0), rng.random(), rng.random(), rng.random(), wi)
        assert spec


@numba.njit
def _pdf_integral(rho, f0, alpha, wo, n_samples, seed):
    """Integral of the sampling pdf over the sphere, estimated with a defensive
    half-uniform/half-BRDF mixture q so that pdf/q <= 2 (bounded variance).

    If the sampler's true density differed from ``brdf_pdf`` the estimate
    would be biased away from 1, so this checks both normalisation and
    sample/pdf consistency."""
    np.random.seed(seed)
    n = np.array([0.0, 0.0, 1.0])
    t, b = frame_from_normal(n)
    wi = np.empty(3)
    acc = np.empty(n_samples)
    for k in range(n_samples):
        if k % 2 == 0:
            z = 1.0 - 2.0 * np.random.random()
            r = math.sqrt(max(0.0, 1.0 - z * z))
            ph = 2.0 * math.pi * np.random.random()
            wi[0] = r * math.cos(ph)
            wi[1] = r * math.sin(ph)
            wi[2] = z
        else:
            brdf_sample(rho, f0, alpha, n, t, b, wo, np.random.random(), np.random.random(), np.random.random(), wi)
        p = brdf_pdf(rho, f0, alpha, n, wi, wo)
        q = 0.5 / (4.0 * math.pi) + 0.5 * p
        acc[k] = p / q
    return acc.mean(), acc.std() / math.sqrt(n_samples)


def test_pdf_normalization_1e5():
    mean, se = _pdf_integral(np.full(3, 0.4), np.full(3, 0.3), 0.35, _dir(0.7, 0.2), 100_000, 5)
    assert abs(mean - 1.0) < 3 * se + 1e-12


@given(rgb, rgb, st.floats(ALPHA_MIN, 1.0), st.floats(0.0, 1.5), st.integers(0, 2**31 - 1))
@settings(max_examples=1000)
def test_pdf_normalization_fuzz(rho, f0, alpha, theta, seed):
    mean, se = _pdf_integral(rho, f0, alpha, _dir(theta, 0.4), 4000, seed)
    # the estimator is bounded in [0, 2]; the floor keeps 3 sigma meaningful if all samples agree
    assert abs(mean - 1.0) <= 3 * max(se, 1e-3)


@given(params, upper, st.tuples(st.floats(0, 1), st.floats(0, 1)), st.floats(0, 1))
@settings(max_examples=300)
def test_sample_value_is_eval(p, wo, u, lu):
    wi, pdf, val = sample_brdf(p, wo, FRAME, u, lu)
    assert abs(np.linalg.norm(wi) - 1) < 1e-9
    assert pdf == pytest.approx(pdf_brdf(p, wi, wo, FRAME), rel=1e-12)
    np.testing.assert_array_equal(val, eval_brdf(p, wi, wo, FRAME))


@numba.njit
def _albedo(rho, f0, alpha, wo, n_samples, seed):
    np.random.seed(seed)
    n = np.array([0.0, 0.0, 1.0])
    t, b = frame_from_normal(n)
    wi = np.empty(3)
    f = np.empty(3)
    acc = np.zeros(n_samples)
    for k in range(n_samples):
        pdf, _ = brdf_sample(rho, f0, alpha, n, t, b, wo, np.random.random(), np.random.random(),
                             np.random.random(), wi)
        if pdf > 0.0 and brdf_eval(rho, f0, alpha, n, wi, wo, f):
            acc[k] = f[0] * wi[2] / pdf
    return acc.mean(), acc.std() / math.sqrt(n_samples)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(ALPHA_MIN, 1.0), st.floats(0.0, math.acos(0.9)),
       st.integers(0, 2**31 - 1))
@settings(max_examples=100)
def test_white_furnace_bound_near_normal(r, frac, alpha, theta, seed):
    f0 = (1 - r) * frac
    mean, se = _albedo(np.full(3, r), np.full(3, f0), alpha, _dir(theta, 0.0), 20_000, seed)
    assert mean <= 1 + 3 * se + 1e-9


def test_white_furnace_exceeded_at_grazing():
    # the diffuse term is not weighted by (1 - F), so at grazing view angles the
    # model as specified reflects more than it receives even with rho + F0 = 1
    mean, se = _albedo(np.full(3, 0.5), np.full(3, 0.5), 0.05, _dir(math.acos(0.05), 0.0), 100_000, 0)
    assert mean > 1.1


# ---------------------------------------------------------------------------
# derivatives


def test_drho_is_inverse_pi():
    d_rho, _, _ = brdf_param_derivatives(BrdfParams(0.3, 0.2, 0.4), _dir(0.3, 0), _dir(0.5, 2), FRAME)
    np.testing.assert_array_equal(d_rho, 1 / math.pi)


def test_df0_without_schlick_tail():
    p = BrdfParams(0.1, 0.3, 0.4)
    _, d_f0, _ = brdf_param_derivatives(p, N, N, FRAME)
    e = 2 / 0.16 - 2
    np.testing.assert_allclose(d_f0, (e + 2) / (2 * math.pi) / 4, rtol=1e-13)


@given(rgb, st.tuples(*[st.floats(0.03, 0.97)] * 3).map(np.array), st.floats(0.1, 0.95), upper, upper)
@settings(max_examples=300)
def test_derivatives_match_finite_differences(rho, f0, alpha, wi, wo):
    h = 1e-4
    p = BrdfParams(rho, f0, alpha)
    _, d_f0, d_alpha = brdf_param_derivatives(p, wi, wo, FRAME)
    fd_a = (eval_brdf(BrdfParams(rho, f0, alpha + h), wi, wo, FRAME)
            - eval_brdf(BrdfParams(rho, f0, alpha - h), wi, wo, FRAME)) / (2 * h)
    scale = np.abs(eval_brdf(p, wi, wo, FRAME)).max() + 1e-12
    for c in range(3):
        df = f0.copy()
        df[c] += h
        dm = f0.copy()
        dm[c] -= h
        fd = (eval_brdf(BrdfParams(rho, df, alpha), wi, wo, FRAME)[c]
              - eval_brdf(BrdfParams(rho, dm, alpha), wi, wo, FRAME)[c]) / (2 * h)
        assert abs(fd - d_f0[c]) <= 1e-3 * max(abs(fd), abs(d_f0[c])) + 1e-9 * scale
        assert abs(fd_a[c] - d_alpha[c]) <= 1e-3 * max(abs(fd_a[c]), abs(d_alpha[c])) + 1e-7 * scale


def test_f0_fade_below_threshold_is_continuous():
    wi, wo = _dir(1.2, 0.0), _dir(1.3, math.pi)
    lo = eval_brdf(BrdfParams(0.2, 0.02 - 1e-12, 0.3), wi, wo, FRAME)
    hi = eval_brdf(BrdfParams(0.2, 0.02, 0.3), wi, wo, FRAME)
    np.testing.assert_allclose(lo, hi, rtol=1e-9)
    # and the derivative inside the faded range matches finite differences
    _, d_f0, _ = brdf_param_derivatives(BrdfParams(0.2, 0.01, 0.3), wi, wo, FRAME)
    h = 1e-6
    fd = (eval_brdf(BrdfParams(0.2, 0.01 + h, 0.3), wi, wo, FRAME)
          - eval_brdf(BrdfParams(0.2, 0.01 - h, 0.3), wi, wo, FRAME)) / (2 * h)
    np.testing.assert_allclose(d_f0, fd, rtol=1e-6)
