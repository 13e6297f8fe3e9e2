"""Lambertian + Cook-Torrance reflectance: evaluation, sampling, parameter derivatives.

Microfacet terms:

* D: normalised Blinn-Phong lobe, exponent ``e = 2/alpha^2 - 2``, so
  ``D = (e + 2) / (2 pi) (n.h)^e``
* F: Schlick, ``F0 + (1 - F0)(1 - h.wi)^5``, with the grazing tail faded out
  linearly below ``F0 = 0.02`` so that a zero F0 is exactly Lambertian
* G: Smith product of Schlick-GGX terms with ``k = alpha^2 / 2``

Diffuse and specular weights are folded into the albedo and F0 maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._jit import jit
from .geometry import frame_from_normal

ALPHA_MIN = 0.02
INV_PI = 1.0 / math.pi
LOBE_FLOOR = 0.1
F0_TAIL = 0.02  # F0 below which the Schlick grazing tail is suppressed


@dataclass
class BrdfParams:
    rho: np.ndarray
    f0: np.ndarray
    alpha: float

    def __post_init__(self):
        self.rho = np.broadcast_to(np.asarray(self.rho, dtype=np.float64), (3,)).copy()
        self.f0 = np.broadcast_to(np.asarray(self.f0, dtype=np.float64), (3,)).copy()
        self.alpha = float(self.alpha)


@jit
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@jit
def microfacet(cos_i, cos_o, cos_h, alpha):
    """D, G and their alpha derivatives for the clamped roughness."""
    a = alpha
    active = 1.0
    if a < ALPHA_MIN:
        a = ALPHA_MIN
        active = 0.0
    a2 = a * a
    e = 2.0 / a2 - 2.0
    d = (e + 2.0) / (2.0 * math.pi) * cos_h ** e
    dd = d * (-2.0 / a - 4.0 * math.log(cos_h) / (a2 * a)) if cos_h > 0.0 else 0.0
    k = 0.5 * a2
    qi = cos_i * (1.0 - k) + k
    qo = cos_o * (1.0 - k) + k
    gi = cos_i / qi
    go = cos_o / qo
    dgi = -cos_i * (1.0 - cos_i) / (qi * qi)
    dgo = -cos_o * (1.0 - cos_o) / (qo * qo)
    g = gi * go
    dg = a * (dgi * go + gi * dgo)
    return d, g, dd * active, dg * active


@jit
def fresnel(f0, s):
    """Schlick term for tail factor ``s = (1 - h.wi)^5`` and its F0 derivative."""
    if f0 >= F0_TAIL:
        return f0 + (1.0 - f0) * s, 1.0 - s
    g = max(f0, 0.0) / F0_TAIL
    dg = 1.0 / F0_TAIL if f0 > 0.0 else 0.0
    return f0 + (1.0 - f0) * s * g, 1.0 - s * g + (1.0 - f0) * s * dg


@jit
def lobe_probability(rho, f0):
    """Probability of sampling the specular lobe."""
    md = (rho[0] + rho[1] + rho[2]) / 3.0
    ms = (f0[0] + f0[1] + f0[2]) / 3.0
    if ms <= 0.0:
        return 0.0
    if md <= 0.0:
        return 1.0
    p = ms / (md + ms)
    return min(max(p, LOBE_FLOOR), 1.0 - LOBE_FLOOR)


@jit
def brdf_eval(rho, f0, alpha, n, wi, wo, out):
    """Write f(wi, wo) into ``out``; returns False (and zeros) below either horizon."""
    ci = _dot(n, wi)
    co = _dot(n, wo)
    if ci <= 0.0 or co <= 0.0:
        out[0] = 0.0
        out[1] = 0.0
        out[2] = 0.0
        return False
    hx = wi[0] + wo[0]
    hy = wi[1] + wo[1]
    hz = wi[2] + wo[2]
    hl = math.sqrt(hx * hx + hy * hy + hz * hz)
    ch = (n[0] * hx + n[1] * hy + n[2] * hz) / hl
    cd = (wi[0] * hx + wi[1] * hy + wi[2] * hz) / hl
    d, g, _, _ = microfacet(ci, co, ch, alpha)
    s = (1.0 - cd) ** 5
    spec = d * g / (4.0 * ci * co)
    for c in range(3):
        fr, _ = fresnel(f0[c], s)
        out[c] = rho[c] * INV_PI + spec * fr
    return True


@jit
def brdf_grad(rho, f0, alpha, n, wi, wo, d_f0, d_alpha):
    """Partials of f: d/drho is 1/pi; writes d/dF0 and d/dalpha per channel."""
    ci = _dot(n, wi)
    co = _dot(n, wo)
    if ci <= 0.0 or co <= 0.0:
        for c in range(3):
            d_f0[c] = 0.0
            d_alpha[c] = 0.0
        return False
    hx = wi[0] + wo[0]
    hy = wi[1] + wo[1]
    hz = wi[2] + wo[2]
    hl = math.sqrt(hx * hx + hy * hy + hz * hz)
    ch = (n[0] * hx + n[1] * hy + n[2] * hz) / hl
    cd = (wi[0] * hx + wi[1] * hy + wi[2] * hz) / hl
    d, g, dd, dg = microfacet(ci, co, ch, alpha)
    s = (1.0 - cd) ** 5
    inv = 1.0 / (4.0 * ci * co)
    for c in range(3):
        f, df = fresnel(f0[c], s)
        d_f0[c] = df * d * g * inv
        d_alpha[c] = f * (dd * g + d * dg) * inv
    return True


@jit
def _spec_pdf_h(cos_h, alpha):
    a = max(alpha, ALPHA_MIN)
    e = 2.0 / (a * a) - 2.0
    return (e + 1.0) / (2.0 * math.pi) * cos_h ** e


@jit
def brdf_pdf(rho, f0, alpha, n, wi, wo):
    """Solid-angle density of :func:`brdf_sample` at ``wi`` (over the full sphere)."""
    ps = lobe_probability(rho, f0)
    pdf = 0.0
    ci = _dot(n, wi)
    if ps < 1.0 and ci > 0.0:
        pdf += (1.0 - ps) * ci * INV_PI
    if ps > 0.0:
        hx = wi[0] + wo[0]
        hy = wi[1] + wo[1]
        hz = wi[2] + wo[2]
        hl = math.sqrt(hx * hx + hy * hy + hz * hz)
        if hl > 1e-12:
            ch = (n[0] * hx + n[1] * hy + n[2] * hz) / hl
            od = abs(wo[0] * hx + wo[1] * hy + wo[2] * hz) / hl
            ch = abs(ch)
            if od > 0.0:
                pdf += ps * _spec_pdf_h(ch, alpha) / (4.0 * od)
    return pdf


@jit
def brdf_sample(rho, f0, alpha, n, t, b, wo, u1, u2, ulobe, wi):
    """Draw ``wi`` (written in place); returns (pdf, used_specular_lobe)."""
    ps = lobe_probability(rho, f0)
    spec = ulobe < ps
    if not spec:
        r = math.sqrt(u1)
        phi = 2.0 * math.pi * u2
        x = r * math.cos(phi)
        y = r * math.sin(phi)
        z = math.sqrt(max(0.0, 1.0 - u1))
        for c in range(3):
            wi[c] = x * t[c] + y * b[c] + z * n[c]
    else:
        a = max(alpha, ALPHA_MIN)
        e = 2.0 / (a * a) - 2.0
        ct = u1 ** (1.0 / (e + 1.0))
        st = math.sqrt(max(0.0, 1.0 - ct * ct))
        phi = 2.0 * math.pi * u2
        h = np.empty(3)
        for c in range(3):
            h[c] = st * math.cos(phi) * t[c] + st * math.sin(phi) * b[c] + ct * n[c]
        oh = _dot(wo, h)
        for c in range(3):
            wi[c] = 2.0 * oh * h[c] - wo[c]
    norm = math.sqrt(_dot(wi, wi))
    for c in range(3):
        wi[c] /= norm
    return brdf_pdf(rho, f0, alpha, n, wi, wo), spec


# ---------------------------------------------------------------------------
# Python-facing wrappers


def _frame_normal(frame):
    if frame is None:
        return np.array([0.0, 0.0, 1.0])
    return np.asarray(frame[0], dtype=np.float64)


def eval_brdf(params: BrdfParams, wi, wo, frame=None) -> np.ndarray:
    """RGB value of f(wi, wo) in 1/sr; zero when either direction is below the surface."""
    out = np.empty(3)
    brdf_eval(params.rho, params.f0, params.alpha, _frame_normal(frame),
              np.asarray(wi, dtype=np.float64), np.asarray(wo, dtype=np.float64), out)
    return out


def sample_brdf(params: BrdfParams, wo, frame, u, lobe_u):
    """Importance-sample the mixture of cosine and Blinn-Phong half-vector lobes.

    Returns ``(wi, pdf, value)``; a direction below the horizon comes back
    with its (valid) pdf and a zero value.
    """
    if frame is None:
        n = np.array([0.0, 0.0, 1.0])
        t, b = frame_from_normal(n)
    else:
        n, t, b = (np.asarray(x, dtype=np.float64) for x in frame)
    wi = np.empty(3)
    pdf, _ = brdf_sample(params.rho, params.f0, params.alpha, n, t, b,
                         np.asarray(wo, dtype=np.float64), float(u[0]), float(u[1]), float(lobe_u), wi)
    return wi, pdf, eval_brdf(params, wi, wo, (n, t, b))


def pdf_brdf(params: BrdfParams, wi, wo, frame=None) -> float:
    return brdf_pdf(params.rho, params.f0, params.alpha, _frame_normal(frame),
                    np.asarray(wi, dtype=np.float64), np.asarray(wo, dtype=np.float64))


def brdf_param_derivatives(params: BrdfParams, wi, wo, frame=None):
    """Analytic partials ``(df/drho, df/dF0, df/dalpha)``, each an RGB triple."""
    d_f0 = np.empty(3)
    d_alpha = np.empty(3)
    ok = brdf_grad(params.rho, params.f0, params.alpha, _frame_normal(frame),
                   np.asarray(wi, dtype=np.float64), np.asarray(wo, dtype=np.float64), d_f0, d_alpha)
    d_rho = np.full(3, INV_PI) if ok else np.zeros(3)
    return d_rho, d_f0, d_alpha


@dataclass
class ReflectanceMaps:
    """Texel grids for albedo (H, W, 3), specular F0 (H, W, 3) and roughness (H, W)."""

    diffuse: np.ndarray
    specular: np.ndarray
    roughness: np.ndarray

    NAMES = ("diffuse", "specular", "roughness")

    @classmethod
    def constant(cls, resolution, diffuse=0.25, specular=0.04, roughness=0.5):
        h, w = (resolution, resolution) if np.isscalar(resolution) else resolution
        return cls(np.full((h, w, 3), diffuse, dtype=np.float64) + np.zeros(3),
                   np.full((h, w, 3), specular, dtype=np.float64) + np.zeros(3),
                   np.full((h, w), roughness, dtype=np.float64))

    @property
    def shape(self):
        return self.roughness.shape

    def copy(self) -> "ReflectanceMaps":
        return ReflectanceMaps(self.diffuse.copy(), self.specular.copy(), self.roughness.copy())

    def get(self, name) -> np.ndarray:
        return getattr(self, name)
