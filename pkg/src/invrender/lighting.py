"""Equirectangular environment map: lookup, importance sampling, texel footprints.

Convention: +Y is up. A direction ``d`` maps to
``u = (atan2(d_z, d_x) + pi) / (2 pi)`` and ``v = arccos(d_y) / pi``, so row 0
is the zenith and the seam sits at azimuth -pi.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from ._jit import jit
from .uv_atlas import bilinear_footprint

LUMA = np.array([0.2126, 0.7152, 0.0722])


class EnvTable(NamedTuple):
    marginal_cdf: np.ndarray     # (H + 1,)
    conditional_cdf: np.ndarray  # (H, W + 1)
    texel_pdf: np.ndarray        # (H, W) solid-angle density inside each texel
    cos_edges: np.ndarray        # (H + 1,) cos(theta) at row boundaries


class EnvironmentMap:
    """Radiance grid (H, W, 3) plus a luminance x solid-angle sampling table."""

    def __init__(self, radiance, table: EnvTable | None = None):
        rad = np.ascontiguousarray(radiance, dtype=np.float64)
        if rad.ndim != 3 or rad.shape[2] != 3:
            raise ValueError("environment radiance must have shape (H, W, 3)")
        if not np.isfinite(rad).all() or (rad < 0).any():
            raise ValueError("environment radiance must be finite and non-negative")
        self.radiance = rad
        self.table = build_table(rad) if table is None else table

    @classmethod
    def constant(cls, value, height=32, width=64):
        return cls(np.broadcast_to(np.asarray(value, dtype=np.float64), (height, width, 3)).copy())

    @property
    def shape(self):
        return self.radiance.shape[:2]

    def rebuild(self):
        self.table = build_table(self.radiance)

    def with_radiance(self, radiance, keep_table=True) -> "EnvironmentMap":
        """Copy holding new texel values; the sampling table is shared unless rebuilt."""
        out = EnvironmentMap.__new__(EnvironmentMap)
        out.radiance = np.ascontiguousarray(radiance, dtype=np.float64)
        out.table = self.table if keep_table else build_table(out.radiance)
        return out


def texel_solid_angles(height, width):
    cos_edges = np.cos(np.pi * np.arange(height + 1) / height)
    row = 2 * np.pi / width * (cos_edges[:-1] - cos_edges[1:])
    return cos_edges, np.repeat(row[:, None], width, 1)


def build_table(radiance) -> EnvTable:
    """Piecewise-constant sampling density proportional to luminance x texel solid angle.

    An all-black map falls back to weights equal to the solid angle, which is
    exactly uniform sphere sampling.
    """
    h, w = radiance.shape[:2]
    cos_edges, omega = texel_solid_angles(h, w)
    weight = (radiance @ LUMA) * omega
    total = weight.sum()
    if not total > 0:
        weight = omega.copy()
        total = weight.sum()
    prob = weight / total
    row = prob.sum(1)
    marginal = np.concatenate([[0.0], np.cumsum(row)])
    marginal /= marginal[-1]
    marginal[-1] = 1.0
    cond = np.zeros((h, w + 1))
    for i in range(h):
        if row[i] > 0:
            c = np.cumsum(prob[i]) / row[i]
            c[-1] = 1.0
            cond[i, 1:] = c
        else:
            cond[i, 1:] = np.arange(1, w + 1) / w
    return EnvTable(marginal, cond, prob / omega, cos_edges)


@jit
def dir_to_uv(d):
    u = (math.atan2(d[2], d[0]) + math.pi) / (2.0 * math.pi)
    v = math.acos(min(max(d[1], -1.0), 1.0)) / math.pi
    if u >= 1.0:
        u -= 1.0
    return u, v


@jit
def uv_to_dir(u, v):
    phi = 2.0 * math.pi * u - math.pi
    th = math.pi * v
    st = math.sin(th)
    d = np.empty(3)
    d[0] = st * math.cos(phi)
    d[1] = math.cos(th)
    d[2] = st * math.sin(phi)
    return d


@jit
def env_footprint(rad, d):
    h = rad.shape[0]
    w = rad.shape[1]
    u, v = dir_to_uv(d)
    ids, wt, _ = bilinear_footprint(u, v, w, h, True)
    return ids, wt


@jit
def env_lookup(rad, d, out):
    ids, wt = env_footprint(rad, d)
    w = rad.shape[1]
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    for k in range(4):
        j = ids[k] // w
        i = ids[k] - j * w
        for c in range(3):
            out[c] += wt[k] * rad[j, i, c]


@jit
def _find_interval(cdf, u):
    """Largest k with cdf[k] <= u < cdf[k + 1]."""
    lo = 0
    hi = cdf.shape[0] - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cdf[mid] <= u:
            lo = mid
        else:
            hi = mid
    return lo


@jit
def table_sample(table, u1, u2):
    """Sample a direction; returns (dir, pdf)."""
    h = table.texel_pdf.shape[0]
    w = table.texel_pdf.shape[1]
    i = _find_interval(table.marginal_cdf, u1)
    du = (u1 - table.marginal_cdf[i]) / (table.marginal_cdf[i + 1] - table.marginal_cdf[i])
    row = table.conditional_cdf[i]
    j = _find_interval(row, u2)
    dv = (u2 - row[j]) / (row[j + 1] - row[j])
    # stay strictly inside the texel: at the poles the azimuth would be lost
    du = min(max(du, 1e-12), 1.0 - 1e-12)
    dv = min(max(dv, 0.0), 1.0 - 1e-12)
    phi = 2.0 * math.pi * (j + dv) / w - math.pi
    ct = table.cos_edges[i] - du * (table.cos_edges[i] - table.cos_edges[i + 1])
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    d = np.empty(3)
    d[0] = st * math.cos(phi)
    d[1] = ct
    d[2] = st * math.sin(phi)
    return d, table.texel_pdf[i, j]


@jit
def table_pdf(table, d):
    h = table.texel_pdf.shape[0]
    w = table.texel_pdf.shape[1]
    u, v = dir_to_uv(d)
    i = min(int(v * h), h - 1)
    j = min(int(u * w), w - 1)
    return table.texel_pdf[i, j]


# ---------------------------------------------------------------------------
# Python-facing wrappers


def env_eval(env: EnvironmentMap, direction) -> np.ndarray:
    out = np.empty(3)
    env_lookup(env.radiance, np.asarray(direction, dtype=np.float64), out)
    return out


def env_sample(env: EnvironmentMap, u):
    """Draw a direction proportional to luminance x solid angle: (dir, pdf, radiance)."""
    d, pdf = table_sample(env.table, float(u[0]), float(u[1]))
    return d, pdf, env_eval(env, d)


def env_pdf(env: EnvironmentMap, direction) -> float:
    return float(table_pdf(env.table, np.asarray(direction, dtype=np.float64)))


def env_texel_footprint(env: EnvironmentMap, direction):
    """Four (column, row) texel ids with bilinear weights; columns wrap."""
    ids, wt = env_footprint(env.radiance, np.asarray(direction, dtype=np.float64))
    w = env.radiance.shape[1]
    return np.stack([ids % w, ids // w], 1), wt


# ---------------------------------------------------------------------------
# analytic skies


def sky(height=32, width=64, sun_dir=(0.5, 0.6, 0.3), sun_color=(1.0, 0.9, 0.75),
        sun_strength=6.0, sun_size=0.12, zenith=(0.35, 0.5, 0.9), horizon=(0.85, 0.85, 0.8),
        ground=(0.25, 0.22, 0.2)):
    """Smooth sky gradient, Gaussian sun lobe and flat ground, sampled at texel centres."""
    sun = np.asarray(sun_dir, dtype=np.float64)
    sun /= np.linalg.norm(sun)
    jj, ii = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    u = (ii + 0.5) / width
    v = (jj + 0.5) / height
    phi = 2 * np.pi * u - np.pi
    th = np.pi * v
    d = np.stack([np.sin(th) * np.cos(phi), np.cos(th), np.sin(th) * np.sin(phi)], -1)
    up = d[..., 1:2]
    t = np.clip(up, 0, 1) ** 0.5
    rad = np.where(up > 0, (1 - t) * np.asarray(horizon) + t * np.asarray(zenith),
                   np.asarray(ground) + 0 * up)
    ang = np.arccos(np.clip(d @ sun, -1, 1))[..., None]
    rad = rad + sun_strength * np.asarray(sun_color) * np.exp(-0.5 * (ang / sun_size) ** 2)
    return rad


def morning_sky(height=32, width=64):
    return sky(height, width, sun_dir=(0.8, 0.45, -0.35), sun_color=(1.0, 0.95, 0.85),
               sun_strength=5.0, zenith=(0.3, 0.5, 0.95), horizon=(0.8, 0.85, 0.9))


def evening_sky(height=32, width=64):
    return sky(height, width, sun_dir=(-0.7, 0.2, 0.6), sun_color=(1.0, 0.55, 0.25),
               sun_strength=4.0, zenith=(0.15, 0.15, 0.35), horizon=(0.9, 0.5, 0.3),
               ground=(0.12, 0.08, 0.06))
