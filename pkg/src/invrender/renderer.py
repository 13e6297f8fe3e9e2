"""Monte-Carlo path tracer with environment next-event estimation and MIS.

Every random number is a pure function of (seed, view id, pixel, sample,
dimension), so a render can be replayed exactly by the gradient pass and
results do not depend on how pixels are distributed over threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import prange

from ._jit import jit, pjit
from .geometry import MeshArrays, TriangleMesh, any_hit, closest_hit, frame_from_normal
from .lighting import EnvironmentMap, env_footprint, env_lookup, table_pdf, table_sample
from .reflectance import INV_PI, brdf_eval, brdf_grad, brdf_pdf, brdf_sample
from .uv_atlas import bilinear_footprint

DEFAULT_BOUNCES = 2
OFFSET_REL = 1e-4

# Per-sample gradient record. Integer part: texel ids of the first-hit
# reflectance footprint, of the light-sampled env direction (A) and of the
# BRDF-sampled or primary-miss env direction (B). Float part: the matching
# bilinear weights, then d(radiance)/d(rho, F0, alpha) per channel and the
# per-channel env coefficients of A and B.
I_REFL, I_ENVA, I_ENVB = 0, 4, 8
REC_I = 12
F_REFL, F_DRHO, F_DF0, F_DALPHA = 0, 4, 7, 10
F_ENVA, F_ENVB = 13, 20
REC_F = 27


@dataclass
class CameraView:
    """Pinhole camera looking down -Z of its frame, +Y up.

    ``camera_to_world`` is a 4x4 rigid transform (row-major).
    """

    width: int
    height: int
    fov: float
    camera_to_world: np.ndarray
    image: Optional[object] = None
    view_id: int = 0

    def __post_init__(self):
        m = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        if not 0 < self.fov < 180:
            raise ValueError("fov must lie in (0, 180) degrees")
        r = m[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation block is not orthonormal")
        self.camera_to_world = m

    @classmethod
    def look_at(cls, eye, target=(0, 0, 0), up=(0, 1, 0), width=64, height=64, fov=40.0, view_id=0, image=None):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        if abs(fwd @ up) > 0.999:
            up = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        m = np.eye(4)
        m[:3, 0] = right
        m[:3, 1] = true_up
        m[:3, 2] = -fwd
        m[:3, 3] = eye
        return cls(width, height, fov, m, image, view_id)


@dataclass
class RenderImage:
    radiance: np.ndarray
    mask: np.ndarray
    spp: int
    nonfinite: int = 0


@dataclass
class Scene:
    mesh: TriangleMesh
    arrays: MeshArrays = field(repr=False)
    eps: float = 1e-4

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh) -> "Scene":
        return cls(mesh, mesh.bvh.arrays, OFFSET_REL * mesh.scale)


def as_scene(scene) -> Scene:
    return scene if isinstance(scene, Scene) else Scene.from_mesh(scene)


# ---------------------------------------------------------------------------
# random numbers

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@jit
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@jit
def sample_key(seed, view, pixel, sample):
    z = _mix(np.uint64(seed) + _GOLDEN)
    z = _mix(z ^ np.uint64(view))
    z = _mix(z ^ np.uint64(pixel))
    return _mix(z ^ np.uint64(sample))


@jit
def uniform(key, dim):
    z = _mix(key + np.uint64(dim + 1) * _GOLDEN)
    return float(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# camera


@jit
def camera_ray(cam, width, height, tan_half, px, py, sx, sy, d):
    aspect = width / height
    x = (2.0 * (px + sx) / width - 1.0) * tan_half * aspect
    y = (1.0 - 2.0 * (py + sy) / height) * tan_half
    inv = 1.0 / math.sqrt(x * x + y * y + 1.0)
    for c in range(3):
        d[c] = (cam[c, 0] * x + cam[c, 1] * y - cam[c, 2]) * inv


@jit
def pixel_offset(key, sample, spp):
    n = int(math.sqrt(spp) + 0.5)
    u0 = uniform(key, 0)
    u1 = uniform(key, 1)
    if n * n == spp:
        return ((sample % n) + u0) / n, ((sample // n) + u1) / n
    return u0, u1


# ---------------------------------------------------------------------------
# path tracing core


@jit
def _texel_params(dif, spc, rgh, ids, w, rho, f0):
    wd = dif.shape[1]
    rho[0] = rho[1] = rho[2] = 0.0
    f0[0] = f0[1] = f0[2] = 0.0
    a = 0.0
    for k in range(4):
        j = ids[k] // wd
        i = ids[k] - j * wd
        for c in range(3):
            rho[c] += w[k] * dif[j, i, c]
            f0[c] += w[k] * spc[j, i, c]
        a += w[k] * rgh[j, i]
    return a


@jit
def _trace(m, dif, spc, rgh, sdif, sspc, srgh, env_rad, table, cam, width, height, tan_half,
           px, py, sample, spp, key, max_bounces, eps, want_grad, rec_i, rec_f, out):
    """Radiance of one camera sample, written to ``out``.

    With ``want_grad`` the first-vertex derivative coefficients of this
    sample's radiance are written to the record (see ``REC_*`` offsets);
    they are later multiplied by the pixel loss derivative in the scatter.
    """
    out[0] = out[1] = out[2] = 0.0
    if want_grad:
        for k in range(REC_I):
            rec_i[k] = 0
        for k in range(REC_F):
            rec_f[k] = 0.0
    sx, sy = pixel_offset(key, sample, spp)
    o = np.empty(3)
    d = np.empty(3)
    for c in range(3):
        o[c] = cam[c, 3]
    camera_ray(cam, width, height, tan_half, px, py, sx, sy, d)
    f, t, b0, b1, b2 = closest_hit(m, o, d, 0.0, np.inf)
    le = np.empty(3)
    if f < 0:
        env_lookup(env_rad, d, le)
        for c in range(3):
            out[c] = le[c]
        if want_grad:
            ids, w = env_footprint(env_rad, d)
            for k in range(4):
                rec_i[I_ENVB + k] = ids[k]
                rec_f[F_ENVB + k] = w[k]
            for c in range(3):
                rec_f[F_ENVB + 4 + c] = 1.0
        return

    rho = np.empty(3)
    f0 = np.empty(3)
    srho = np.empty(3)
    sf0 = np.empty(3)
    fv = np.empty(3)
    dfs = np.empty(3)
    dfa = np.empty(3)
    wi = np.empty(3)
    p = np.empty(3)
    ng = np.empty(3)
    ns = np.empty(3)
    wo = np.empty(3)
    beta = np.ones(3)
    tail = np.zeros(3)
    first_f = np.zeros(3)
    first_dfs = np.zeros(3)
    first_dfa = np.zeros(3)
    first_scale = 0.0
    indirect = False

    for bounce in range(max_bounces):
        base = 2 + 5 * bounce
        for c in range(3):
            p[c] = b0 * m.tri[f, 0, c] + b1 * m.tri[f, 1, c] + b2 * m.tri[f, 2, c]
            wo[c] = -d[c]
            ns[c] = b0 * m.tri_n[f, 0, c] + b1 * m.tri_n[f, 1, c] + b2 * m.tri_n[f, 2, c]
            ng[c] = m.tri_ng[f, c]
        if ng[0] * wo[0] + ng[1] * wo[1] + ng[2] * wo[2] < 0.0:
            for c in range(3):
                ng[c] = -ng[c]
        nl = math.sqrt(ns[0] * ns[0] + ns[1] * ns[1] + ns[2] * ns[2])
        if nl < 1e-8:
            for c in range(3):
                ns[c] = ng[c]
        else:
            sgn = 1.0 if ns[0] * ng[0] + ns[1] * ng[1] + ns[2] * ng[2] >= 0.0 else -1.0
            for c in range(3):
                ns[c] = sgn * ns[c] / nl
        tu = b0 * m.tri_uv[f, 0, 0] + b1 * m.tri_uv[f, 1, 0] + b2 * m.tri_uv[f, 2, 0]
        tv = b0 * m.tri_uv[f, 0, 1] + b1 * m.tri_uv[f, 1, 1] + b2 * m.tri_uv[f, 2, 1]
        ids, tw, _ = bilinear_footprint(tu, tv, dif.shape[1], dif.shape[0], False)
        alpha = _texel_params(dif, spc, rgh, ids, tw, rho, f0)
        salpha = _texel_params(sdif, sspc, srgh, ids, tw, srho, sf0)
        tt, bb = frame_from_normal(ns)
        for c in range(3):
            p[c] += eps * ng[c]
        grad_here = want_grad and bounce == 0
        if grad_here:
            for k in range(4):
                rec_i[I_REFL + k] = ids[k]
                rec_f[F_REFL + k] = tw[k]

        # light sample
        ldir, lpdf = table_sample(table, uniform(key, base), uniform(key, base + 1))
        cos_l = ldir[0] * ns[0] + ldir[1] * ns[1] + ldir[2] * ns[2]
        if lpdf > 0.0 and cos_l > 0.0 and ldir[0] * ng[0] + ldir[1] * ng[1] + ldir[2] * ng[2] > 0.0:
            if brdf_eval(rho, f0, alpha, ns, ldir, wo, fv) and not any_hit(m, p, ldir, 0.0, np.inf):
                env_lookup(env_rad, ldir, le)
                bpdf = brdf_pdf(srho, sf0, salpha, ns, ldir, wo)
                scale = cos_l * lpdf / (lpdf * lpdf + bpdf * bpdf)
                if bounce == 0:
                    for c in range(3):
                        out[c] += fv[c] * le[c] * scale
                else:
                    for c in range(3):
                        tail[c] += beta[c] * fv[c] * le[c] * scale
                if grad_here:
                    brdf_grad(rho, f0, alpha, ns, ldir, wo, dfs, dfa)
                    for c in range(3):
                        k = le[c] * scale
                        rec_f[F_DRHO + c] += k * INV_PI
                        rec_f[F_DF0 + c] += k * dfs[c]
                        rec_f[F_DALPHA + c] += k * dfa[c]
                    eids, ew = env_footprint(env_rad, ldir)
                    for k in range(4):
                        rec_i[I_ENVA + k] = eids[k]
                        rec_f[F_ENVA + k] = ew[k]
                    for c in range(3):
                        rec_f[F_ENVA + 4 + c] = fv[c] * scale

        # BRDF sample
        bpdf, _ = brdf_sample(srho, sf0, salpha, ns, tt, bb, wo, uniform(key, base + 2),
                              uniform(key, base + 3), uniform(key, base + 4), wi)
        cos_b = wi[0] * ns[0] + wi[1] * ns[1] + wi[2] * ns[2]
        if not (bpdf > 0.0 and cos_b > 0.0 and wi[0] * ng[0] + wi[1] * ng[1] + wi[2] * ng[2] > 0.0):
            break
        if not brdf_eval(rho, f0, alpha, ns, wi, wo, fv):
            break
        f2, t2, c0, c1, c2 = closest_hit(m, p, wi, 0.0, np.inf)
        if f2 < 0:
            env_lookup(env_rad, wi, le)
            epdf = table_pdf(table, wi)
            scale = cos_b * bpdf / (bpdf * bpdf + epdf * epdf)
            if bounce == 0:
                for c in range(3):
                    out[c] += fv[c] * le[c] * scale
            else:
                for c in range(3):
                    tail[c] += beta[c] * fv[c] * le[c] * scale
            if grad_here:
                brdf_grad(rho, f0, alpha, ns, wi, wo, dfs, dfa)
                for c in range(3):
                    k = le[c] * scale
                    rec_f[F_DRHO + c] += k * INV_PI
                    rec_f[F_DF0 + c] += k * dfs[c]
                    rec_f[F_DALPHA + c] += k * dfa[c]
                eids, ew = env_footprint(env_rad, wi)
                for k in range(4):
                    rec_i[I_ENVB + k] = eids[k]
                    rec_f[F_ENVB + k] = ew[k]
                for c in range(3):
                    rec_f[F_ENVB + 4 + c] = fv[c] * scale
            break
        # continue the path; deeper radiance reaches the first vertex through ``tail``
        s = cos_b / bpdf
        if bounce == 0:
            indirect = True
            first_scale = s
            for c in range(3):
                first_f[c] = fv[c]
            if want_grad:
                brdf_grad(rho, f0, alpha, ns, wi, wo, first_dfs, first_dfa)
        else:
            for c in range(3):
                beta[c] *= fv[c] * s
        for c in range(3):
            d[c] = wi[c]
        f, b0, b1, b2 = f2, c0, c1, c2

    if indirect:
        for c in range(3):
            out[c] += first_f[c] * first_scale * tail[c]
        if want_grad:
            for c in range(3):
                k = first_scale * tail[c]
                rec_f[F_DRHO + c] += k * INV_PI
                rec_f[F_DF0 + c] += k * first_dfs[c]
                rec_f[F_DALPHA + c] += k * first_dfa[c]


@jit
def _finite3(v):
    return math.isfinite(v[0]) and math.isfinite(v[1]) and math.isfinite(v[2])


@pjit
def _render_kernel(m, dif, spc, rgh, sdif, sspc, srgh, env_rad, table, cam, width, height, tan_half,
                   spp, seed, view, max_bounces, eps, img, bad):
    npix = width * height
    ri = np.zeros(REC_I, dtype=np.int64)
    rf = np.zeros(REC_F)
    for pix in prange(npix):
        py = pix // width
        px = pix - py * width
        acc = np.zeros(3)
        val = np.empty(3)
        nbad = 0
        for s in range(spp):
            key = sample_key(seed, view, pix, s)
            _trace(m, dif, spc, rgh, sdif, sspc, srgh, env_rad, table, cam, width, height, tan_half,
                   px, py, s, spp, key, max_bounces, eps, False, ri, rf, val)
            if _finite3(val):
                for c in range(3):
                    acc[c] += val[c]
            else:
                nbad += 1
        for c in range(3):
            img[py, px, c] = acc[c] / spp
        bad[pix] = nbad


@pjit
def _record_kernel(m, dif, spc, rgh, sdif, sspc, srgh, env_rad, table, cam, width, height, tan_half,
                   spp, seed, view, max_bounces, eps, pix0, pix1, rec_i, rec_f, img, bad):
    """Same paths as ``_render_kernel`` for pixels [pix0, pix1), keeping per-sample records."""
    for q in prange(pix1 - pix0):
        pix = pix0 + q
        py = pix // width
        px = pix - py * width
        acc = np.zeros(3)
        val = np.empty(3)
        nbad = 0
        for s in range(spp):
            r = q * spp + s
            key = sample_key(seed, view, pix, s)
            _trace(m, dif, spc, rgh, sdif, sspc, srgh, env_rad, table, cam, width, height, tan_half,
                   px, py, s, spp, key, max_bounces, eps, True, rec_i[r], rec_f[r], val)
            if _finite3(val):
                for c in range(3):
                    acc[c] += val[c]
            else:
                nbad += 1
            ok = True
            for k in range(REC_F):
                if not math.isfinite(rec_f[r, k]):
                    ok = False
            if not ok:
                for k in range(REC_F):
                    rec_f[r, k] = 0.0
        for c in range(3):
            img[py, px, c] = acc[c] / spp
        bad[pix] = nbad


@pjit
def _coverage_kernel(m, cam, width, height, tan_half, cls):
    """Per pixel: 2 if the centre and four corners hit geometry, 0 if none do, else 1."""
    offs = np.array([[0.5, 0.5], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    for pix in prange(width * height):
        py = pix // width
        px = pix - py * width
        o = np.empty(3)
        d = np.empty(3)
        for c in range(3):
            o[c] = cam[c, 3]
        hits = 0
        for k in range(5):
            camera_ray(cam, width, height, tan_half, px, py, offs[k, 0], offs[k, 1], d)
            f, _, _, _, _ = closest_hit(m, o, d, 0.0, np.inf)
            if f >= 0:
                hits += 1
        cls[py, px] = 2 if hits == 5 else (0 if hits == 0 else 1)


@pjit
def _primary_footprint_kernel(m, cam, width, height, tan_half, spp, seed, view, tw, th, ids_out, w_out):
    for pix in prange(width * height):
        py = pix // width
        px = pix - py * width
        o = np.empty(3)
        d = np.empty(3)
        for c in range(3):
            o[c] = cam[c, 3]
        for s in range(spp):
            r = pix * spp + s
            key = sample_key(seed, view, pix, s)
            sx, sy = pixel_offset(key, s, spp)
            camera_ray(cam, width, height, tan_half, px, py, sx, sy, d)
            f, t, b0, b1, b2 = closest_hit(m, o, d, 0.0, np.inf)
            if f < 0:
                for k in range(4):
                    ids_out[r, k] = 0
                    w_out[r, k] = 0.0
                continue
            tu = b0 * m.tri_uv[f, 0, 0] + b1 * m.tri_uv[f, 1, 0] + b2 * m.tri_uv[f, 2, 0]
            tv = b0 * m.tri_uv[f, 0, 1] + b1 * m.tri_uv[f, 1, 1] + b2 * m.tri_uv[f, 2, 1]
            ids, w, _ = bilinear_footprint(tu, tv, tw, th, False)
            for k in range(4):
                ids_out[r, k] = ids[k]
                w_out[r, k] = w[k]


# ---------------------------------------------------------------------------
# Python-facing API


def _maps_arrays(maps):
    return (np.ascontiguousarray(maps.diffuse, dtype=np.float64),
            np.ascontiguousarray(maps.specular, dtype=np.float64),
            np.ascontiguousarray(maps.roughness, dtype=np.float64))


def _common_args(scene, view, maps, env, sampling_maps, sampling_env):
    scene = as_scene(scene)
    if scene.mesh.uvs is None:
        raise ValueError("mesh has no uv atlas; bake one before rendering")
    dif, spc, rgh = _maps_arrays(maps)
    sdif, sspc, srgh = _maps_arrays(sampling_maps if sampling_maps is not None else maps)
    table = (sampling_env if sampling_env is not None else env).table
    tan_half = math.tan(math.radians(view.fov) / 2)
    return (scene.arrays, dif, spc, rgh, sdif, sspc, srgh, env.radiance, table,
            view.camera_to_world, int(view.width), int(view.height), tan_half)


def pixel_classes(scene, view: CameraView) -> np.ndarray:
    """Per-pixel 2 (fully covered), 1 (silhouette) or 0 (background only)."""
    scene = as_scene(scene)
    cls = np.zeros((view.height, view.width), dtype=np.int8)
    _coverage_kernel(scene.arrays, view.camera_to_world, int(view.width), int(view.height),
                     math.tan(math.radians(view.fov) / 2), cls)
    return cls


def coverage_mask(scene, view: CameraView) -> np.ndarray:
    """Pixels whose centre and four corners all see geometry."""
    return pixel_classes(scene, view) == 2


def background_mask(scene, view: CameraView) -> np.ndarray:
    """Pixels whose centre and four corners all miss geometry."""
    return pixel_classes(scene, view) == 0


def render(scene, view: CameraView, maps, env: EnvironmentMap, spp: int = 64, seed: int = 0,
           max_bounces: int = DEFAULT_BOUNCES, sampling_maps=None, sampling_env=None) -> RenderImage:
    """Render ``view`` of the atlased scene under ``env``.

    ``sampling_maps``/``sampling_env`` override the parameters used to build
    sampling densities (lobe choice, BRDF and light pdfs); shading always uses
    ``maps`` and ``env``. Gradient checks pass the unperturbed parameters here
    so that finite differences see a smooth function.
    """
    scene = as_scene(scene)
    args = _common_args(scene, view, maps, env, sampling_maps, sampling_env)
    img = np.zeros((view.height, view.width, 3))
    bad = np.zeros(view.height * view.width, dtype=np.int64)
    _render_kernel(*args, int(spp), int(seed), int(view.view_id), int(max_bounces), scene.eps, img, bad)
    return RenderImage(img, coverage_mask(scene, view), int(spp), int(bad.sum()))


@dataclass
class PathRecords:
    """Per-sample first-vertex derivative records for pixels [pix0, pix1) of a view."""

    pix0: int
    pix1: int
    spp: int
    rec_i: np.ndarray
    rec_f: np.ndarray


def trace_records(scene, view: CameraView, maps, env: EnvironmentMap, spp: int, seed: int,
                  max_bounces: int = DEFAULT_BOUNCES, sampling_maps=None, sampling_env=None,
                  pix0: int = 0, pix1: Optional[int] = None, image: Optional[np.ndarray] = None):
    """Trace a pixel range keeping derivative records; fills ``image`` with the same
    values :func:`render` produces. Returns (records, non-finite sample count)."""
    scene = as_scene(scene)
    npix = view.width * view.height
    pix1 = npix if pix1 is None else pix1
    args = _common_args(scene, view, maps, env, sampling_maps, sampling_env)
    n = (pix1 - pix0) * spp
    rec_i = np.zeros((n, REC_I), dtype=np.int64)
    rec_f = np.zeros((n, REC_F))
    img = np.zeros((view.height, view.width, 3)) if image is None else image
    bad = np.zeros(npix, dtype=np.int64)
    _record_kernel(*args, int(spp), int(seed), int(view.view_id), int(max_bounces), scene.eps,
                   int(pix0), int(pix1), rec_i, rec_f, img, bad)
    return PathRecords(int(pix0), int(pix1), int(spp), rec_i, rec_f), int(bad.sum())


def primary_footprints(scene, view: CameraView, tex_shape, spp: int, seed: int = 0):
    """Texel ids/weights touched by each primary sample: arrays (P*spp, 4)."""
    scene = as_scene(scene)
    n = view.width * view.height * spp
    ids = np.zeros((n, 4), dtype=np.int64)
    w = np.zeros((n, 4))
    _primary_footprint_kernel(scene.arrays, view.camera_to_world, int(view.width), int(view.height),
                              math.tan(math.radians(view.fov) / 2), int(spp), int(seed), int(view.view_id),
                              int(tex_shape[1]), int(tex_shape[0]), ids, w)
    return ids, w


def texel_coverage(scene, views, tex_shape, spp_probe: int = 16, seed: int = 0) -> np.ndarray:
    """Number of views whose primary samples give each texel a nonzero bilinear weight."""
    counts = np.zeros(tuple(tex_shape[:2]), dtype=np.int64)
    for view in views:
        ids, w = primary_footprints(scene, view, tex_shape, spp_probe, seed)
        seen = np.zeros(counts.size, dtype=bool)
        seen[ids[w > 0]] = True
        counts += seen.reshape(counts.shape)
    return counts
