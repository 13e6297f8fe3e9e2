"""Gradients of a pixel loss with respect to reflectance and environment texels.

Paths are replayed with the forward pass's random streams. Each sample
leaves a record of its first-vertex derivative coefficients; a serial scatter
then multiplies them by dL/dpixel and accumulates into texel grids in a
fixed order, so results are bitwise independent of the thread count.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._jit import jit
from .lighting import EnvironmentMap
from .reflectance import ReflectanceMaps
from .renderer import (DEFAULT_BOUNCES, F_DALPHA, F_DF0, F_DRHO, F_ENVA, F_ENVB, F_REFL, I_ENVA,
                       I_ENVB, I_REFL, REC_F, REC_I, CameraView, PathRecords, RenderImage, as_scene,
                       coverage_mask, render, trace_records)

MAP_NAMES = ("diffuse", "specular", "roughness", "environment")
RECORD_BYTES = 8 * (REC_I + REC_F)
DEFAULT_BUDGET = 256 * 2**20


class ReplayError(RuntimeError):
    """The replayed paths did not reproduce the forward render."""


@dataclass
class GradientBuffers:
    """dL/dtexel grids shaped like the parameters they belong to."""

    diffuse: np.ndarray
    specular: np.ndarray
    roughness: np.ndarray
    environment: np.ndarray

    @classmethod
    def zeros(cls, tex_shape, env_shape) -> "GradientBuffers":
        h, w = tex_shape[:2]
        he, we = env_shape[:2]
        return cls(np.zeros((h, w, 3)), np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((he, we, 3)))

    @classmethod
    def like(cls, maps: ReflectanceMaps, env: EnvironmentMap) -> "GradientBuffers":
        return cls.zeros(maps.shape, env.shape)

    def get(self, name) -> np.ndarray:
        return getattr(self, name)

    def items(self):
        return [(n, getattr(self, n)) for n in MAP_NAMES]

    def copy(self) -> "GradientBuffers":
        return GradientBuffers(*(getattr(self, n).copy() for n in MAP_NAMES))

    def scaled(self, a: float) -> "GradientBuffers":
        return GradientBuffers(*(getattr(self, n) * a for n in MAP_NAMES))

    def __add__(self, other: "GradientBuffers") -> "GradientBuffers":
        return GradientBuffers(*(getattr(self, n) + getattr(other, n) for n in MAP_NAMES))

    def max_abs(self, names=MAP_NAMES) -> float:
        return max(float(np.abs(getattr(self, n)).max(initial=0.0)) for n in names)

    def all_finite(self) -> bool:
        return all(np.isfinite(g).all() for _, g in self.items())


@jit
def _scatter(rec_i, rec_f, pix0, spp, dldi, gd, gs, gr, ge):
    """Accumulate records times dL/dpixel into flat gradient arrays, in record order."""
    n = rec_i.shape[0]
    g = np.empty(3)
    for r in range(n):
        pix = pix0 + r // spp
        any_g = False
        for c in range(3):
            g[c] = dldi[pix, c] / spp
            if g[c] != 0.0:
                any_g = True
        if not any_g:
            continue
        da = 0.0
        for c in range(3):
            da += g[c] * rec_f[r, F_DALPHA + c]
        for k in range(4):
            w = rec_f[r, F_REFL + k]
            if w != 0.0:
                t = rec_i[r, I_REFL + k]
                for c in range(3):
                    gd[3 * t + c] += w * g[c] * rec_f[r, F_DRHO + c]
                    gs[3 * t + c] += w * g[c] * rec_f[r, F_DF0 + c]
                gr[t] += w * da
            w = rec_f[r, F_ENVA + k]
            if w != 0.0:
                t = rec_i[r, I_ENVA + k]
                for c in range(3):
                    ge[3 * t + c] += w * g[c] * rec_f[r, F_ENVA + 4 + c]
            w = rec_f[r, F_ENVB + k]
            if w != 0.0:
                t = rec_i[r, I_ENVB + k]
                for c in range(3):
                    ge[3 * t + c] += w * g[c] * rec_f[r, F_ENVB + 4 + c]


def scatter(records: PathRecords, dL_dpixel: np.ndarray, out: GradientBuffers) -> GradientBuffers:
    """Add the records' contribution for loss-derivative image ``dL_dpixel`` into ``out``."""
    dldi = np.ascontiguousarray(dL_dpixel, dtype=np.float64).reshape(-1, 3)
    flat = [getattr(out, n).reshape(-1) for n in MAP_NAMES]
    _scatter(records.rec_i, records.rec_f, records.pix0, records.spp, dldi, *flat)
    return out


def _chunk_pixels(view, spp, budget_bytes):
    per_pixel = max(1, spp) * RECORD_BYTES
    return max(1, min(view.width * view.height, budget_bytes // per_pixel))


def backward_render(scene, view: CameraView, maps: ReflectanceMaps, env: EnvironmentMap, dL_dpixel,
                    seed: int, spp: int, max_bounces: int = DEFAULT_BOUNCES, sampling_maps=None,
                    sampling_env=None, expected: Optional[RenderImage] = None,
                    budget_bytes: int = DEFAULT_BUDGET) -> GradientBuffers:
    """dL/dtexel for every reflectance and environment texel, by replay.

    Only the first path vertex's BRDF parameters and the environment texels
    it sees directly (light sample, BRDF-sampled miss, primary miss) receive
    derivatives; radiance from deeper bounces enters as a constant factor.
    ``expected`` is the forward render whose loss produced ``dL_dpixel``; if
    given, the replayed image must match it bit for bit.
    """
    scene = as_scene(scene)
    dldi = np.asarray(dL_dpixel, dtype=np.float64)
    if dldi.shape != (view.height, view.width, 3):
        raise ValueError(f"dL_dpixel must have shape {(view.height, view.width, 3)}, got {dldi.shape}")
    out = GradientBuffers.like(maps, env)
    npix = view.width * view.height
    chunk = _chunk_pixels(view, spp, budget_bytes)
    img = np.zeros((view.height, view.width, 3))
    traced = 0
    for pix0 in range(0, npix, chunk):
        pix1 = min(npix, pix0 + chunk)
        rec, _ = trace_records(scene, view, maps, env, spp, seed, max_bounces, sampling_maps, sampling_env,
                               pix0, pix1, img)
        traced += rec.rec_i.shape[0]
        scatter(rec, dldi, out)
    if traced != npix * spp:
        raise ReplayError(f"replayed {traced} paths, expected {npix * spp}")
    if expected is not None and not np.array_equal(expected.radiance, img):
        bad = int(np.count_nonzero((expected.radiance != img).any(-1)))
        raise ReplayError(f"replay diverged from the forward render on {bad} pixels")
    return out


def render_and_backward(scene, view: CameraView, maps: ReflectanceMaps, env: EnvironmentMap,
                        loss_fn: Callable, seed: int, spp: int, max_bounces: int = DEFAULT_BOUNCES,
                        sampling_env=None, budget_bytes: int = DEFAULT_BUDGET):
    """Forward render, loss and gradients in one traced pass when records fit ``budget_bytes``.

    ``loss_fn(image) -> (loss, dL/dpixel)``. Falls back to a forward render
    followed by a chunked replay otherwise. Returns (image, loss, buffers).
    """
    scene = as_scene(scene)
    npix = view.width * view.height
    if npix * spp * RECORD_BYTES <= budget_bytes:
        img = np.zeros((view.height, view.width, 3))
        rec, bad = trace_records(scene, view, maps, env, spp, seed, max_bounces, None, sampling_env, image=img)
        image = RenderImage(img, coverage_mask(scene, view), int(spp), bad)
        loss, dldi = loss_fn(image)
        grads = scatter(rec, dldi, GradientBuffers.like(maps, env))
        return image, loss, grads
    image = render(scene, view, maps, env, spp, seed, max_bounces, sampling_env=sampling_env)
    loss, dldi = loss_fn(image)
    grads = backward_render(scene, view, maps, env, dldi, seed, spp, max_bounces, sampling_env=sampling_env,
                            expected=image, budget_bytes=budget_bytes)
    return image, loss, grads


def footprint_mass(scene, view, maps, env, spp, seed, max_bounces=DEFAULT_BOUNCES):
    """Summed bilinear weights per texel over all samples: (reflectance (H, W), env (He, We))."""
    rec, _ = trace_records(scene, view, maps, env, spp, seed, max_bounces)
    h, w = maps.shape
    he, we = env.shape
    refl = np.bincount(rec.rec_i[:, I_REFL:I_REFL + 4].ravel(),
                       rec.rec_f[:, F_REFL:F_REFL + 4].ravel(), h * w).reshape(h, w)
    ids = np.concatenate([rec.rec_i[:, I_ENVA:I_ENVA + 4].ravel(), rec.rec_i[:, I_ENVB:I_ENVB + 4].ravel()])
    wts = np.concatenate([rec.rec_f[:, F_ENVA:F_ENVA + 4].ravel(), rec.rec_f[:, F_ENVB:F_ENVB + 4].ravel()])
    return refl, np.bincount(ids, wts, he * we).reshape(he, we)


# ---------------------------------------------------------------------------
# finite-difference certification


@dataclass
class GradcheckRow:
    map: str
    texel: int
    channel: int
    analytic: float
    fd: float
    rel_err: float


@dataclass
class GradcheckReport:
    rows: list = field(default_factory=list)
    tolerance: float = 1e-3
    step: float = 1e-3

    @property
    def rel_errors(self) -> np.ndarray:
        return np.array([r.rel_err for r in self.rows])

    @property
    def max_rel(self) -> float:
        return float(self.rel_errors.max()) if self.rows else 0.0

    @property
    def p95_rel(self) -> float:
        return float(np.percentile(self.rel_errors, 95)) if self.rows else 0.0

    @property
    def passed(self) -> bool:
        return self.p95_rel < self.tolerance

    def per_map(self):
        out = {}
        for name in MAP_NAMES:
            e = np.array([r.rel_err for r in self.rows if r.map == name])
            if e.size:
                out[name] = (int(e.size), float(e.max()), float(np.percentile(e, 95)))
        return out

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {state}: {len(self.rows)} texels, max rel err {self.max_rel:.3e}, "
                f"p95 rel err {self.p95_rel:.3e} (tolerance {self.tolerance:g}, step {self.step:g})")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["map", "texel", "channel", "analytic", "fd", "rel_err"])
            for r in self.rows:
                w.writerow([r.map, r.texel, r.channel, repr(r.analytic), repr(r.fd), repr(r.rel_err)])


def relative_error(a: float, b: float) -> float:
    den = max(abs(a), abs(b))
    return 0.0 if den == 0.0 else abs(a - b) / den


def _pick_texels(mass, n, rng):
    """Up to ``n`` texels drawn from those whose footprint mass is at least the median."""
    flat = mass.ravel()
    pos = np.flatnonzero(flat > 0)
    if pos.size == 0:
        return np.zeros(0, dtype=np.int64)
    good = pos[flat[pos] >= np.median(flat[pos])]
    return np.sort(rng.choice(good, size=min(n, good.size), replace=False))


def _perturbed(maps, env, name, texel, channel, delta):
    if name == "environment":
        rad = env.radiance.copy()
        rad.reshape(-1, 3)[texel, channel] += delta
        return maps, env.with_radiance(rad, keep_table=True)
    m = maps.copy()
    arr = m.get(name)
    if arr.ndim == 3:
        arr.reshape(-1, 3)[texel, channel] += delta
    else:
        arr.reshape(-1)[texel] += delta
    return m, env


def gradcheck(scene, view: CameraView, maps: ReflectanceMaps, env: EnvironmentMap, target,
              n_texels: int = 20, step: float = 1e-3, seed: int = 0, spp: int = 32,
              max_bounces: int = DEFAULT_BOUNCES, maps_to_check=MAP_NAMES, tolerance: float = 1e-3,
              mask=None) -> GradcheckReport:
    """Compare replayed gradients of the masked MSE against central differences.

    Both sides use the same seed and the unperturbed sampling densities, so the
    rendered loss is a smooth function of each texel and the Monte-Carlo noise
    cancels exactly.
    """
    from .optim import recon_loss

    if not step > 0 or not math.isfinite(step):
        raise ValueError("gradcheck step must be a positive finite number")
    scene = as_scene(scene)
    target = np.asarray(target, dtype=np.float64)
    mask = coverage_mask(scene, view) if mask is None else np.asarray(mask, dtype=bool)

    def loss_of(m, e):
        img = render(scene, view, m, e, spp, seed, max_bounces, sampling_maps=maps, sampling_env=env)
        return recon_loss(img, target, mask)

    base = render(scene, view, maps, env, spp, seed, max_bounces)
    _, dldi = recon_loss(base, target, mask)
    grads = backward_render(scene, view, maps, env, dldi, seed, spp, max_bounces, expected=base)
    refl_mass, env_mass = footprint_mass(scene, view, maps, env, spp, seed, max_bounces)
    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance, step=step)
    for name in maps_to_check:
        mass = env_mass if name == "environment" else refl_mass
        g = grads.get(name)
        for texel in _pick_texels(mass, n_texels, rng):
            channel = int(rng.integers(3)) if g.ndim == 3 else 0
            analytic = float(g.reshape(-1, 3)[texel, channel] if g.ndim == 3 else g.reshape(-1)[texel])
            lp, _ = loss_of(*_perturbed(maps, env, name, texel, channel, step))
            lm, _ = loss_of(*_perturbed(maps, env, name, texel, channel, -step))
            fd = (lp - lm) / (2 * step)
            report.rows.append(GradcheckRow(name, int(texel), channel, analytic, fd, relative_error(analytic, fd)))
    return report
