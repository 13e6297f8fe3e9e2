"""Losses, multi-view gradient consistency, Adam with projection, and the two-stage driver."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .grad import MAP_NAMES, GradientBuffers, render_and_backward
from .lighting import EnvironmentMap
from .reflectance import ALPHA_MIN, ReflectanceMaps
from .renderer import DEFAULT_BOUNCES, RenderImage, as_scene, background_mask, coverage_mask, texel_coverage

REFLECTANCE = ("diffuse", "specular", "roughness")
STAGE1 = ("diffuse", "environment")
STAGE2 = MAP_NAMES
MVCL_MODES = ("off", "per-view", "global")


class OptimizationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


def recon_loss(rendered, target, mask):
    """Masked mean squared error and its per-pixel derivative image."""
    r = rendered.radiance if isinstance(rendered, RenderImage) else np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if r.shape != t.shape or r.shape[:2] != m.shape:
        raise ValueError(f"shape mismatch: rendered {r.shape}, target {t.shape}, mask {m.shape}")
    count = int(m.sum()) * r.shape[2]
    if count == 0:
        raise ValueError("empty mask: no pixels to supervise")
    diff = np.where(m[..., None], r - t, 0.0)
    loss = float(np.sum(diff * diff) / count)
    return loss, 2.0 * diff / count


def mvcl(per_view_grads: Sequence[GradientBuffers], coverage, map_subset=REFLECTANCE):
    """Normalized cross-view gradient variance: (per-view scalars, global scalar).

    Each view's buffers are divided by that view's largest absolute entry over
    ``map_subset``; the unbiased variance across views is averaged over the
    texel-channels seen by at least two views and divided by its bound N/(N-1).
    """
    n = len(per_view_grads)
    if n < 2:
        raise ValueError("mvcl needs at least two views")
    sel = np.asarray(coverage) >= 2
    norm = [_normalized_selection(g, sel, map_subset) for g in per_view_grads]
    stack = np.stack(norm)
    if stack.shape[1] == 0:
        return np.zeros(n), 0.0
    # mean taken as an offset from view 0 so that identical views give exactly zero
    mean = stack[0] + (stack - stack[0]).mean(0)
    dev = (stack - mean) ** 2 / (n - 1)
    bound = n / (n - 1)
    per_view = np.clip(dev.mean(1) / bound, 0.0, 1.0)
    glob = float(np.clip(dev.sum(0).mean() / bound, 0.0, 1.0))
    return per_view, glob


def _view_scale(g: GradientBuffers, map_subset) -> float:
    m = g.max_abs(map_subset)
    return 1.0 / m if m > 0 else 0.0


def _normalized_selection(g: GradientBuffers, sel, map_subset) -> np.ndarray:
    s = _view_scale(g, map_subset)
    parts = []
    for name in map_subset:
        arr = g.get(name)
        if name == "environment":
            parts.append(arr.ravel() * s)
        else:
            parts.append(arr[sel].ravel() * s)
    return np.concatenate(parts) if parts else np.zeros(0)


def mvcl_streaming(grad_fn: Callable[[int], GradientBuffers], n: int, coverage, map_subset=REFLECTANCE,
                   mode="per-view"):
    """Two-pass MVCL for when per-view buffers do not fit in memory.

    ``grad_fn(i)`` must return view i's buffers deterministically. Returns
    (per-view scalars, global scalar, combined weighted gradient sum).
    """
    if n < 2:
        raise ValueError("mvcl needs at least two views")
    sel = np.asarray(coverage) >= 2
    first = None
    offset = None
    for i in range(n):
        v = _normalized_selection(grad_fn(i), sel, map_subset)
        if first is None:
            first, offset = v, np.zeros_like(v)
        else:
            offset += v - first
    mean = first + offset / n
    bound = n / (n - 1)
    per_view = np.zeros(n)
    dev_sum = np.zeros_like(mean)
    combined = None
    for i in range(n):
        g = grad_fn(i)
        d = (_normalized_selection(g, sel, map_subset) - mean) ** 2 / (n - 1)
        dev_sum += d
        per_view[i] = min(max(d.mean() / bound, 0.0), 1.0) if d.size else 0.0
        w = math.exp(per_view[i]) if mode == "per-view" else 1.0
        combined = g.scaled(w) if combined is None else combined + g.scaled(w)
    glob = float(np.clip(dev_sum.mean() / bound, 0.0, 1.0)) if dev_sum.size else 0.0
    if mode == "global":
        combined = combined.scaled(math.exp(glob))
    return per_view, glob, combined.scaled(1.0 / n)


def composite_loss(recon, mvcl_values, mode="per-view"):
    """Loss modulated by exp(MVCL); returns (L, detached per-view weights).

    The gradient of L is (1/N) sum_i weight_i * grad(recon_i).
    """
    r = np.asarray(recon, dtype=np.float64)
    if mode == "per-view":
        w = np.exp(np.asarray(mvcl_values, dtype=np.float64))
        return float(np.mean(r * w)), w
    if mode == "global":
        m = float(np.asarray(mvcl_values, dtype=np.float64).reshape(-1)[0]) if np.ndim(mvcl_values) else float(mvcl_values)
        w = math.exp(m)
        return float(np.mean(r) * w), np.full(r.shape, w)
    if mode == "off":
        return float(np.mean(r)), np.ones(r.shape)
    raise ValueError(f"unknown mvcl mode {mode!r}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments per parameter grid."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    skipped: int = 0
    energy_cap: bool = False

    @property
    def steps(self) -> int:
        return max(self.t.values(), default=0)


def project(maps: ReflectanceMaps, env_radiance: np.ndarray, energy_cap=False) -> None:
    """Clamp parameters to their valid ranges in place."""
    np.clip(maps.diffuse, 0.0, 1.0, out=maps.diffuse)
    np.clip(maps.specular, 0.0, 1.0, out=maps.specular)
    np.clip(maps.roughness, ALPHA_MIN, 1.0, out=maps.roughness)
    np.maximum(env_radiance, 0.0, out=env_radiance)
    if energy_cap:
        np.minimum(maps.specular, 1.0 - maps.diffuse, out=maps.specular)


def step(state: OptimizerState, maps: ReflectanceMaps, env: EnvironmentMap, grads: GradientBuffers,
         trainable=MAP_NAMES):
    """One bias-corrected Adam update of the trainable grids, then projection.

    Non-finite gradient entries leave their parameter and moments untouched
    and are tallied in ``state.skipped``. Returns (maps, env) updated in place.
    """
    for name in trainable:
        p = env.radiance if name == "environment" else maps.get(name)
        g = grads.get(name)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        ok = np.isfinite(g)
        state.skipped += int(g.size - ok.sum())
        g = np.where(ok, g, 0.0)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        t = state.t.get(name, 0) + 1
        state.t[name] = t
        m[ok] = state.beta1 * m[ok] + (1 - state.beta1) * g[ok]
        v[ok] = state.beta2 * v[ok] + (1 - state.beta2) * g[ok] ** 2
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        upd = state.lr * mhat / (np.sqrt(vhat) + state.eps)
        p[ok] -= upd[ok]
    project(maps, env.radiance, state.energy_cap)
    return maps, env


# ---------------------------------------------------------------------------
# two-stage driver


@dataclass
class Schedule:
    stage1_epochs: int = 60
    stage2_epochs: int = 60
    mvcl_mode: str = "per-view"
    mvcl_maps: tuple = REFLECTANCE
    train_env: bool = True

    def __post_init__(self):
        if self.mvcl_mode not in MVCL_MODES:
            raise ValueError(f"mvcl mode must be one of {MVCL_MODES}")
        bad = set(self.mvcl_maps) - set(MAP_NAMES)
        if bad:
            raise ValueError(f"unknown maps in mvcl subset: {sorted(bad)}")
        self.mvcl_maps = tuple(self.mvcl_maps)

    def trainable(self, stage: int):
        names = STAGE1 if stage == 1 else STAGE2
        return names if self.train_env else tuple(n for n in names if n != "environment")

    @property
    def total(self) -> int:
        return self.stage1_epochs + self.stage2_epochs


@dataclass
class Hyperparams:
    lr: float = 0.01
    spp: int = 64
    seed: int = 0
    max_bounces: int = DEFAULT_BOUNCES
    map_resolution: int = 256
    env_height: int = 32
    init_diffuse: float = 0.25
    init_specular: float = 0.04
    init_roughness: float = 0.5
    init_env: float = 0.5
    background: bool = False
    energy_cap: bool = False
    coverage_spp: int = 16
    checkpoint_every: int = 0
    memory_budget: int = 512 * 2**20


@dataclass
class LossReport:
    epoch: int
    stage: int
    recon: np.ndarray
    mvcl: np.ndarray
    mvcl_global: float
    composite: float
    rmse: float
    skipped: int = 0

    def row(self):
        return ([self.epoch, self.stage] + [repr(float(x)) for x in self.recon]
                + [repr(float(x)) for x in self.mvcl] + [repr(self.mvcl_global), repr(self.composite), repr(self.rmse)])


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1, np.uint32)[0])


def initial_parameters(h: Hyperparams):
    maps = ReflectanceMaps.constant(h.map_resolution, h.init_diffuse, h.init_specular, h.init_roughness)
    env = EnvironmentMap.constant(h.init_env, h.env_height, 2 * h.env_height)
    return maps, env


def write_history(path, history: Sequence[LossReport]) -> None:
    n = len(history[0].recon) if history else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "stage"] + [f"recon_{i}" for i in range(n)] + [f"mvcl_{i}" for i in range(n)]
                   + ["mvcl_global", "composite", "rmse"])
        for rep in history:
            w.writerow(rep.row())


def write_checkpoint(directory, maps: ReflectanceMaps, env: EnvironmentMap) -> None:
    from .images import write_exr

    os.makedirs(directory, exist_ok=True)
    write_exr(os.path.join(directory, "diffuse.exr"), maps.diffuse)
    write_exr(os.path.join(directory, "specular.exr"), maps.specular)
    write_exr(os.path.join(directory, "roughness.exr"), maps.roughness)
    write_exr(os.path.join(directory, "environment.exr"), env.radiance)


def run_two_step(scene, views, schedule: Schedule, hyper: Optional[Hyperparams] = None,
                 maps: Optional[ReflectanceMaps] = None, env: Optional[EnvironmentMap] = None,
                 out_dir=None, callback=None):
    """Stage 1 fits diffuse + env to the plain loss, stage 2 all maps to the composite loss.

    ``views`` carry their target radiance in ``view.image``. Returns
    (maps, env, history). Writes ``loss_history.csv`` and checkpoints under
    ``out_dir`` when given.
    """
    hyper = hyper or Hyperparams()
    scene = as_scene(scene)
    views = list(views)
    if schedule.mvcl_mode != "off" and schedule.stage2_epochs > 0 and len(views) < 2:
        raise ValueError("MVCL needs at least two views")
    if maps is None or env is None:
        m0, e0 = initial_parameters(hyper)
        maps = m0 if maps is None else maps.copy()
        env = e0 if env is None else EnvironmentMap(env.radiance.copy())
    else:
        maps = maps.copy()
        env = EnvironmentMap(env.radiance.copy())
    targets = [np.asarray(v.image, dtype=np.float64) for v in views]
    cover = [coverage_mask(scene, v) for v in views]
    loss_masks = [c | background_mask(scene, v) if hyper.background else c for c, v in zip(cover, views)]
    tex_cov = texel_coverage(scene, views, maps.shape, hyper.coverage_spp, hyper.seed)
    state = OptimizerState(lr=hyper.lr, energy_cap=hyper.energy_cap)
    n = len(views)
    per_view_bytes = 8 * (maps.diffuse.size * 2 + maps.roughness.size + env.radiance.size)
    store = per_view_bytes * n <= hyper.memory_budget
    history = []
    bad_epochs = 0
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(schedule.total):
        stage = 1 if epoch < schedule.stage1_epochs else 2
        trainable = schedule.trainable(stage)
        seed = epoch_seed(hyper.seed, epoch)
        env.rebuild()
        use_mvcl = stage == 2 and schedule.mvcl_mode != "off"
        recon = np.zeros(n)
        sq_err = 0.0
        count = 0

        def view_grad(i, keep_stats=False):
            nonlocal sq_err, count
            v = views[i]

            def loss_fn(img):
                return recon_loss(img, targets[i], loss_masks[i])

            img, loss, g = render_and_backward(scene, v, maps, env, loss_fn, seed, hyper.spp, hyper.max_bounces)
            if keep_stats:
                recon[i] = loss
                d = (img.radiance - targets[i])[cover[i]]
                sq_err += float(np.sum(d * d))
                count += d.size
            return g

        pv = np.zeros(n)
        glob = 0.0
        if use_mvcl and not store:
            first = [True] * n

            def streamed(i):
                keep = first[i]
                first[i] = False
                return view_grad(i, keep)

            pv, glob, combined = mvcl_streaming(streamed, n, tex_cov, schedule.mvcl_maps, schedule.mvcl_mode)
            comp, _ = composite_loss(recon, pv if schedule.mvcl_mode == "per-view" else glob, schedule.mvcl_mode)
        else:
            grads = [view_grad(i, True) for i in range(n)]
            if use_mvcl:
                pv, glob = mvcl(grads, tex_cov, schedule.mvcl_maps)
                comp, weights = composite_loss(recon, pv if schedule.mvcl_mode == "per-view" else glob,
                                               schedule.mvcl_mode)
            else:
                comp, weights = composite_loss(recon, np.zeros(n), "off")
            combined = grads[0].scaled(weights[0])
            for i in range(1, n):
                combined = combined + grads[i].scaled(weights[i])
            combined = combined.scaled(1.0 / n)

        rmse = math.sqrt(sq_err / count) if count else float("nan")
        if math.isfinite(comp):
            bad_epochs = 0
            step(state, maps, env, combined, trainable)
        else:
            bad_epochs += 1
            if bad_epochs >= 3:
                raise OptimizationError(f"loss non-finite for 3 consecutive epochs (last epoch {epoch}, "
                                        f"per-view recon {recon.tolist()})")
        rep = LossReport(epoch, stage, recon.copy(), pv.copy(), glob, comp, rmse, state.skipped)
        history.append(rep)
        if callback is not None:
            callback(rep, maps, env)
        if out_dir is not None:
            write_history(os.path.join(out_dir, "loss_history.csv"), history)
            if hyper.checkpoint_every and (epoch + 1) % hyper.checkpoint_every == 0:
                write_checkpoint(os.path.join(out_dir, "checkpoints", f"epoch_{epoch + 1:04d}"), maps, env)
    if out_dir is not None:
        write_checkpoint(os.path.join(out_dir, "final"), maps, env)
    return maps, env, history
