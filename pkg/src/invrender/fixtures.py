"""Synthetic scenes with known ground truth: mesh, maps, sky, cameras and target renders."""

from __future__ import annotations

import json
import os

import numpy as np
from scipy import ndimage

from .geometry import load_mesh, save_obj
from .images import write_exr
from .lighting import EnvironmentMap, sky
from .primitives import revolved, uv_sphere
from .reflectance import ReflectanceMaps
from .renderer import CameraView, Scene, render
from .scene import DEFAULT_OPTIMIZER, SceneDescription, ViewRecord, save_scene
from .uv_atlas import bake_atlas, rasterize_atlas, write_chart_sidecar

KINDS = ("lambertian-sphere", "specular-vase-like", "mixed-material")

VASE_PROFILE = [(0.0, 1.0), (0.32, 1.0), (0.28, 0.85), (0.3, 0.65), (0.45, 0.4), (0.62, 0.05),
                (0.66, -0.3), (0.55, -0.65), (0.4, -0.85), (0.0, -0.85)]


def fixture_sky(height=32, width=64):
    """Training illumination: moderate dynamic range so that a constant-step optimizer can reach it."""
    return sky(height, width, sun_dir=(0.4, 0.7, 0.5), sun_color=(1.0, 0.92, 0.8), sun_strength=1.5,
               sun_size=0.3, zenith=(0.3, 0.45, 0.85), horizon=(0.8, 0.8, 0.75), ground=(0.3, 0.26, 0.22))


def fibonacci_directions(n):
    """``n`` near-uniform unit vectors; offset so that none coincides with a pole."""
    k = np.arange(n) + 0.5
    y = 1 - 2 * k / n
    r = np.sqrt(1 - y * y)
    phi = k * np.pi * (3 - np.sqrt(5))
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], 1)


def view_sphere(n_views, radius, width, height, fov):
    dirs = fibonacci_directions(n_views)
    return [CameraView.look_at(radius * d, (0, 0, 0), (0, 1, 0), width, height, fov, view_id=i)
            for i, d in enumerate(dirs)]


def _profile(kind):
    if kind == "specular-vase-like":
        prof = np.array(VASE_PROFILE)
        # densify the side so that shading normals stay smooth
        t = np.linspace(0, 1, len(prof))
        ts = np.concatenate([[0.0], np.linspace(t[1], t[-2], 24), [1.0]])
        return np.stack([np.interp(ts, t, prof[:, 0]), np.interp(ts, t, prof[:, 1])], 1)
    return None


def _soft_checker(p):
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    phi = np.arctan2(z, x)
    th = np.arccos(np.clip(y / np.maximum(np.linalg.norm(p, axis=-1), 1e-12), -1, 1))
    return 0.5 + 0.5 * np.tanh(3.0 * np.sin(2 * phi) * np.sin(3 * th))


def _bands(p, lo, hi, freq=2.5):
    return lo + (hi - lo) * (0.5 + 0.5 * np.tanh(3.0 * np.sin(freq * np.pi * p[..., 1])))


def ground_truth_maps(kind, pos):
    """Procedural parameters at surface positions ``pos`` (..., 3)."""
    s = _soft_checker(pos)[..., None]
    if kind == "lambertian-sphere":
        dif = (1 - s) * np.array([0.75, 0.35, 0.2]) + s * np.array([0.2, 0.45, 0.7])
        spec = np.zeros(pos.shape)
        rough = np.full(pos.shape[:-1], 0.5)
    elif kind == "specular-vase-like":
        dif = (1 - s) * np.array([0.12, 0.1, 0.08]) + s * np.array([0.25, 0.12, 0.06])
        spec = _bands(pos, 0.55, 0.8)[..., None] * np.array([0.95, 0.8, 0.6])
        rough = _bands(pos, 0.15, 0.3, 3.5)
    elif kind == "mixed-material":
        dif = (1 - s) * np.array([0.6, 0.3, 0.2]) + s * np.array([0.25, 0.4, 0.55])
        spec = _bands(pos, 0.04, 0.4)[..., None] * np.ones(3)
        rough = _bands(pos, 0.2, 0.55, 3.0)
    else:
        raise ValueError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")
    return dif, spec, rough


def bake_maps(kind, mesh, resolution):
    """Ground-truth texel grids; texels outside every chart copy their nearest covered texel."""
    tri, _, pos = rasterize_atlas(mesh, resolution, resolution)
    empty = tri < 0
    if empty.all():
        raise ValueError("atlas rasterization covered no texels")
    if empty.any():
        idx = ndimage.distance_transform_edt(empty, return_distances=False, return_indices=True)
        pos = pos[idx[0], idx[1]]
    dif, spec, rough = ground_truth_maps(kind, pos)
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731 - stored as float32 EXR
    return ReflectanceMaps(f32(dif), f32(spec), f32(rough))


def make_fixture(kind, out_dir, n_views=16, seed=0, image_size=64, map_resolution=256, env_height=16,
                 spp=1024, fov=60.0, distance=3.6, atlas_padding=2) -> SceneDescription:
    """Write a complete synthetic scene under ``out_dir`` and return its description.

    Layout: ``mesh.obj`` (+ chart sidecar), ``gt/*.exr``, ``targets/view_XX.exr``,
    ``scene.json``. Targets are rendered from the re-loaded mesh and the
    float32-rounded ground truth, so they can be reproduced bit for bit.

    Cameras sit at ``distance`` bounding radii with a wide field of view so
    that, across views, background pixels see nearly every environment texel;
    without that the albedo/illumination scale is not pinned down.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown fixture kind {kind!r}; expected one of {KINDS}")
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "targets"), exist_ok=True)
    prof = _profile(kind)
    base = uv_sphere(1.0, 32, 16) if prof is None else revolved(prof, 32)
    mesh, atlas = bake_atlas(base, map_resolution, atlas_padding)
    mesh_path = os.path.join(out_dir, "mesh.obj")
    save_obj(mesh, mesh_path)
    write_chart_sidecar(mesh_path, atlas, mesh.chart_ids)
    mesh = load_mesh(mesh_path)
    scene = Scene.from_mesh(mesh)

    gt = bake_maps(kind, mesh, map_resolution)
    env = EnvironmentMap(fixture_sky(env_height, 2 * env_height).astype(np.float32).astype(np.float64))
    gt_files = {k: f"gt/{k}.exr" for k in ("diffuse", "specular", "roughness", "environment")}
    for k in ("diffuse", "specular", "roughness"):
        write_exr(os.path.join(out_dir, gt_files[k]), gt.get(k))
    write_exr(os.path.join(out_dir, gt_files["environment"]), env.radiance)

    radius = distance * float(np.linalg.norm(mesh.vertices, axis=1).max())
    views = view_sphere(n_views, radius, image_size, image_size, fov)
    records = []
    for v in views:
        img = render(scene, v, gt, env, spp=spp, seed=seed)
        rel = f"targets/view_{v.view_id:02d}.exr"
        write_exr(os.path.join(out_dir, rel), img.radiance)
        records.append(ViewRecord(v.width, v.height, v.fov, v.camera_to_world.ravel().tolist(), rel))

    opt = dict(DEFAULT_OPTIMIZER)
    opt["background"] = True
    desc = SceneDescription("mesh.obj", records, {"mode": "trainable", "height": env_height, "width": 2 * env_height},
                            map_resolution, opt, seed, gt_files, os.path.abspath(out_dir))
    save_scene(desc, os.path.join(out_dir, "scene.json"))
    with open(os.path.join(out_dir, "fixture.json"), "w") as fh:
        json.dump({"kind": kind, "target_spp": spp, "seed": seed, "n_views": n_views}, fh, indent=2)
    return desc
