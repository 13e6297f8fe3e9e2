"""Scene description files (JSON) and their validation.

Schema, version 1::

    {
      "version": 1,
      "mesh": "mesh.obj",                      # OBJ; a .charts.json sidecar keeps the atlas
      "views": [{"image": "targets/view_00.exr" | null, "width": 64, "height": 64,
                 "fov": 40.0, "camera_to_world": [16 numbers, row-major]}],
      "environment": {"mode": "trainable", "height": 32, "width": 64}
                   | {"mode": "fixed", "path": "env.exr"},
      "map_resolution": 256,
      "optimizer": {"lr": 0.01, "spp": 64, "stage1_epochs": 60, "stage2_epochs": 60,
                    "mvcl": "per-view", "mvcl_maps": ["diffuse", "specular", "roughness"],
                    "max_bounces": 2, "background": false, "energy_cap": false},
      "seed": 0,
      "ground_truth": {"diffuse": ..., "specular": ..., "roughness": ..., "environment": ...}
    }

Relative paths resolve against the scene file's directory. Cameras look
down -Z of their frame with +Y up.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SCHEMA_VERSION = 1
DEFAULT_OPTIMIZER = {
    "lr": 0.01,
    "spp": 64,
    "stage1_epochs": 60,
    "stage2_epochs": 60,
    "mvcl": "per-view",
    "mvcl_maps": ["diffuse", "specular", "roughness"],
    "max_bounces": 2,
    "background": False,
    "energy_cap": False,
}
GT_KEYS = ("diffuse", "specular", "roughness", "environment")


class SceneValidationError(ValueError):
    def __init__(self, field_path: str, msg: str):
        super().__init__(f"{field_path}: {msg}")
        self.field_path = field_path


@dataclass
class ViewRecord:
    width: int
    height: int
    fov: float
    camera_to_world: list
    image: Optional[str] = None


@dataclass
class SceneDescription:
    mesh: str
    views: list
    environment: dict = field(default_factory=lambda: {"mode": "trainable", "height": 32, "width": 64})
    map_resolution: int = 256
    optimizer: dict = field(default_factory=lambda: dict(DEFAULT_OPTIMIZER))
    seed: int = 0
    ground_truth: Optional[dict] = None
    base_dir: str = "."
    version: int = SCHEMA_VERSION

    def resolve(self, rel: str) -> str:
        return rel if os.path.isabs(rel) else os.path.normpath(os.path.join(self.base_dir, rel))

    def to_dict(self) -> dict:
        d = {
            "version": self.version,
            "mesh": self.mesh,
            "views": [{"image": v.image, "width": v.width, "height": v.height, "fov": v.fov,
                       "camera_to_world": list(v.camera_to_world)} for v in self.views],
            "environment": dict(self.environment),
            "map_resolution": self.map_resolution,
            "optimizer": dict(self.optimizer),
            "seed": self.seed,
        }
        if self.ground_truth is not None:
            d["ground_truth"] = dict(self.ground_truth)
        return d

    def camera_views(self, load_images=True):
        """CameraView objects (view ids by position) with target images attached."""
        from .images import read_image
        from .renderer import CameraView

        out = []
        for i, v in enumerate(self.views):
            img = read_image(self.resolve(v.image)) if load_images and v.image else None
            out.append(CameraView(v.width, v.height, v.fov, np.array(v.camera_to_world).reshape(4, 4), img, i))
        return out

    def load_mesh(self):
        from .geometry import load_mesh

        return load_mesh(self.resolve(self.mesh))

    def env_shape(self):
        if self.environment["mode"] == "trainable":
            return self.environment["height"], self.environment["width"]
        from .images import read_exr

        return read_exr(self.resolve(self.environment["path"])).shape[:2]

    def load_ground_truth(self):
        """(ReflectanceMaps, EnvironmentMap) from the ground-truth block."""
        from .images import read_image
        from .lighting import EnvironmentMap
        from .reflectance import ReflectanceMaps

        if not self.ground_truth:
            raise SceneValidationError("ground_truth", "no ground truth recorded for this scene")
        gt = {k: read_image(self.resolve(self.ground_truth[k])) for k in GT_KEYS}
        return ReflectanceMaps(gt["diffuse"], gt["specular"], gt["roughness"]), EnvironmentMap(gt["environment"])


def _num(obj, key, path, kind=float, positive=False):
    if key not in obj:
        raise SceneValidationError(f"{path}.{key}" if path else key, "missing required field")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not float(v).is_integer()):
        raise SceneValidationError(f"{path}.{key}" if path else key, f"expected {kind.__name__}, got {v!r}")
    v = kind(v)
    if not math.isfinite(v) or (positive and v <= 0):
        raise SceneValidationError(f"{path}.{key}" if path else key, f"must be positive and finite, got {v!r}")
    return v


def _is_pow2(n):
    return n > 0 and (n & (n - 1)) == 0


def _file(desc_dir, rel, path):
    if not isinstance(rel, str) or not rel:
        raise SceneValidationError(path, "expected a file path")
    full = rel if os.path.isabs(rel) else os.path.join(desc_dir, rel)
    if not os.path.exists(full):
        raise SceneValidationError(path, f"file not found: {full}")
    return rel


def validate(data: dict, base_dir: str = ".") -> SceneDescription:
    """Check a parsed scene document, fill defaults, and verify referenced files."""
    if not isinstance(data, dict):
        raise SceneValidationError("<root>", "expected an object")
    version = data.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SceneValidationError("version", f"unsupported schema version {version!r}")
    if "mesh" not in data:
        raise SceneValidationError("mesh", "missing required field")
    mesh = _file(base_dir, data["mesh"], "mesh")
    views_in = data.get("views")
    if not isinstance(views_in, list) or not views_in:
        raise SceneValidationError("views", "need at least one view")
    views = []
    for i, v in enumerate(views_in):
        p = f"views[{i}]"
        if not isinstance(v, dict):
            raise SceneValidationError(p, "expected an object")
        w = _num(v, "width", p, int, True)
        h = _num(v, "height", p, int, True)
        fov = _num(v, "fov", p)
        if not 0 < fov < 180:
            raise SceneValidationError(f"{p}.fov", f"must lie in (0, 180), got {fov}")
        m = v.get("camera_to_world")
        if not isinstance(m, list) or len(m) != 16 or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in m):
            raise SceneValidationError(f"{p}.camera_to_world", "expected 16 finite numbers (row-major 4x4)")
        r = np.array(m, dtype=np.float64).reshape(4, 4)[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise SceneValidationError(f"{p}.camera_to_world", "rotation block is not orthonormal")
        img = v.get("image")
        if img is not None:
            _file(base_dir, img, f"{p}.image")
        views.append(ViewRecord(w, h, fov, [float(x) for x in m], img))
    env = copy.deepcopy(data.get("environment", {"mode": "trainable", "height": 32, "width": 64}))
    if not isinstance(env, dict):
        raise SceneValidationError("environment", "expected an object")
    mode = env.get("mode", "trainable")
    env["mode"] = mode
    if mode == "trainable":
        env.setdefault("height", 32)
        env.setdefault("width", 2 * env["height"])
        he = _num(env, "height", "environment", int, True)
        we = _num(env, "width", "environment", int, True)
        if we != 2 * he:
            raise SceneValidationError("environment.width", f"must equal 2 x height ({2 * he}), got {we}")
        env["height"], env["width"] = he, we
    elif mode == "fixed":
        if "path" not in env:
            raise SceneValidationError("environment.path", "missing required field")
        _file(base_dir, env["path"], "environment.path")
    else:
        raise SceneValidationError("environment.mode", f"expected 'trainable' or 'fixed', got {mode!r}")
    res = _num(data, "map_resolution", "", int, True) if "map_resolution" in data else 256
    if not _is_pow2(res):
        raise SceneValidationError("map_resolution", f"must be a positive power of two, got {res}")
    opt = dict(DEFAULT_OPTIMIZER)
    opt_in = data.get("optimizer", {})
    if not isinstance(opt_in, dict):
        raise SceneValidationError("optimizer", "expected an object")
    unknown = set(opt_in) - set(DEFAULT_OPTIMIZER)
    if unknown:
        raise SceneValidationError(f"optimizer.{sorted(unknown)[0]}", "unknown field")
    opt.update(opt_in)
    for key in ("lr",):
        opt[key] = _num(opt, key, "optimizer", float, True)
    for key in ("spp", "max_bounces"):
        opt[key] = _num(opt, key, "optimizer", int, True)
    for key in ("stage1_epochs", "stage2_epochs"):
        opt[key] = _num(opt, key, "optimizer", int)
        if opt[key] < 0:
            raise SceneValidationError(f"optimizer.{key}", "must be non-negative")
    if opt["mvcl"] not in ("off", "per-view", "global"):
        raise SceneValidationError("optimizer.mvcl", f"expected off, per-view or global, got {opt['mvcl']!r}")
    if not isinstance(opt["mvcl_maps"], list) or not set(opt["mvcl_maps"]) <= set(GT_KEYS) or not opt["mvcl_maps"]:
        raise SceneValidationError("optimizer.mvcl_maps", f"expected a non-empty subset of {list(GT_KEYS)}")
    for key in ("background", "energy_cap"):
        if not isinstance(opt[key], bool):
            raise SceneValidationError(f"optimizer.{key}", "expected true or false")
    seed = _num(data, "seed", "", int) if "seed" in data else 0
    gt = data.get("ground_truth")
    if gt is not None:
        if not isinstance(gt, dict):
            raise SceneValidationError("ground_truth", "expected an object")
        for k in GT_KEYS:
            if k not in gt:
                raise SceneValidationError(f"ground_truth.{k}", "missing required field")
            _file(base_dir, gt[k], f"ground_truth.{k}")
        gt = {k: gt[k] for k in GT_KEYS}
    return SceneDescription(mesh, views, env, res, opt, seed, gt, base_dir, version)


def load_scene(path) -> SceneDescription:
    path = str(path)
    if not os.path.exists(path):
        raise SceneValidationError("<file>", f"scene file not found: {path}")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneValidationError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return validate(data, os.path.dirname(os.path.abspath(path)))


def save_scene(desc: SceneDescription, path) -> None:
    with open(path, "w") as fh:
        json.dump(desc.to_dict(), fh, indent=2)
        fh.write("\n")
