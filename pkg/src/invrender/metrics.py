"""Evaluation: masked image RMSE, per-map errors, and the relighting (entanglement) protocol."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lighting import EnvironmentMap, evening_sky, morning_sky
from .optim import recon_loss
from .renderer import DEFAULT_BOUNCES, as_scene, coverage_mask, render


class MissingGroundTruth(ValueError):
    pass


def eval_rmse(rendered, target, mask) -> float:
    """Root mean squared error over masked pixels and channels."""
    loss, _ = recon_loss(rendered, target, mask)
    return math.sqrt(loss)


def pooled_rmse(pairs) -> float:
    """RMSE over the union of masked pixels of several (rendered, target, mask) triples."""
    sq = 0.0
    n = 0
    for r, t, m in pairs:
        d = (np.asarray(r) - np.asarray(t))[np.asarray(m, dtype=bool)]
        sq += float(np.sum(d * d))
        n += d.size
    if n == 0:
        raise ValueError("empty mask: no pixels to evaluate")
    return math.sqrt(sq / n)


def map_rmse(maps, gt_maps, coverage=None):
    """Per-map RMSE restricted to texels seen by at least one view."""
    sel = np.ones(maps.shape, dtype=bool) if coverage is None else np.asarray(coverage) >= 1
    out = {}
    for name in ("diffuse", "specular", "roughness"):
        d = (maps.get(name) - gt_maps.get(name))[sel]
        out[name] = math.sqrt(float(np.mean(d * d))) if d.size else float("nan")
    return out


@dataclass
class MetricsRecord:
    masked_rmse: float
    map_rmse: dict = field(default_factory=dict)
    env_rmse: Optional[float] = None
    relight: Optional["RelightReport"] = None

    def rows(self):
        rows = [("masked_rmse", self.masked_rmse)]
        rows += [(f"{k}_map_rmse", v) for k, v in self.map_rmse.items()]
        if self.env_rmse is not None:
            rows.append(("environment_rmse", self.env_rmse))
        if self.relight is not None:
            rows += [("train_rmse", self.relight.train_rmse), ("relight_rmse", self.relight.relight_rmse),
                     ("relight_increase_pct", self.relight.increase_pct)]
        return rows

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.rows():
                w.writerow([k, repr(float(v))])


@dataclass
class RelightReport:
    train_rmse: float
    relight_rmse: float
    increase_pct: float
    per_view_train: list = field(default_factory=list)
    per_view_relight: list = field(default_factory=list)


def percent_increase(train: float, relight: float) -> float:
    if train == 0.0:
        return 0.0 if relight == 0.0 else math.inf
    return 100.0 * (relight - train) / train


def named_env(name, height=32, width=64) -> EnvironmentMap:
    """Relighting skies: ``morning`` or ``evening``."""
    if name == "morning":
        return EnvironmentMap(morning_sky(height, width))
    if name == "evening":
        return EnvironmentMap(evening_sky(height, width))
    raise ValueError(f"unknown environment {name!r}; expected 'morning' or 'evening'")


def eval_entanglement(scene, views, maps, env, env_new: EnvironmentMap, gt_maps, gt_env, spp: int = 64,
                      seed: int = 0, max_bounces: int = DEFAULT_BOUNCES) -> RelightReport:
    """RMSE growth when optimized reflectance is moved to new illumination.

    Training RMSE compares the optimized (maps, env) against ground truth under
    the ground-truth env; relighting RMSE compares optimized maps against
    ground-truth maps, both under ``env_new``. Both sides of each comparison
    share seed and spp, so Monte-Carlo noise largely cancels.
    """
    if gt_maps is None or gt_env is None:
        raise MissingGroundTruth("relighting evaluation needs ground-truth maps and environment")
    scene = as_scene(scene)
    tr, rl = [], []
    train_pairs, relight_pairs = [], []
    for v in views:
        mask = coverage_mask(scene, v)
        ref = render(scene, v, gt_maps, gt_env, spp, seed, max_bounces).radiance
        got = render(scene, v, maps, env, spp, seed, max_bounces).radiance
        ref_new = render(scene, v, gt_maps, env_new, spp, seed, max_bounces).radiance
        got_new = render(scene, v, maps, env_new, spp, seed, max_bounces).radiance
        tr.append(eval_rmse(got, ref, mask))
        rl.append(eval_rmse(got_new, ref_new, mask))
        train_pairs.append((got, ref, mask))
        relight_pairs.append((got_new, ref_new, mask))
    train = pooled_rmse(train_pairs)
    relight = pooled_rmse(relight_pairs)
    return RelightReport(train, relight, percent_increase(train, relight), tr, rl)
