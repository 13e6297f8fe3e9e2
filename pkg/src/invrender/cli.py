"""Command line entry point: ``invrender <subcommand> ...``.

Exit status: 0 on success, 1 on validation or acceptance failure, 2 on usage
errors. ``INVRENDER_THREADS`` caps the number of worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PARAM_FILES = ("diffuse", "specular", "roughness", "environment")


class CliError(Exception):
    """A failure that should be reported on stderr with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _load_scene(path):
    from .scene import load_scene

    return load_scene(path)


def _load_parameters(directory, desc):
    """(maps, env) from ``directory``/{diffuse,specular,roughness,environment}.exr."""
    from .images import read_image
    from .lighting import EnvironmentMap
    from .reflectance import ReflectanceMaps

    arrs = {}
    for k in PARAM_FILES:
        path = os.path.join(directory, f"{k}.exr")
        if k == "environment" and not os.path.exists(path) and desc.environment["mode"] == "fixed":
            path = desc.resolve(desc.environment["path"])
        if not os.path.exists(path):
            raise CliError(f"missing parameter image: {path}")
        arrs[k] = read_image(path)
    return ReflectanceMaps(arrs["diffuse"], arrs["specular"], arrs["roughness"]), EnvironmentMap(arrs["environment"])


def _parameters(args, desc):
    """Parameters from ``--params`` or, failing that, the scene's ground truth."""
    if args.params:
        return _load_parameters(args.params, desc)
    if desc.ground_truth:
        return desc.load_ground_truth()
    raise CliError("no --params directory given and the scene records no ground truth")


def _scene_and_views(desc, load_images=True):
    from .renderer import Scene

    return Scene.from_mesh(desc.load_mesh()), desc.camera_views(load_images)


def _select_views(views, spec):
    if spec is None:
        return views
    ids = sorted({int(x) for x in spec.split(",") if x.strip()})
    bad = [i for i in ids if not 0 <= i < len(views)]
    if bad:
        raise CliError(f"view index out of range: {bad[0]} (scene has {len(views)} views)")
    return [views[i] for i in ids]


def _write_rows(path, header, rows):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_bake_uv(args):
    from .geometry import load_mesh, save_obj
    from .uv_atlas import angle_distortion, bake_atlas, write_chart_sidecar

    mesh = load_mesh(args.input)
    out, atlas = bake_atlas(mesh, args.resolution, args.padding, args.cone_deg)
    save_obj(out, args.output)
    side = write_chart_sidecar(args.output, atlas, out.chart_ids)
    dist = np.concatenate([angle_distortion(c) for c in atlas.charts]) if atlas.charts else np.zeros(0)
    print(f"{len(atlas.charts)} charts, {out.n_faces} faces, mean angle distortion "
          f"{float(dist.mean()) if dist.size else 0.0:.3e}; wrote {args.output} and {side}")
    if args.plot:
        from .plotting import plot_atlas

        plot_atlas(out, args.plot)
    return EXIT_OK


def cmd_render(args):
    from .images import write_exr, write_png
    from .renderer import render

    desc = _load_scene(args.scene)
    maps, env = _parameters(args, desc)
    scene, views = _scene_and_views(desc, load_images=False)
    os.makedirs(args.out, exist_ok=True)
    bad = 0
    for v in _select_views(views, args.views):
        img = render(scene, v, maps, env, args.spp, args.seed, args.bounces)
        stem = os.path.join(args.out, f"view_{v.view_id:02d}")
        write_exr(stem + ".exr", img.radiance)
        write_png(stem + ".png", img.radiance, args.exposure)
        bad += img.nonfinite
    print(f"rendered {len(_select_views(views, args.views))} views to {args.out}"
          + (f" ({bad} non-finite samples dropped)" if bad else ""))
    return EXIT_OK


def cmd_optimize(args):
    from .optim import Hyperparams, Schedule, run_two_step

    desc = _load_scene(args.scene)
    opt = dict(desc.optimizer)
    for key in ("stage1_epochs", "stage2_epochs", "lr", "spp", "mvcl"):
        val = getattr(args, key)
        if val is not None:
            opt[key] = val
    if args.mvcl_maps is not None:
        opt["mvcl_maps"] = [m.strip() for m in args.mvcl_maps.split(",") if m.strip()]
    seed = desc.seed if args.seed is None else args.seed
    scene, views = _scene_and_views(desc)
    if any(v.image is None for v in views):
        raise CliError("every view needs a target image for optimization")
    fixed = desc.environment["mode"] == "fixed"
    he, _ = desc.env_shape()
    hyper = Hyperparams(lr=opt["lr"], spp=opt["spp"], seed=seed, max_bounces=opt["max_bounces"],
                        map_resolution=desc.map_resolution, env_height=he, background=opt["background"],
                        energy_cap=opt["energy_cap"], checkpoint_every=args.checkpoint_every)
    try:
        sched = Schedule(opt["stage1_epochs"], opt["stage2_epochs"], opt["mvcl"], tuple(opt["mvcl_maps"]),
                         train_env=not fixed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    env = None
    if fixed:
        from .images import read_image
        from .lighting import EnvironmentMap

        env = EnvironmentMap(read_image(desc.resolve(desc.environment["path"])))

    def progress(rep, maps, env_):
        if not args.quiet:
            print(f"epoch {rep.epoch:4d} stage {rep.stage} composite {rep.composite:.6g} rmse {rep.rmse:.5f}",
                  flush=True)

    if env is not None:
        from .optim import initial_parameters

        maps, _ = initial_parameters(hyper)
    else:
        maps = None
    maps, env, history = run_two_step(scene, views, sched, hyper, maps=maps, env=env, out_dir=args.out,
                                      callback=progress)
    if not args.no_plots:
        from .plotting import plot_loss_history, plot_maps

        plot_loss_history(history, os.path.join(args.out, "loss_history.png"))
        plot_maps(maps, env, os.path.join(args.out, "maps.png"))
    with open(os.path.join(args.out, "optimize.json"), "w") as fh:
        json.dump({"scene": os.path.abspath(args.scene), "seed": seed, "optimizer": opt}, fh, indent=2)
    print(f"final masked RMSE {history[-1].rmse:.5f}; parameters in {os.path.join(args.out, 'final')}"
          if history else "no epochs run")
    return EXIT_OK


def _relight_env(name, desc):
    from .images import read_image
    from .lighting import EnvironmentMap
    from .metrics import named_env

    if name in ("morning", "evening"):
        he, we = desc.env_shape()
        return named_env(name, he, we)
    if not os.path.exists(name):
        raise CliError(f"environment not found: {name} (use morning, evening, or an image path)")
    return EnvironmentMap(read_image(name))


def cmd_relight(args):
    from .images import write_exr, write_png
    from .renderer import render

    desc = _load_scene(args.scene)
    maps, _ = _parameters(args, desc)
    env = _relight_env(args.env, desc)
    scene, views = _scene_and_views(desc, load_images=False)
    os.makedirs(args.out, exist_ok=True)
    sel = _select_views(views, args.views)
    for v in sel:
        img = render(scene, v, maps, env, args.spp, args.seed, args.bounces)
        stem = os.path.join(args.out, f"view_{v.view_id:02d}")
        write_exr(stem + ".exr", img.radiance)
        write_png(stem + ".png", img.radiance, args.exposure)
    print(f"relit {len(sel)} views under {args.env} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .grad import MAP_NAMES, gradcheck
    from .optim import initial_parameters, Hyperparams

    desc = _load_scene(args.scene)
    scene, views = _scene_and_views(desc)
    if not 0 <= args.view < len(views):
        raise CliError(f"view index out of range: {args.view} (scene has {len(views)} views)")
    view = views[args.view]
    if view.image is None:
        raise CliError(f"view {args.view} has no target image")
    if args.params:
        maps, env = _load_parameters(args.params, desc)
    else:
        he, _ = desc.env_shape()
        maps, env = initial_parameters(Hyperparams(map_resolution=desc.map_resolution, env_height=he))
    names = tuple(m.strip() for m in args.maps.split(",")) if args.maps else MAP_NAMES
    bad = set(names) - set(MAP_NAMES)
    if bad:
        raise CliError(f"unknown map in --maps: {sorted(bad)[0]}")
    try:
        rep = gradcheck(scene, view, maps, env, view.image, args.n_texels, args.step, args.seed, args.spp,
                        args.bounces, names, args.tolerance)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if args.out:
        rep.to_csv(args.out)
        if not args.no_plots:
            from .plotting import plot_gradcheck

            plot_gradcheck(rep, os.path.splitext(args.out)[0] + ".png")
    else:
        print("map,texel,channel,analytic,fd,rel_err")
        for r in rep.rows:
            print(f"{r.map},{r.texel},{r.channel},{r.analytic!r},{r.fd!r},{r.rel_err!r}")
    for name, (cnt, mx, p95) in rep.per_map().items():
        print(f"  {name}: {cnt} texels, max {mx:.3e}, p95 {p95:.3e}")
    print(rep.summary())
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_fixture(args):
    from .fixtures import make_fixture

    desc = make_fixture(args.kind, args.out, n_views=args.views, seed=args.seed, image_size=args.image_size,
                        map_resolution=args.map_resolution, env_height=args.env_height, spp=args.spp)
    print(f"wrote {args.kind} fixture with {len(desc.views)} views to {os.path.join(args.out, 'scene.json')}")
    return EXIT_OK


def cmd_eval(args):
    from .metrics import MetricsRecord, eval_entanglement, map_rmse, pooled_rmse
    from .renderer import coverage_mask, render, texel_coverage

    desc = _load_scene(args.scene)
    maps, env = _load_parameters(args.params, desc)
    scene, views = _scene_and_views(desc)
    os.makedirs(args.out, exist_ok=True)
    pairs = []
    rows = []
    renders = []
    for v in views:
        if v.image is None:
            continue
        img = render(scene, v, maps, env, args.spp, args.seed, desc.optimizer["max_bounces"]).radiance
        mask = coverage_mask(scene, v)
        pairs.append((img, v.image, mask))
        rows.append([v.view_id, repr(pooled_rmse([(img, v.image, mask)]))])
        renders.append((img, v.image))
    if not pairs:
        raise CliError("no view has a target image to evaluate against")
    rec = MetricsRecord(pooled_rmse(pairs))
    gt = None
    if desc.ground_truth:
        gt = desc.load_ground_truth()
        cov = texel_coverage(scene, views, maps.shape, 16, args.seed)
        rec.map_rmse = map_rmse(maps, gt[0], cov)
        if env.shape == gt[1].shape:
            rec.env_rmse = float(np.sqrt(np.mean((env.radiance - gt[1].radiance) ** 2)))
        if args.relight_env != "none":
            env_new = _relight_env(args.relight_env, desc)
            rec.relight = eval_entanglement(scene, views, maps, env, env_new, gt[0], gt[1], args.spp, args.seed,
                                            desc.optimizer["max_bounces"])
    elif args.relight_env != "none" and args.require_gt:
        raise CliError("relighting evaluation needs ground truth; the scene records none")
    rec.to_csv(os.path.join(args.out, "metrics.csv"))
    _write_rows(os.path.join(args.out, "per_view_rmse.csv"), ["view", "masked_rmse"], rows)
    if not args.no_plots:
        from .plotting import plot_maps, plot_renders

        k = min(4, len(renders))
        plot_renders([r[0] for r in renders[:k]] + [r[1] for r in renders[:k]],
                     os.path.join(args.out, "renders.png"),
                     [f"est {i}" for i in range(k)] + [f"target {i}" for i in range(k)])
        plot_maps(maps, env, os.path.join(args.out, "maps.png"), *(gt if gt else (None, None)))
    for name, val in rec.rows():
        print(f"{name},{val!r}")
    if args.max_rmse is not None and rec.masked_rmse >= args.max_rmse:
        print(f"masked RMSE {rec.masked_rmse:.5f} is not below --max-rmse {args.max_rmse}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    from .fixtures import KINDS

    p = _Parser(prog="invrender", description="Inverse rendering of reflectance maps and environment lighting.")
    sub = p.add_subparsers(dest="command", metavar="{bake-uv,render,optimize,relight,gradcheck,fixture,eval}",
                           parser_class=_Parser)

    s = sub.add_parser("bake-uv", help="segment, flatten and pack a UV atlas for an OBJ mesh")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--resolution", type=_positive_int, default=256)
    s.add_argument("--padding", type=_nonneg_int, default=2, help="gutter between charts, in texels")
    s.add_argument("--cone-deg", type=_positive_float, default=120.0, help="maximum normal-cone angle per chart")
    s.add_argument("--plot", metavar="PNG", help="also draw the chart layout")
    s.set_defaults(func=cmd_bake_uv)

    def render_flags(s, spp=64):
        s.add_argument("--params", metavar="DIR", help="directory with diffuse/specular/roughness/environment .exr "
                                                       "(default: the scene's ground truth)")
        s.add_argument("--out", required=True, metavar="DIR")
        s.add_argument("--spp", type=_positive_int, default=spp)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--bounces", type=_positive_int, default=2)
        s.add_argument("--views", metavar="I,J,...", help="subset of view indices")
        s.add_argument("--exposure", type=_positive_float, default=1.0, help="PNG preview exposure")

    s = sub.add_parser("render", help="render every view of a scene to EXR and PNG")
    s.add_argument("scene")
    render_flags(s)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("optimize", help="two-stage estimation of maps and environment")
    s.add_argument("scene")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--stage1-epochs", type=_nonneg_int)
    s.add_argument("--stage2-epochs", type=_nonneg_int)
    s.add_argument("--lr", type=_positive_float)
    s.add_argument("--spp", type=_positive_int)
    s.add_argument("--mvcl", choices=("off", "per-view", "global"))
    s.add_argument("--mvcl-maps", metavar="NAMES", help="comma-separated subset of diffuse,specular,roughness,"
                                                         "environment")
    s.add_argument("--seed", type=int)
    s.add_argument("--checkpoint-every", type=_nonneg_int, default=0, metavar="N")
    s.add_argument("--no-plots", action="store_true")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("relight", help="render estimated maps under a different environment")
    s.add_argument("scene")
    render_flags(s)
    s.add_argument("--env", default="evening", help="morning, evening, or an EXR/HDR path")
    s.set_defaults(func=cmd_relight)

    s = sub.add_parser("gradcheck", help="compare replayed gradients with central differences")
    s.add_argument("scene")
    s.add_argument("--params", metavar="DIR", help="parameters to linearize around (default: optimizer init)")
    s.add_argument("--view", type=_nonneg_int, default=0)
    s.add_argument("--n-texels", type=_positive_int, default=20)
    s.add_argument("--step", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spp", type=_positive_int, default=32)
    s.add_argument("--bounces", type=_positive_int, default=2)
    s.add_argument("--maps", metavar="NAMES", help="comma-separated maps to check (default: all four)")
    s.add_argument("--tolerance", type=_positive_float, default=1e-3)
    s.add_argument("--out", metavar="CSV", help="report path (default: print to stdout)")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("fixture", help="generate a synthetic scene with ground truth")
    s.add_argument("kind", choices=KINDS)
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--views", type=_positive_int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-size", type=_positive_int, default=64)
    s.add_argument("--map-resolution", type=_positive_int, default=256)
    s.add_argument("--env-height", type=_positive_int, default=16)
    s.add_argument("--spp", type=_positive_int, default=1024)
    s.set_defaults(func=cmd_fixture)

    s = sub.add_parser("eval", help="masked RMSE, per-map RMSE and relighting metrics")
    s.add_argument("scene")
    s.add_argument("--params", required=True, metavar="DIR")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--spp", type=_positive_int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--relight-env", default="evening", help="morning, evening, an image path, or none")
    s.add_argument("--require-gt", action="store_true", help="fail when the scene has no ground truth")
    s.add_argument("--max-rmse", type=float, help="exit 1 unless masked RMSE is below this")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("invrender: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    from .geometry import DegenerateMeshError, MeshFormatError
    from .scene import SceneValidationError

    try:
        return args.func(args)
    except (CliError, SceneValidationError, MeshFormatError, DegenerateMeshError, FileNotFoundError) as exc:
        print(f"invrender {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
