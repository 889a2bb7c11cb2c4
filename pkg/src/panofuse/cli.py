"""Command-line entry point: generate, render, eval, ablate, depthfill and inspect.

World options are read from ``--config`` (JSON) first; any world flag given
on the command line then overrides the file value of the same key.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import plotting
from .evalkit import (DEPTHFILL_METHODS, MODES, EvalParams, TrajectorySpec, depthfill_compare,
                      depthfill_harness, depthfill_ordering, format_table, hole_mask, report_json,
                      sample_trajectories)
from .formats import FormatError, depth_to_pfm, image_to_png, mask_to_png, pfm_to_depth
from .geom import Pose
from .ldp import StageError
from .oracle import OracleError, SyntheticScene
from .render import PerspectiveIntrinsics, SplatParams, estimate_footprints, render_perspective
from .world import ConfigError, WorldConfig, build_world, load_world, save_world, scene_of

log = logging.getLogger("panofuse")

_HELP = {
    "n": "number of panoramas along the trajectory (>= 2)",
    "lam": "spacing between panoramas",
    "r_mode": "cylinder radius for the opening: auto, none or a number",
    "oracle": "synthetic or http",
    "endpoint": "base URL of the HTTP oracle service",
    "jobs": "worker threads for per-pose rendering",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("world configuration (overrides --config)")
    g.add_argument("--config", help="JSON file with world configuration keys")
    for f in dataclasses.fields(WorldConfig):
        flag = "--" + f.name.replace("_", "-")
        kw = {"dest": f"cfg_{f.name}", "default": None, "help": _HELP.get(f.name)}
        if isinstance(f.default, bool):
            g.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif isinstance(f.default, tuple):
            g.add_argument(flag, type=float, nargs=2, metavar=("LOW", "HIGH"), **kw)
        elif isinstance(f.default, (int, float)):
            g.add_argument(flag, type=type(f.default), **kw)
        else:
            g.add_argument(flag, **kw)


def config_from_args(args) -> WorldConfig:
    """File values, then explicit flags; unset flags leave the file (or default) alone."""
    data = {}
    if getattr(args, "config", None):
        base = WorldConfig.load(args.config)
        data = base.to_dict()
    for f in dataclasses.fields(WorldConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            data[f.name] = tuple(v) if isinstance(v, list) else v
    return WorldConfig.from_dict(data)


def _trajectory_flags(p: argparse.ArgumentParser, count: int = 20) -> None:
    p.add_argument("--count", type=int, default=count, help="poses per trajectory mode")
    p.add_argument("--traj-seed", type=int, default=0)
    p.add_argument("--frame-width", type=int, default=128)
    p.add_argument("--frame-height", type=int, default=128)
    p.add_argument("--fov", type=float, default=90.0, help="horizontal field of view, degrees")
    p.add_argument("--lateral-fraction", type=float, default=0.0,
                   help="sideways camera offset as a fraction of trajectory length")


def _eval_params(args, modes=MODES) -> EvalParams:
    return EvalParams(width=args.frame_width, height=args.frame_height, fov=np.deg2rad(args.fov),
                      count=args.count, seed=args.traj_seed, modes=tuple(modes),
                      lateral_fraction=args.lateral_fraction)


def _write(path, data: bytes | str) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(data)


def _dump_debug(world, out_dir: str) -> list[str]:
    """One PNG/PFM per intermediate raster of the pipeline."""
    d = os.path.join(out_dir, "debug")
    os.makedirs(d, exist_ok=True)
    files = []

    def put(name, data):
        _write(os.path.join(d, name), data)
        files.append(name)

    for i, (I, D) in enumerate(world.panoramas):
        put(f"pano_{i}.png", image_to_png(I))
        put(f"pano_{i}_depth.pfm", depth_to_pfm(D))
    for i, ldp in enumerate(world.ldps):
        if ldp is None:
            continue
        put(f"ldp_{i}_fg_mask.png", mask_to_png(ldp.fg_mask))
        put(f"ldp_{i}_bg.png", image_to_png(ldp.bg_image))
        put(f"ldp_{i}_bg_depth.pfm", depth_to_pfm(ldp.bg_depth))
    for i, block in enumerate(world.fills):
        for key, arr in block.debug.items():
            arr = np.asarray(arr)
            if arr.dtype == bool:
                put(f"fill_{i}_{key}.png", mask_to_png(arr))
            elif arr.ndim == 3:
                put(f"fill_{i}_{key}.png", image_to_png(arr))
            else:
                put(f"fill_{i}_{key}.pfm", depth_to_pfm(arr))
        if block.debug:
            plotting.plot_depth_panel(block.debug, os.path.join(d, f"fill_{i}_panel.png"))
    return files


def cmd_generate(args) -> int:
    cfg = config_from_args(args)
    world = build_world(cfg, keep_artifacts=args.debug)
    save_world(world, args.out)
    if args.debug:
        files = _dump_debug(world, args.out)
        log.info("wrote %d debug rasters", len(files))
    summary = {"points": len(world.cloud), "partial_points": world.partial_count,
               "fill_points": world.fill_counts, "scale": world.scale, "out": args.out}
    print(json.dumps(summary, indent=2))
    return 0


def _load_world_or_fail(path):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"world directory {path!r} not found")
    return load_world(path)


def cmd_render(args) -> int:
    world = _load_world_or_fail(args.world)
    os.makedirs(args.out, exist_ok=True)
    spec = TrajectorySpec(args.mode, args.count, args.traj_seed, fov=np.deg2rad(args.fov),
                          lateral_fraction=args.lateral_fraction)
    K = PerspectiveIntrinsics(args.frame_width, args.frame_height, spec.fov)
    splat = SplatParams(footprints=estimate_footprints(world.cloud, args.footprint_k, args.footprint_scale))
    manifest = {"mode": args.mode, "seed": args.traj_seed, "width": args.frame_width,
                "height": args.frame_height, "fov": spec.fov, "frames": []}
    for i, P in enumerate(sample_trajectories(spec, world.poses)):
        out = render_perspective(world.cloud, P, K, splat)
        names = {"image": f"frame_{i:04d}.png", "depth": f"depth_{i:04d}.pfm",
                 "visibility": f"vis_{i:04d}.png"}
        _write(os.path.join(args.out, names["image"]), image_to_png(out.image))
        _write(os.path.join(args.out, names["depth"]), depth_to_pfm(out.depth))
        _write(os.path.join(args.out, names["visibility"]), mask_to_png(out.visibility))
        if out.coverage == 0:
            log.warning("frame %d: coverage 0", i)
        manifest["frames"].append({"index": i, "pose": P.matrix().tolist(),
                                   "coverage": out.coverage, **names})
    _write(os.path.join(args.out, "frames.json"), report_json(manifest))
    print(f"{len(manifest['frames'])} frames -> {args.out}")
    return 0


def _coverage_rows(name: str, report: dict) -> dict:
    row = {"method": name}
    for m, e in report.items():
        row[f"{m}_brisque"] = e.get("brisque")
        row[f"{m}_coverage"] = e["coverage_mean"]
    return row


def cmd_eval(args) -> int:
    world = _load_world_or_fail(args.world)
    os.makedirs(args.out, exist_ok=True)
    spec = scene_of(world)
    scene = SyntheticScene(spec) if spec is not None and not args.no_depth else None
    report = _evaluate(world, _eval_params(args), scene, args.jobs)
    _write(os.path.join(args.out, "eval.json"), report_json(report))
    cols = ["method"] + [f"{m}_{k}" for m in report for k in ("brisque", "coverage")]
    table = format_table([_coverage_rows("world", report)], cols)
    depth_rows = [{"mode": m, **e["depth"]} for m, e in report.items() if "depth" in e]
    if depth_rows:
        table += "\n\n" + format_table(depth_rows, ["mode", "abs_rel", "rmse", "si_rmse",
                                                    "delta1", "delta2", "delta3"])
    _write(os.path.join(args.out, "eval.txt"), table + "\n")
    plotting.plot_coverage(report, os.path.join(args.out, "coverage.png"))
    print(table)
    return 0


def _evaluate(world, params: EvalParams, scene=None, jobs: int = 1) -> dict:
    from .evalkit import evaluate_world
    return evaluate_world(world.cloud, world.poses, params, scene=scene, scale=world.scale, jobs=jobs)


ABLATIONS = {"full": {}, "naive": {"blend_method": "naive"},
             "interpolation": {"blend_method": "interpolation"}, "no_ldp": {"ldp": False}}


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    params = _eval_params(args)
    results, extra = {}, {}
    for name in args.variants:
        vcfg = WorldConfig.from_dict({**cfg.to_dict(), **ABLATIONS[name]})
        world = build_world(vcfg)
        results[name] = _evaluate(world, params, jobs=vcfg.jobs)
        fills = world.provenance["diagnostics"]["fills"]
        extra[name] = {"points": len(world.cloud),
                       "transition_score": [f.get("transition_score") for f in fills]}
        log.info("ablation %s: %d points", name, len(world.cloud))
    _write(os.path.join(args.out, "ablate.json"), report_json({"coverage": results, "worlds": extra}))
    modes = list(params.modes)
    cols = ["method"] + [f"{m}_{k}" for m in modes for k in ("brisque", "coverage")]
    table = format_table([_coverage_rows(n, r) for n, r in results.items()], cols)
    _write(os.path.join(args.out, "ablate.txt"), table + "\n")
    plotting.plot_ablation(results, os.path.join(args.out, "ablate.png"))
    print(table)
    return 0


def cmd_depthfill(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.depth:
        with open(args.depth, "rb") as fh:
            D = pfm_to_depth(fh.read())
        rng = np.random.default_rng(args.seed)
        M = hole_mask(*D.shape, args.fraction, rng)
        if args.estimate:
            with open(args.estimate, "rb") as fh:
                est = pfm_to_depth(fh.read())
            alpha = None
        else:
            alpha = float(rng.uniform(*args.alpha_range))
            est = alpha * D + args.beta
        rows = [{"scene": os.path.basename(args.depth), "alpha": alpha,
                 "median_depth": float(np.nanmedian(D)),
                 "methods": depthfill_compare(D, est, M, Pose())}]
    else:
        rows = depthfill_harness(args.scenes, args.fraction, tuple(args.alpha_range), args.beta,
                                 2 * args.height, args.height, args.seed)
    wins = sum(depthfill_ordering(r) for r in rows)
    table_rows = []
    for m in DEPTHFILL_METHODS:
        ts = [r["methods"][m]["transition_score"] for r in rows]
        mae = [r["methods"][m]["transition_region_mae"] for r in rows]
        table_rows.append({"method": m, "transition_score": float(np.mean(ts)),
                           "transition_region_mae": float(np.mean(mae))})
    _write(os.path.join(args.out, "depthfill.json"),
           report_json({"scenes": rows, "summary": table_rows, "ordering_holds": wins, "n": len(rows)}))
    table = format_table(table_rows, ["method", "transition_score", "transition_region_mae"])
    table += f"\n\nordering harmonic < interpolation < naive on both metrics: {wins}/{len(rows)}"
    _write(os.path.join(args.out, "depthfill.txt"), table + "\n")
    plotting.plot_depthfill(rows, os.path.join(args.out, "depthfill.png"))
    print(table)
    return 0


def cmd_inspect(args) -> int:
    path = args.path
    if os.path.isdir(path):
        world = load_world(path)
        pos = world.cloud.positions
        info = {"points": len(world.cloud), "poses": len(world.poses), "scale": world.scale,
                "partial_points": world.partial_count, "fill_points": world.fill_counts,
                "bounds_min": pos.min(0).tolist() if len(pos) else None,
                "bounds_max": pos.max(0).tolist() if len(pos) else None,
                "config": world.config}
    elif path.endswith(".ply"):
        from .world import read_ply
        cloud = read_ply(path)
        info = {"points": len(cloud)}
    elif path.endswith(".pfm"):
        with open(path, "rb") as fh:
            D = pfm_to_depth(fh.read())
        finite = D[np.isfinite(D)]
        info = {"shape": list(D.shape), "defined": int(finite.size),
                "min": float(finite.min()) if finite.size else None,
                "max": float(finite.max()) if finite.size else None,
                "median": float(np.median(finite)) if finite.size else None}
    else:
        raise FileNotFoundError(f"cannot inspect {path!r}: expected a world directory, .ply or .pfm")
    print(report_json(info))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panofuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build a world from panoramas")
    _add_config_flags(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--debug", action="store_true", help="dump intermediate rasters")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("render", help="render frames along a trajectory")
    r.add_argument("--world", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=MODES, default="rotation")
    _trajectory_flags(r)
    r.add_argument("--footprint-k", type=int, default=12)
    r.add_argument("--footprint-scale", type=float, default=1.5)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="coverage and depth metrics per trajectory mode")
    e.add_argument("--world", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--no-depth", action="store_true", help="skip depth metrics against the scene")
    e.add_argument("--jobs", type=int, default=1)
    _trajectory_flags(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare pipeline variants by coverage")
    _add_config_flags(a)
    a.add_argument("--out", required=True)
    a.add_argument("--variants", nargs="+", choices=list(ABLATIONS), default=list(ABLATIONS))
    _trajectory_flags(a)
    a.set_defaults(func=cmd_ablate, lateral_fraction=0.3)

    d = sub.add_parser("depthfill", help="masked depth reconstruction with each blending method")
    d.add_argument("--out", required=True)
    d.add_argument("--depth", help="reference depth (PFM); synthetic scenes when omitted")
    d.add_argument("--estimate", help="estimated depth (PFM); affine-corrupted reference when omitted")
    d.add_argument("--fraction", type=float, default=0.3)
    d.add_argument("--scenes", type=int, default=10)
    d.add_argument("--alpha-range", type=float, nargs=2, default=[0.8, 1.25])
    d.add_argument("--beta", type=float, default=0.0)
    d.add_argument("--height", type=int, default=128, help="synthetic raster height (width is twice)")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_depthfill)

    i = sub.add_parser("inspect", help="summarise a world directory, PLY or PFM file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OracleError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
