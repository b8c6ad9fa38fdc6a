"""Command-line front end: simulate, detect-cylinder, register, evaluate, compare.

Exit status is 0 on success, 1 when a pipeline stage fails and 2 for usage
errors. Outputs are written only after all computation succeeded, each via
a temp file and rename.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as fio
from .core import PointCloud
from .evaluation import compare, feature_point_error, format_table
from .landmark import CoarseConfig, MlesacConfig, detect_cylinder
from .pipeline import MODES, PipelineConfig, StageError, register
from .refine import IcpConfig
from .roi import RoiConfig, filter_roi
from .sim import SceneConfig, export_scene, generate_scene, load_scene

DEFAULT_SEED = 0
FEATURE_NOTE = ("feature points are exact room and bed-top corners known in both frames, "
                "used in place of hand-picked points")


def _triple(kind):
    def parse(text: str):
        parts = text.split(",")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
        try:
            return tuple(kind(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse {text!r}") from None
    return parse


def _pair(kind):
    def parse(text: str):
        parts = text.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
        try:
            return tuple(kind(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse {text!r}") from None
    return parse


def _color(text: str):
    c = _triple(int)(text)
    if any(not 0 <= v <= 255 for v in c):
        raise argparse.ArgumentTypeError(f"colour channels must lie in 0..255, got {text!r}")
    return c


def _add_band_flags(p):
    p.add_argument("--z-min", type=float, default=RoiConfig.z_min, help="ROI lower height (m)")
    p.add_argument("--z-max", type=float, default=RoiConfig.z_max, help="ROI upper height (m)")


def _add_mlesac_flags(p, defaults: MlesacConfig):
    p.add_argument("--sigma", type=float, default=defaults.sigma, help="inlier noise sigma (m)")
    p.add_argument("--beta", type=float, default=defaults.rgb_weight, help="RGB penalty weight")
    p.add_argument("--ref-color", type=_color, default=defaults.reference_color,
                   help="landmark reference colour R,G,B")
    p.add_argument("--radius", type=float, default=defaults.known_radius,
                   help="known landmark radius (m); omit to fit it")
    p.add_argument("--max-iterations", type=int, default=defaults.max_iterations)
    p.add_argument("--min-inlier-fraction", type=float, default=defaults.min_inlier_fraction)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fusereg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", required=True)
    sc = SceneConfig()
    pc = PipelineConfig()

    p = sub.add_parser("simulate", help="generate and export a synthetic scene")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--lidar-noise", type=float, default=sc.lidar_noise)
    p.add_argument("--kinect-noise", type=float, default=sc.kinect_noise)
    p.add_argument("--color-noise", type=float, default=sc.color_noise)
    p.add_argument("--lidar-rings", type=int, default=sc.lidar_rings)
    p.add_argument("--lidar-azimuth-step", type=float, default=sc.lidar_azimuth_step_deg)
    p.add_argument("--kinect-grid", type=_pair(int), default=sc.kinect_grid, help="W,H rays")
    p.add_argument("--jitter-position", type=float, default=sc.jitter_position)
    p.add_argument("--jitter-yaw", type=float, default=sc.jitter_yaw_deg)

    p = sub.add_parser("detect-cylinder", help="find the Lidar body in a coloured cloud")
    p.add_argument("--cloud", required=True, help="coloured PLY")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _add_mlesac_flags(p, pc.mlesac)
    _add_band_flags(p)
    p.add_argument("--no-roi", action="store_true", help="search the whole cloud")
    p.add_argument("--out-report", help="optional report file")

    p = sub.add_parser("register", help="estimate the Lidar -> RGB-D transform")
    p.add_argument("--lidar", required=True, help="sparse PLY")
    p.add_argument("--kinect", required=True, help="dense coloured PLY")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--out-transform", required=True)
    p.add_argument("--out-merged", required=True, help="both clouds in the RGB-D frame")
    p.add_argument("--out-report", help="optional report file")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    _add_mlesac_flags(p, pc.mlesac)
    _add_band_flags(p)
    p.add_argument("--voxel", type=float, default=pc.roi.voxel_size, help="ROI voxel (m)")
    p.add_argument("--sensor-height", type=float, default=None,
                   help="Lidar height above the floor (m); estimated when omitted")
    p.add_argument("--yaw-steps", type=int, default=pc.coarse.yaw_steps)
    p.add_argument("--fgr-voxel", type=float, default=pc.fgr_voxel)
    p.add_argument("--normal-radius", type=float, default=pc.fgr.normal_radius)
    p.add_argument("--feature-radius", type=float, default=pc.fgr.feature_radius)
    p.add_argument("--overlap-margin", type=float, default=pc.overlap_margin)
    p.add_argument("--icp-max-dist", type=float, default=pc.icp.max_correspondence_distance)
    p.add_argument("--icp-max-iter", type=int, default=pc.icp.max_iterations)
    p.add_argument("--icp-tol", type=float, default=pc.icp.rel_objective_tol)
    p.add_argument("--dense-viewpoint", type=_triple(float), default=pc.dense_viewpoint)
    p.add_argument("--lidar-color", type=_color, default=(255, 0, 0),
                   help="colour given to Lidar points in the merged cloud")

    p = sub.add_parser("evaluate", help="feature-point error of a transform on a scene")
    p.add_argument("--scene", required=True, help="directory written by simulate")
    p.add_argument("--transform", required=True)
    p.add_argument("--out-report", help="optional report file")

    p = sub.add_parser("compare", help="run all three chains on a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out-report", help="report path (default: <scene>/compare.report)")
    p.add_argument("--icp-max-dist", type=float, default=pc.icp.max_correspondence_distance)
    p.add_argument("--sensor-height", type=float, default=None)
    return ap


def parse_args(argv=None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def _params(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if v is None or k == "command":
            continue
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        out[k.replace("_", "-")] = v
    return out


def _mlesac(args) -> MlesacConfig:
    return replace(PipelineConfig().mlesac, sigma=args.sigma, rgb_weight=args.beta,
                   reference_color=args.ref_color, known_radius=args.radius,
                   max_iterations=args.max_iterations,
                   min_inlier_fraction=args.min_inlier_fraction, seed=args.seed)


def _pipeline(args) -> PipelineConfig:
    pc = PipelineConfig()
    return replace(
        pc, seed=args.seed, mlesac=_mlesac(args),
        roi=RoiConfig(args.z_min, args.z_max, args.voxel),
        coarse=CoarseConfig(args.sensor_height, args.yaw_steps, pc.coarse.trim_fraction),
        fgr=replace(pc.fgr, normal_radius=args.normal_radius, feature_radius=args.feature_radius),
        fgr_voxel=args.fgr_voxel, overlap_margin=args.overlap_margin,
        icp=IcpConfig(args.icp_max_iter, args.icp_tol, args.icp_max_dist),
        dense_viewpoint=args.dense_viewpoint)


def cmd_simulate(args) -> int:
    cfg = replace(SceneConfig(), seed=args.seed, lidar_noise=args.lidar_noise,
                  kinect_noise=args.kinect_noise, color_noise=args.color_noise,
                  lidar_rings=args.lidar_rings, lidar_azimuth_step_deg=args.lidar_azimuth_step,
                  kinect_grid=args.kinect_grid, jitter_position=args.jitter_position,
                  jitter_yaw_deg=args.jitter_yaw)
    scene = generate_scene(cfg)
    export_scene(scene, args.out)
    print(f"wrote {len(scene.lidar)} lidar and {len(scene.kinect)} kinect points to {args.out}")
    return 0


def cmd_detect(args) -> int:
    cloud = fio.read_ply(args.cloud)
    if not args.no_roi:
        cloud = filter_roi(cloud, RoiConfig(args.z_min, args.z_max, 0.0))
    res = detect_cylinder(cloud, _mlesac(args))
    m = res.model
    print(f"axis_x = {m.axis_x!r}")
    print(f"axis_y = {m.axis_y!r}")
    print(f"radius = {m.radius!r}")
    print(f"z_low = {m.z_low!r}")
    print(f"z_high = {m.z_high!r}")
    print(f"inliers = {len(res.inlier_ids)}")
    print(f"score = {res.score!r}")
    if args.out_report:
        fio.write_report(fio.Report(params=_params(args), notes=[
            f"cylinder axis ({m.axis_x!r}, {m.axis_y!r}) radius {m.radius!r} "
            f"inliers {len(res.inlier_ids)}"]), args.out_report)
    return 0


def cmd_register(args) -> int:
    lidar = fio.read_ply(args.lidar)
    kinect = fio.read_ply(args.kinect)
    res = register(lidar, kinect, args.mode, _pipeline(args))
    T = res.transform
    moved = T.apply_points(lidar.points)
    merged_colors = None
    if kinect.has_colors:
        merged_colors = np.vstack([np.tile(np.asarray(args.lidar_color, np.uint8), (len(moved), 1)),
                                   kinect.colors])
    merged = PointCloud(np.vstack([moved, kinect.points]), merged_colors)
    report = fio.Report(params=_params(args), stages=[
        fio.StageRecord(s.name, s.transform, s.iterations, s.objective) for s in res.stages])
    fio.write_transform(T, args.out_transform)
    fio.write_ply(merged, args.out_merged)
    if args.out_report:
        fio.write_report(report, args.out_report)
    print(fio.format_transform(T), end="")
    return 0


def cmd_evaluate(args) -> int:
    scene = load_scene(args.scene)
    T = fio.read_transform(args.transform)
    err = feature_point_error(T, scene.truth)
    print(f"feature_error_m = {err!r}")
    if args.out_report:
        fio.write_report(fio.Report(params=_params(args), feature_error=err,
                                    notes=[FEATURE_NOTE]), args.out_report)
    return 0


def cmd_compare(args) -> int:
    scene = load_scene(args.scene)
    pc = PipelineConfig()
    cfg = replace(pc, seed=args.seed, icp=replace(pc.icp, max_correspondence_distance=args.icp_max_dist),
                  coarse=replace(pc.coarse, sensor_height=args.sensor_height))
    rows = compare(scene, cfg)
    print(format_table(rows))
    out = args.out_report or str(Path(args.scene) / "compare.report")
    # wall times vary run to run, so they stay on the console only
    fio.write_report(fio.Report(
        params=_params(args), notes=[FEATURE_NOTE, "runtimes are printed, not stored"],
        rows=[fio.RowRecord(r.algorithm, r.error, r.status) for r in rows]), out)
    return 0


COMMANDS = {"simulate": cmd_simulate, "detect-cylinder": cmd_detect, "register": cmd_register,
            "evaluate": cmd_evaluate, "compare": cmd_compare}


def dispatch(args: argparse.Namespace) -> int:
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"fusereg {args.command}: {exc}", file=sys.stderr)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"fusereg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    return dispatch(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
