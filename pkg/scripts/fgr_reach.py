"""How far FGR reaches on same-modality pairs, against ICP from identity.

Aligns a decimated RGB-D cloud with a yawed and shifted copy of itself for a
sweep of yaw angles.
"""
import argparse

import numpy as np

from fusereg.core import RigidTransform, compose, invert, rotation_angle
from fusereg.refine import FgrConfig, IcpConfig, fgr_align, icp_align
from fusereg.roi import voxel_downsample
from fusereg.sim import SceneConfig, generate_scene


def errors(g, t):
    e = compose(invert(g), t)
    return rotation_angle(e.rotation), float(np.linalg.norm(e.translation))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--yaws", type=float, nargs="+", default=[10, 30, 60, 90, 150])
    ap.add_argument("--shift", type=float, default=0.5)
    ap.add_argument("--voxel", type=float, default=0.05)
    args = ap.parse_args()
    scene = generate_scene(SceneConfig(seed=args.seed))
    src = voxel_downsample(scene.kinect, args.voxel).points
    vp = np.array([0, 0, 1.6])
    rng = np.random.default_rng(args.seed)
    print(f"{'yaw':>5} {'FGR rad':>10} {'FGR m':>10} {'ICP rad':>10} {'ICP m':>10}")
    for yaw in args.yaws:
        g = RigidTransform.from_yaw(np.radians(yaw), (args.shift, 0, 0))
        tgt = g.apply_points(src) + rng.normal(0, 0.002, src.shape)
        fa, ft = errors(g, fgr_align(src, tgt, FgrConfig(seed=args.seed), vp, g.apply_points(vp)).transform)
        try:
            ia, it = errors(g, icp_align(src, tgt, cfg=IcpConfig()).transform)
            icp = f"{ia:10.2e} {it:10.2e}"
        except ValueError as exc:  # degenerate pairing far from the basin
            icp = f"{'failed':>10} {type(exc).__name__}"
        print(f"{yaw:5.0f} {fa:10.2e} {ft:10.2e} {icp}")


if __name__ == "__main__":
    main()
