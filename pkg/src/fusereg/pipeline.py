"""The three registration chains: ICP alone, landmark + ICP, landmark + FGR + ICP.

Every chain returns the sparse (Lidar) -> dense (RGB-D) transform together
with one record per stage.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import NeighborIndex, PointCloud, RigidTransform, compose
from .landmark import (CoarseConfig, LandmarkResult, MlesacConfig, coarse_transform_from_landmark,
                       detect_cylinder, estimate_sensor_height, sparse_roi)
from .refine import FgrConfig, IcpConfig, fgr_align, icp_align
from .roi import RoiConfig, filter_roi, voxel_downsample

MODES = ("icp", "loc-icp", "loc-fgr-icp")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and the message is prefixed."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    roi: RoiConfig = RoiConfig()
    mlesac: MlesacConfig = MlesacConfig(sigma=0.005, rgb_weight=1.0 / (2 * 25.0 ** 2),
                                        known_radius=0.05, min_inlier_fraction=0.001)
    coarse: CoarseConfig = CoarseConfig()
    fgr: FgrConfig = FgrConfig(normal_radius=0.5, feature_radius=1.0)
    fgr_voxel: float = 0.2
    # FGR only sees points lying within this distance of the other cloud
    # under the coarse estimate; <= 0 keeps everything
    overlap_margin: float = 0.5
    icp: IcpConfig = IcpConfig(max_correspondence_distance=0.05)
    sparse_viewpoint: tuple = (0.0, 0.0, 0.0)
    dense_viewpoint: tuple = (0.0, 0.0, 1.6)
    seed: int = 0

    def __post_init__(self):
        if not self.fgr_voxel > 0:
            raise ValueError("fgr_voxel must be positive")


@dataclass
class StageResult:
    name: str
    transform: RigidTransform
    iterations: int
    objective: Optional[float]
    runtime: float


@dataclass
class RegistrationResult:
    transform: RigidTransform
    stages: list = field(default_factory=list)
    landmark: Optional[LandmarkResult] = None


def _run(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(stage, exc) from exc


def coarse_stage(sparse: PointCloud, dense: PointCloud, cfg: PipelineConfig = PipelineConfig()):
    """Landmark detection in the dense band, then yaw search; returns (T, landmark, height)."""
    def go():
        band = filter_roi(dense, cfg.roi)
        landmark = detect_cylinder(band, replace(cfg.mlesac, seed=cfg.seed))
        h = cfg.coarse.sensor_height
        if h is None:
            h = estimate_sensor_height(sparse)
        dense_band = voxel_downsample(band, cfg.roi.voxel_size) if cfg.roi.voxel_size > 0 else band
        T = coarse_transform_from_landmark(landmark, replace(cfg.coarse, sensor_height=h),
                                           sparse_roi(sparse, h, cfg.roi), dense_band)
        return T, landmark, h
    return _run("coarse", go)


def overlap_crop(src: np.ndarray, dst: np.ndarray, margin: float):
    """Rows of each set lying within ``margin`` of the other set."""
    if margin <= 0:
        return src, dst
    _, ds = NeighborIndex(dst).nearest_many(src, margin)
    _, dd = NeighborIndex(src).nearest_many(dst, margin)
    return src[np.isfinite(ds)], dst[np.isfinite(dd)]


def fgr_stage(sparse: PointCloud, dense: PointCloud, init: RigidTransform,
              cfg: PipelineConfig = PipelineConfig()):
    """Feature alignment of the decimated, overlap-cropped clouds, composed onto ``init``."""
    def go():
        s = voxel_downsample(sparse, cfg.fgr_voxel)
        d = voxel_downsample(dense, cfg.fgr_voxel)
        sp, dp = overlap_crop(init.apply_points(s.points), d.points, cfg.overlap_margin)
        res = fgr_align(sp, dp, replace(cfg.fgr, seed=cfg.seed),
                        init.apply_points(np.asarray(cfg.sparse_viewpoint, np.float64)),
                        cfg.dense_viewpoint)
        return compose(res.transform, init), res
    return _run("fgr", go)


def icp_stage(sparse: PointCloud, dense: PointCloud, init: RigidTransform,
              cfg: PipelineConfig = PipelineConfig(), index: Optional[NeighborIndex] = None):
    return _run("icp", icp_align, sparse, dense, init, cfg.icp, index=index)


def register(sparse: PointCloud, dense: PointCloud, mode: str = "loc-fgr-icp",
             cfg: PipelineConfig = PipelineConfig()) -> RegistrationResult:
    """Estimate the sparse -> dense transform with one of ``MODES``.

    Raises StageError naming the failing stage.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    out = RegistrationResult(RigidTransform.identity())
    T = RigidTransform.identity()
    if mode != "icp":
        t0 = time.perf_counter()
        T, landmark, _ = coarse_stage(sparse, dense, cfg)
        out.landmark = landmark
        out.stages.append(StageResult("coarse", T, landmark.iterations, landmark.score,
                                      time.perf_counter() - t0))
    if mode == "loc-fgr-icp":
        t0 = time.perf_counter()
        T, res = fgr_stage(sparse, dense, T, cfg)
        obj = res.objective_trace[-1] if res.objective_trace else None
        out.stages.append(StageResult("fgr", T, res.iterations, obj, time.perf_counter() - t0))
    t0 = time.perf_counter()
    res = icp_stage(sparse, dense, T, cfg)
    T = res.transform
    out.stages.append(StageResult("icp", T, res.iterations, res.trace[-1] if res.trace else None,
                                  time.perf_counter() - t0))
    out.transform = T
    return out
