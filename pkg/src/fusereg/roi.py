"""Height-band selection and voxel-grid decimation for the dense cloud."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PointCloud


@dataclass(frozen=True)
class RoiConfig:
    z_min: float = 0.8
    z_max: float = 1.8
    voxel_size: float = 0.05  # 0 disables downsampling

    def __post_init__(self):
        if not self.z_min < self.z_max:
            raise ValueError(f"z_min ({self.z_min}) must be below z_max ({self.z_max})")
        if self.voxel_size < 0:
            raise ValueError("voxel_size must be non-negative")


def roi_mask(points: np.ndarray, cfg: RoiConfig) -> np.ndarray:
    z = np.asarray(points)[:, 2]
    return (z >= cfg.z_min) & (z <= cfg.z_max)


def filter_roi(cloud: PointCloud, cfg: RoiConfig = RoiConfig()) -> PointCloud:
    """Keep points with z_min <= z <= z_max, in input order."""
    return cloud.select(np.flatnonzero(roi_mask(cloud.points, cfg)))


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One centroid per occupied origin-anchored voxel, in first-seen order.

    Colours become the channel-wise rounded (half away from zero) mean.
    """
    if not voxel_size > 0:
        raise ValueError(f"voxel size must be positive, got {voxel_size}")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # relabel voxels by first occurrence in the input
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    label = rank[inverse]
    n = order.size
    counts = np.bincount(label, minlength=n).astype(np.float64)
    pts = np.stack([np.bincount(label, cloud.points[:, k], minlength=n)
                    for k in range(3)], axis=1) / counts[:, None]
    # the mean can round past a voxel face; fall back to a member coordinate
    vkeys = keys[first[order]]
    bad = np.floor(pts / voxel_size).astype(np.int64) != vkeys
    if bad.any():
        lo = np.full((n, 3), np.inf)
        np.minimum.at(lo, label, cloud.points)
        pts = np.where(bad, lo, pts)
    pts = np.where(counts[:, None] == 1, cloud.points[first[order]], pts)
    cols = None
    if cloud.has_colors:
        csum = np.stack([np.bincount(label, cloud.colors[:, k].astype(np.float64), minlength=n)
                         for k in range(3)], axis=1)
        cols = np.floor(csum / counts[:, None] + 0.5).astype(np.uint8)
    return PointCloud(pts, cols)
