"""Feature-point error and the three-way comparison harness."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import RigidTransform
from .pipeline import PipelineConfig, register
from .sim import GroundTruth, load_scene

ALGORITHMS = (("ICP only", "icp"), ("Location + ICP", "loc-icp"),
              ("Location+FGR+ICP", "loc-fgr-icp"))


class EmptyFeaturesError(ValueError):
    pass


def feature_point_error(t: RigidTransform, truth: GroundTruth) -> float:
    """Mean distance between each dense-frame landmark and its mapped sparse twin."""
    f = np.asarray(truth.feature_points, dtype=np.float64).reshape(-1, 2, 3)
    if len(f) == 0:
        raise EmptyFeaturesError("ground truth carries no feature pairs")
    return float(np.mean(np.linalg.norm(f[:, 1] - t.apply_points(f[:, 0]), axis=1)))


@dataclass
class ComparisonRow:
    algorithm: str
    error: Optional[float]  # None when the chain failed
    runtime: float
    status: str = "ok"
    transform: Optional[RigidTransform] = None

    @property
    def failed(self) -> bool:
        return self.error is None


def compare(scene, cfg: PipelineConfig = PipelineConfig()) -> list:
    """Run every chain on an in-memory scene (anything with lidar/kinect/truth)."""
    rows = []
    for name, mode in ALGORITHMS:
        t0 = time.perf_counter()
        try:
            res = register(scene.lidar, scene.kinect, mode, cfg)
        except Exception as exc:  # noqa: BLE001 - a failed row must not stop the others
            rows.append(ComparisonRow(name, None, time.perf_counter() - t0, f"failed: {exc}"))
            continue
        rows.append(ComparisonRow(name, feature_point_error(res.transform, scene.truth),
                                  time.perf_counter() - t0, "ok", res.transform))
    return rows


def run_comparison(scene_dir, seed: int = 0, cfg: PipelineConfig = PipelineConfig()) -> list:
    return compare(load_scene(scene_dir), replace(cfg, seed=seed))


def strictly_decreasing(rows) -> bool:
    """True when errors shrink down the table; a failed row counts as infinitely bad."""
    errs = [np.inf if r.failed else r.error for r in rows]
    return all(a > b for a, b in zip(errs, errs[1:]))


def format_table(rows) -> str:
    lines = [f"{'Algorithm':<20}{'Error (m)':>12}{'Runtime (s)':>14}  Status"]
    for r in rows:
        err = "failed" if r.failed else f"{r.error:.4f}"
        lines.append(f"{r.algorithm:<20}{err:>12}{r.runtime:>14.2f}  {r.status}")
    return "\n".join(lines)
