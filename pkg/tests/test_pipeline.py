import numpy as np
import pytest

from fusereg.core import PointCloud, rotation_angle, compose, invert
from fusereg.pipeline import (MODES, PipelineConfig, StageError, coarse_stage, overlap_crop,
                              register)


def test_unknown_mode(scene0):
    with pytest.raises(ValueError, match="loc-fgr-icp"):
        register(scene0.lidar, scene0.kinect, "fgr-only")


def test_stage_error_prefix(scene0):
    with pytest.raises(StageError) as e:
        register(scene0.lidar, PointCloud(scene0.kinect.points), "loc-icp")
    assert e.value.stage == "coarse" and str(e.value).startswith("coarse: ")


def test_icp_stage_error_prefix():
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 3))
    with pytest.raises(StageError) as e:
        register(PointCloud(pts), PointCloud(pts + [30.0, 0, 0]), "icp")
    assert e.value.stage == "icp"


def test_overlap_crop():
    a = np.array([[0.0, 0, 0], [5, 0, 0]])
    b = np.array([[0.1, 0, 0], [0, 9, 0], [0.2, 0, 0]])
    sa, sb = overlap_crop(a, b, 0.5)
    assert np.array_equal(sa, a[:1]) and np.array_equal(sb, b[[0, 2]])
    assert overlap_crop(a, b, 0.0)[1] is b


def test_coarse_stage_near_truth(scene0):
    T, landmark, h = coarse_stage(scene0.lidar, scene0.kinect)
    err = compose(invert(scene0.truth.transform), T)
    assert np.linalg.norm(err.translation) < 0.2 and rotation_angle(err.rotation) < np.radians(3)
    assert h == pytest.approx(scene0.layout.lidar_position[2], abs=0.01)


def test_location_icp_stage_records(scene0):
    res = register(scene0.lidar, scene0.kinect, "loc-icp")
    assert [s.name for s in res.stages] == ["coarse", "icp"]
    assert res.stages[-1].transform == res.transform
    err = compose(invert(scene0.truth.transform), res.transform)
    assert np.linalg.norm(err.translation) < 0.05


def test_modes_constant():
    assert MODES == ("icp", "loc-icp", "loc-fgr-icp")
    with pytest.raises(ValueError):
        PipelineConfig(fgr_voxel=0)
