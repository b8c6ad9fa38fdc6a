import numpy as np
import pytest

from conftest import identity_scene

from fusereg.core import PointCloud, RigidTransform, compose
from fusereg.evaluation import (ALGORITHMS, ComparisonRow, EmptyFeaturesError, compare,
                                feature_point_error, format_table, run_comparison,
                                strictly_decreasing)
from fusereg.sim import GroundTruth, LoadedScene, SceneConfig, export_scene, generate_scene


class TestFeatureError:
    def test_truth_gives_zero(self, scene0):
        assert feature_point_error(scene0.truth.transform, scene0.truth) < 1e-9

    def test_uniform_offset(self, scene0):
        t = compose(RigidTransform(np.eye(3), (0.5, 0, 0)), scene0.truth.transform)
        assert feature_point_error(t, scene0.truth) == pytest.approx(0.5, abs=1e-9)

    def test_constructed_translation(self, rng):
        src = rng.uniform(-2, 2, (6, 3))
        truth = GroundTruth(RigidTransform(np.eye(3), (2, 3, 1.2)), np.stack([src, src + (2, 3, 1.2)], 1))
        got = feature_point_error(RigidTransform.identity(), truth)
        assert got == pytest.approx(np.sqrt(4 + 9 + 1.44), abs=1e-12)

    def test_order_invariant(self, scene0, rng):
        t = RigidTransform.from_yaw(0.2, (0.1, -0.3, 0))
        f = scene0.truth.feature_points
        shuffled = GroundTruth(scene0.truth.transform, f[rng.permutation(len(f))])
        assert feature_point_error(t, shuffled) == pytest.approx(feature_point_error(t, scene0.truth),
                                                                 rel=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyFeaturesError):
            feature_point_error(RigidTransform.identity(),
                                GroundTruth(RigidTransform.identity(), np.zeros((0, 2, 3))))


class TestTable:
    def rows(self, *errs):
        return [ComparisonRow(n, e, 0.1) for (n, _), e in zip(ALGORITHMS, errs)]

    def test_strictly_decreasing(self):
        assert strictly_decreasing(self.rows(7.0, 0.7, 0.1))
        assert not strictly_decreasing(self.rows(7.0, 0.1, 0.1))
        # a failed first row is worse than anything
        assert strictly_decreasing(self.rows(None, 0.7, 0.1))
        assert not strictly_decreasing(self.rows(7.0, 0.7, None))

    def test_format_marks_failures(self):
        rows = self.rows(7.0, None, 0.1)
        rows[1].status = "failed: coarse: no landmark"
        text = format_table(rows)
        assert "Location + ICP" in text and "failed: coarse" in text
        assert len(text.splitlines()) == 4


class TestCompare:
    def test_identity_scene_all_rows_tiny(self):
        scene, cfg = identity_scene()
        rows = compare(scene, cfg)
        assert [r.algorithm for r in rows] == [n for n, _ in ALGORITHMS]
        for r in rows:
            assert not r.failed, r.status
            assert r.error < 1e-3, (r.algorithm, r.error)

    def test_failure_is_recorded_per_row(self, scene0):
        # a colourless dense cloud breaks the landmark rows but not ICP only
        bare = LoadedScene(scene0.lidar, PointCloud(scene0.kinect.points), scene0.truth)
        rows = compare(bare)
        assert not rows[0].failed
        assert rows[1].failed and rows[1].status.startswith("failed: coarse:")
        assert rows[2].failed

    def test_run_comparison_deterministic(self, tmp_path):
        s = generate_scene(SceneConfig(seed=1))
        export_scene(s, tmp_path)
        a = run_comparison(tmp_path, seed=0)
        b = run_comparison(tmp_path, seed=0)
        assert [(r.error, r.status) for r in a] == [(r.error, r.status) for r in b]
        assert all(r.failed or r.error >= 0 for r in a)
