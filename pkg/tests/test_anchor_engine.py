import unittest
import sys
import os
import math
import tempfile
from pathlib import Path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import numpy as np
from scipy.stats import spearmanr
from modules.anchor_engine import (
    NUM_TARGETS,
    AnchorStatsAccumulator,
    anchor_shapes,
    build_grid,
    collect_stats,
    decode_targets,
    dimension_bin_edges,
    encode_targets,
    filter_ground,
    filter_summary,
    load_stats,
    parse_stats,
    save_stats,
    stats_table,
)
from modules.boxes import iou_2d_matrix
from modules.camera_geometry import CameraIntrinsics, GroundModel
from modules.synthetic_scenes import CAR, KITTI_CAMERA, ClassSpec, SceneSpec, generate
from modules.utils import ConfigError, MissingDataError, ParseError, ShapeError, angle_difference

CORPUS_FRAMES = 128


def _corpus(seed=7, frames=CORPUS_FRAMES):
    return [(labels, calib) for calib, labels in generate(SceneSpec(seed=seed), frames)]


class TestGrid(unittest.TestCase):

    def test_grid_size(self):
        intr = CameraIntrinsics(721.5, 721.5, 640.0, 72.9, image_w=1280, image_h=288)
        grid = build_grid(intr, stride=16)
        self.assertEqual((grid.rows, grid.cols), (18, 80))
        self.assertEqual(grid.num_shapes, 24)
        self.assertEqual(grid.num_anchors, 18 * 80 * 24)
        self.assertEqual(grid.boxes.shape, (grid.num_anchors, 4))

    def test_partial_cells_are_covered(self):
        grid = build_grid(KITTI_CAMERA, stride=16)
        self.assertEqual((grid.rows, grid.cols), (24, 78))

    def test_anchor_order(self):
        grid = build_grid(KITTI_CAMERA, stride=16, scales=(32.0, 64.0), ratios=(1.0, 2.0))
        np.testing.assert_array_equal(grid.centers[0], [8.0, 8.0])
        np.testing.assert_array_equal(grid.centers[4], [24.0, 8.0])
        np.testing.assert_array_equal(grid.shape_indices[:5], [0, 1, 2, 3, 0])
        w, h = anchor_shapes((32.0,), (2.0,))[0]
        self.assertAlmostEqual(h / w, 2.0)
        self.assertAlmostEqual(w * h, 32.0 * 32.0)

    def test_empty_configuration(self):
        with self.assertRaises(ConfigError):
            build_grid(KITTI_CAMERA, scales=())
        with self.assertRaises(ConfigError):
            build_grid(KITTI_CAMERA, ratios=())


class TestAccumulator(unittest.TestCase):

    def test_two_samples(self):
        acc = AnchorStatsAccumulator(2)
        acc.add(0, (10.0, 0.0, 1.0))
        acc.add(0, (20.0, 0.0, 1.0))
        stats = acc.finalize(((1.0, 1.0), (2.0, 2.0)), min_support=1)
        self.assertAlmostEqual(stats.mean[0, 0], 15.0)
        self.assertAlmostEqual(stats.var[0, 0], 25.0)
        self.assertEqual(stats.count.tolist(), [2, 0])
        self.assertEqual(stats.usable.tolist(), [True, False])

    def test_single_sample_std_floor(self):
        acc = AnchorStatsAccumulator(1)
        acc.add(0, (12.0, 0.5, 0.5))
        stats = acc.finalize(((1.0, 1.0),), min_support=1)
        self.assertTrue(stats.usable[0])
        np.testing.assert_allclose(stats.std[0], [1e-2, 1e-2, 1e-2])

    def test_weight_matches_repeats(self):
        a = AnchorStatsAccumulator(1)
        b = AnchorStatsAccumulator(1)
        a.add(0, (5.0, 0.1, 0.9), weight=3)
        a.add(0, (9.0, 0.2, 0.8))
        for _ in range(3):
            b.add(0, (5.0, 0.1, 0.9))
        b.add(0, (9.0, 0.2, 0.8))
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)
        np.testing.assert_allclose(a.m2, b.m2, rtol=1e-12, atol=1e-12)

    def test_merge_equals_sequential(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(50, 3))
        whole = AnchorStatsAccumulator(1)
        left = AnchorStatsAccumulator(1)
        right = AnchorStatsAccumulator(1)
        for i, v in enumerate(values):
            whole.add(0, v)
            (left if i < 20 else right).add(0, v)
        left.merge(right)
        np.testing.assert_allclose(left.mean, whole.mean, rtol=1e-12)
        np.testing.assert_allclose(left.m2, whole.m2, rtol=1e-10)
        np.testing.assert_allclose(whole.m2[0] / 50, values.var(axis=0), rtol=1e-10)

    def test_merge_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            AnchorStatsAccumulator(2).merge(AnchorStatsAccumulator(3))


class TestCollectStats(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.corpus = _corpus()
        cls.grid = build_grid(KITTI_CAMERA, stride=16)
        cls.stats = collect_stats(cls.grid, cls.corpus, min_support=1)

    def test_counts_and_dimensions(self):
        self.assertGreater(int(self.stats.usable.sum()), 3)
        car = self.stats.dimension_stats("Car")
        total = sum(1 for labels, _ in self.corpus for r in labels if r.category == "Car")
        self.assertEqual(car.count, total)
        np.testing.assert_allclose(car.mean, (1.53, 1.63, 3.88), atol=0.1)
        with self.assertRaises(MissingDataError):
            self.stats.dimension_stats("Cyclist")

    def test_depth_decreases_with_anchor_size(self):
        used = self.stats.count > 0
        sizes = np.sqrt(np.prod(np.asarray(self.stats.shapes), axis=1))[used]
        rho, _ = spearmanr(sizes, self.stats.mean_z[used])
        self.assertLess(rho, 0.0)

    def test_depth_variance_decreases_with_anchor_area(self):
        fixed = SceneSpec(seed=5, classes=(ClassSpec("Car", CAR.mean, (0.0, 0.0, 0.0)),))
        corpus = [(labels, calib) for calib, labels in generate(fixed, CORPUS_FRAMES)]
        stats = collect_stats(self.grid, corpus, min_support=1)
        used = stats.count >= 10
        self.assertGreaterEqual(int(used.sum()), 5)
        areas = np.prod(np.asarray(stats.shapes), axis=1)[used]
        rho, _ = spearmanr(areas, stats.var_z[used])
        self.assertLess(rho, 0.0)

    def test_order_independent(self):
        reversed_stats = collect_stats(self.grid, self.corpus[::-1], min_support=1)
        np.testing.assert_array_equal(reversed_stats.count, self.stats.count)
        np.testing.assert_allclose(reversed_stats.mean, self.stats.mean, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(reversed_stats.var, self.stats.var, rtol=1e-9, atol=1e-9)

    def test_jobs_invariant(self):
        parallel = collect_stats(self.grid, self.corpus, min_support=1, jobs=2)
        np.testing.assert_array_equal(parallel.count, self.stats.count)
        np.testing.assert_array_equal(parallel.mean, self.stats.mean)
        np.testing.assert_array_equal(parallel.var, self.stats.var)

    def test_perfect_overlap_threshold(self):
        stats = collect_stats(self.grid, self.corpus[:8], iou_threshold=1.0, min_support=1)
        self.assertFalse(np.any(stats.usable))

    def test_empty_corpus(self):
        with self.assertRaises(ConfigError):
            collect_stats(self.grid, [])

    def test_serialization(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "anchor_stats.txt"
            save_stats(self.stats, path)
            loaded = load_stats(path)
        self.assertEqual(loaded.shapes, self.stats.shapes)
        self.assertEqual(loaded.min_support, 1)
        np.testing.assert_array_equal(loaded.count, self.stats.count)
        np.testing.assert_array_equal(loaded.mean, self.stats.mean)
        np.testing.assert_array_equal(loaded.var, self.stats.var)
        np.testing.assert_array_equal(loaded.dimension_stats("Car").maximum,
                                      self.stats.dimension_stats("Car").maximum)

    def test_parse_errors(self):
        with self.assertRaises(ParseError):
            parse_stats("shape 1 1 1 0 0 0 0 0 0\n")
        with self.assertRaises(ParseError):
            parse_stats("anchor_stats 2\nshape 1 1 1 0 0 0 0 0 0\n")
        with self.assertRaises(ParseError):
            parse_stats("anchor_stats 1\nshape 1 1 1 0 0 0\n")

    def test_table(self):
        table = stats_table(self.stats)
        self.assertEqual(len(table), self.grid.num_shapes)
        self.assertEqual(int(table["count"].sum()), int(self.stats.count.sum()))

    def test_dimension_bins(self):
        edges = dimension_bin_edges(self.stats, "Car", bins=6)
        self.assertEqual(edges.shape, (3, 7))
        self.assertTrue(np.all(np.diff(edges, axis=1) > 0))


class TestGroundFilter(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        corpus = _corpus(seed=11, frames=64)
        grid = build_grid(KITTI_CAMERA, stride=16)
        cls.grid = grid.with_stats(collect_stats(grid, corpus, min_support=1))
        cls.corpus = corpus
        cls.ground = GroundModel()

    def test_monotone_in_tolerance(self):
        previous = None
        for tolerance in (0.25, 0.5, 1.0, 2.0, 4.0):
            mask = filter_ground(self.grid, KITTI_CAMERA, self.ground, tolerance)
            if previous is not None:
                self.assertTrue(np.all(mask[previous]))
            previous = mask

    def test_infinite_tolerance_keeps_everything(self):
        mask = filter_ground(self.grid, KITTI_CAMERA, self.ground, math.inf)
        self.assertEqual(int(mask.sum()), self.grid.num_anchors)
        self.assertEqual(filter_summary(self.grid, mask)["keep_fraction"], 1.0)

    def test_negative_tolerance(self):
        with self.assertRaises(ConfigError):
            filter_ground(self.grid, KITTI_CAMERA, self.ground, -1.0)

    def test_requires_stats(self):
        with self.assertRaises(MissingDataError):
            filter_ground(build_grid(KITTI_CAMERA), KITTI_CAMERA, self.ground, 1.0)


class TestGroundFilterCorpus(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.corpus = _corpus(seed=13, frames=1000)
        grid = build_grid(KITTI_CAMERA, stride=16)
        cls.grid = grid.with_stats(collect_stats(grid, cls.corpus, min_support=1))
        cls.ground = GroundModel()

    def _foreground_survival(self, mask):
        kept = total = 0
        removed = []
        for labels, _ in self.corpus:
            targets = encode_targets(self.grid, labels, KITTI_CAMERA)
            fg = targets.regression.anchor_indices
            kept += int(mask[fg].sum())
            total += fg.size
            removed.append(filter_summary(self.grid, mask, targets.class_targets)["negatives_removed_fraction"])
        return kept, total, removed

    def test_one_metre_tolerance(self):
        mask = filter_ground(self.grid, KITTI_CAMERA, self.ground, 1.0)
        kept, total, removed = self._foreground_survival(mask)
        self.assertGreater(total, 1000)
        self.assertGreaterEqual(kept / total, 0.75)
        self.assertGreater(min(removed), 0.0)
        self.assertLess(filter_summary(self.grid, mask)["keep_fraction"], 1.0)

    def test_infinite_tolerance_keeps_all_foreground(self):
        mask = filter_ground(self.grid, KITTI_CAMERA, self.ground, math.inf)
        self.assertEqual(int(mask.sum()), self.grid.num_anchors)
        kept, total, _ = self._foreground_survival(mask)
        self.assertEqual(kept, total)


class TestTargets(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        corpus = _corpus(seed=3, frames=64)
        grid = build_grid(KITTI_CAMERA, stride=16)
        cls.grid = grid.with_stats(collect_stats(grid, corpus, min_support=1))
        cls.corpus = corpus

    def test_encode_decode_round_trip(self):
        checked = 0
        for labels, calib in self.corpus[:6]:
            targets = encode_targets(self.grid, labels, calib)
            values = targets.regression.values
            self.assertEqual(values.shape[1], NUM_TARGETS)
            dets = decode_targets(self.grid, values, np.ones(values.shape[0]), KITTI_CAMERA,
                                  anchor_indices=targets.regression.anchor_indices)
            self.assertEqual(len(dets), values.shape[0])
            for det, g in zip(dets, targets.gt_indices):
                gt = [r for r in labels if r.category == "Car"][g]
                np.testing.assert_allclose(det.box2d.as_tuple(), gt.bbox2d.as_tuple(), atol=1e-6)
                np.testing.assert_allclose(det.box3d.center, gt.location, atol=1e-6)
                np.testing.assert_allclose(det.box3d.dims, gt.to_box3d().dims, atol=1e-6)
                self.assertLess(abs(angle_difference(det.alpha, gt.alpha)), 1e-6)
                self.assertLess(abs(angle_difference(det.box3d.yaw, gt.rotation_y)), 1e-6)
                checked += 1
        self.assertGreater(checked, 0)

    def test_foreground_anchors_are_labelled(self):
        labels, calib = self.corpus[0]
        targets = encode_targets(self.grid, labels, calib)
        self.assertGreater(targets.num_foreground, 0)
        self.assertTrue(set(targets.gt_indices.tolist()) <= set(range(len(labels))))
        self.assertTrue(np.all(targets.class_targets[targets.regression.anchor_indices] == 1))

    def test_zero_regression_decodes_to_anchor_prior(self):
        anchor = int(np.nonzero(self.grid.stats.usable[self.grid.shape_indices])[0][0])
        det = decode_targets(self.grid, np.zeros((1, NUM_TARGETS)), np.array([0.5]), KITTI_CAMERA,
                             anchor_indices=np.array([anchor]))
        if not det:
            self.skipTest("anchor center projects behind the camera")
        s = self.grid.shape_indices[anchor]
        np.testing.assert_allclose(det[0].box2d.as_tuple(), self.grid.boxes[anchor], atol=1e-9)
        self.assertAlmostEqual(det[0].box3d.z, self.grid.stats.mean_z[s])
        self.assertEqual(det[0].score, 0.5)

    def test_masked_anchors_are_ignored(self):
        labels, calib = self.corpus[0]
        mask = np.zeros(self.grid.num_anchors, dtype=bool)
        targets = encode_targets(self.grid, labels, calib, mask=mask)
        self.assertTrue(np.all(targets.class_targets == -1))
        self.assertEqual(targets.num_foreground, 0)

    def test_unusable_shapes_are_ignored(self):
        corpus = self.corpus[:4]
        strict = self.grid.with_stats(collect_stats(self.grid, corpus, iou_threshold=1.0, min_support=1))
        targets = encode_targets(strict, corpus[0][0], corpus[0][1])
        self.assertTrue(np.all(targets.class_targets == -1))

    def _single_anchor_mask(self, gt, low, high):
        iou = iou_2d_matrix(self.grid.boxes, np.array([gt.bbox2d.as_tuple()]))[:, 0]
        usable = self.grid.stats.usable[self.grid.shape_indices]
        candidates = np.nonzero(usable & (iou > low) & (iou < high))[0]
        if candidates.size == 0:
            self.skipTest("no anchor in the requested overlap band")
        mask = np.zeros(self.grid.num_anchors, dtype=bool)
        mask[candidates[0]] = True
        return mask, int(candidates[0])

    def test_weak_best_anchor_is_not_forced(self):
        labels, calib = self.corpus[0]
        gt = [r for r in labels if r.category == "Car"][0]
        mask, anchor = self._single_anchor_mask(gt, 0.0, 0.05)
        targets = encode_targets(self.grid, [gt], calib, mask=mask)
        self.assertEqual(targets.num_foreground, 0)
        relaxed = encode_targets(self.grid, [gt], calib, mask=mask, force_min_iou=0.0)
        self.assertEqual(relaxed.regression.anchor_indices.tolist(), [anchor])

    def test_moderate_best_anchor_is_forced(self):
        labels, calib = self.corpus[0]
        gt = [r for r in labels if r.category == "Car"][0]
        mask, anchor = self._single_anchor_mask(gt, 0.15, 0.35)
        targets = encode_targets(self.grid, [gt], calib, mask=mask)
        self.assertEqual(targets.regression.anchor_indices.tolist(), [anchor])

    def test_every_object_gets_an_anchor(self):
        for labels, calib in self.corpus[:16]:
            cars = [r for r in labels if r.category == "Car"]
            if not cars:
                continue
            targets = encode_targets(self.grid, labels, calib)
            iou = iou_2d_matrix(self.grid.boxes, np.array([r.bbox2d.as_tuple() for r in cars]))
            iou[~self.grid.stats.usable[self.grid.shape_indices]] = -1.0
            owner = dict(zip(targets.regression.anchor_indices.tolist(), targets.gt_indices.tolist()))
            for g in range(len(cars)):
                best = int(np.argmax(iou[:, g]))
                if iou[best, g] < 0.1 or owner.get(best, g) != g:
                    continue
                self.assertIn(g, targets.gt_indices.tolist())

    def test_force_threshold_range(self):
        labels, calib = self.corpus[0]
        with self.assertRaises(ConfigError):
            encode_targets(self.grid, labels, calib, force_min_iou=0.6)

    def test_threshold_order(self):
        labels, calib = self.corpus[0]
        with self.assertRaises(ConfigError):
            encode_targets(self.grid, labels, calib, iou_fg=0.3, iou_bg=0.5)

    def test_stats_must_match_grid(self):
        other = build_grid(KITTI_CAMERA, scales=(32.0,), ratios=(1.0,))
        with self.assertRaises(ShapeError):
            other.with_stats(self.grid.stats)


if __name__ == '__main__':
    unittest.main()
