import unittest
import sys
import os
import math
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import numpy as np
from modules.anchor_engine import EncodedTargets, RegressionTargets
from modules.losses import (
    DepthLossConfig,
    bin_index,
    detection_loss,
    focal_loss,
    multibin_ce,
    multibin_decode,
    si_loss,
    smooth_l1,
    smoothness_loss,
    total_depth_loss,
)
from modules.utils import ConfigError, GacError, ShapeError

STEP = 1e-6


def _numeric(func, array):
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + STEP
        plus = func()
        flat[i] = original - STEP
        minus = func()
        flat[i] = original
        out[i] = (plus - minus) / (2 * STEP)
    return grad


def _targets(class_targets, indices, values):
    indices = np.asarray(indices, dtype=np.int64)
    return EncodedTargets(
        class_targets=np.asarray(class_targets, dtype=np.int64),
        regression=RegressionTargets(indices, np.asarray(values, dtype=np.float64).reshape(len(indices), 12)),
        gt_indices=np.zeros(len(indices), dtype=np.int64),
        categories=["Car"] * len(indices),
        dimensions=np.tile([1.5, 1.6, 3.9], (len(indices), 1)),
    )


class TestFocalLoss(unittest.TestCase):

    def test_gamma_zero_is_cross_entropy(self):
        self.assertAlmostEqual(focal_loss(0.7, 1, gamma=0, balance=1.0).value, -math.log(0.7), places=12)
        self.assertAlmostEqual(focal_loss(0.7, 0, gamma=0, balance=1.0).value, -math.log(0.3), places=12)

    def test_confident_predictions_are_downweighted(self):
        easy = focal_loss(0.95, 1).value
        ce = focal_loss(0.95, 1, gamma=0).value
        self.assertLess(easy, ce * 0.01)

    def test_clamp_keeps_loss_finite(self):
        result = focal_loss(np.array([0.0, 1.0]), np.array([1, 0]))
        self.assertTrue(math.isfinite(result.value))
        self.assertTrue(np.all(np.isfinite(result.gradient)))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.1, 0.9, size=20)
        target = (rng.uniform(size=20) > 0.5).astype(float)
        analytic = focal_loss(p, target).gradient
        np.testing.assert_allclose(analytic, _numeric(lambda: focal_loss(p, target).value, p), rtol=1e-5, atol=1e-9)


class TestSmoothL1(unittest.TestCase):

    def test_pieces(self):
        self.assertAlmostEqual(smooth_l1(0.5).value, 0.125)
        self.assertAlmostEqual(smooth_l1(-3.0).value, 2.5)
        np.testing.assert_allclose(smooth_l1(np.array([0.5, -3.0])).gradient, [0.5, -1.0])

    def test_invalid_beta(self):
        with self.assertRaises(ConfigError):
            smooth_l1(1.0, beta=0.0)


class TestMultibin(unittest.TestCase):
    EDGES = [1.0, 2.0, 3.0, 4.0]

    def test_bin_index_clamps(self):
        self.assertEqual(bin_index(0.2, self.EDGES), 0)
        self.assertEqual(bin_index(2.5, self.EDGES), 1)
        self.assertEqual(bin_index(9.0, self.EDGES), 2)

    def test_decode_bin_center(self):
        self.assertAlmostEqual(multibin_decode([0.1, 3.0, -1.0], self.EDGES), 2.5)

    def test_cross_entropy(self):
        logits = np.array([0.5, -0.2, 1.3])
        result = multibin_ce(logits, 3.5, self.EDGES)
        log_z = math.log(sum(math.exp(v) for v in logits))
        self.assertAlmostEqual(result.value, log_z - 1.3, places=12)
        self.assertAlmostEqual(float(np.sum(result.gradient)), 0.0, places=12)
        np.testing.assert_allclose(
            result.gradient, _numeric(lambda: multibin_ce(logits, 3.5, self.EDGES).value, logits), rtol=1e-5)

    def test_invalid_edges(self):
        with self.assertRaises(GacError):
            multibin_ce([0.0, 0.0], 1.0, [3.0, 2.0, 1.0])
        with self.assertRaises(GacError):
            multibin_ce([0.0], 1.0, [0.0, 2.0])
        with self.assertRaises(ShapeError):
            multibin_ce([0.0, 0.0], 1.0, self.EDGES)


class TestSiLoss(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(1)
        self.gt = rng.normal(size=(6, 7))
        self.mask = rng.uniform(size=(6, 7)) > 0.3

    def test_scale_invariance_at_lambda_one(self):
        self.assertAlmostEqual(si_loss(self.gt + 0.8, self.gt, self.mask, lam=1.0).value, 0.0, places=12)

    def test_constant_shift_law(self):
        for lam in (0.0, 0.3, 0.85):
            value = si_loss(self.gt + 0.5, self.gt, self.mask, lam=lam).value
            self.assertAlmostEqual(value, (1.0 - lam) * 0.25, places=12)

    def test_gradient_and_mask(self):
        rng = np.random.default_rng(2)
        pred = self.gt + rng.normal(size=self.gt.shape)
        result = si_loss(pred, self.gt, self.mask, lam=0.3)
        numeric = _numeric(lambda: si_loss(pred, self.gt, self.mask, lam=0.3).value, pred)
        np.testing.assert_allclose(result.gradient, numeric, rtol=1e-5, atol=1e-8)
        self.assertTrue(np.all(result.gradient[~self.mask] == 0.0))

    def test_empty_mask(self):
        with self.assertRaises(GacError):
            si_loss(self.gt, self.gt, np.zeros_like(self.mask))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            si_loss(self.gt[:, :3], self.gt, self.mask)


class TestSmoothness(unittest.TestCase):

    def test_constant_depth_is_free(self):
        rng = np.random.default_rng(3)
        self.assertEqual(smoothness_loss(np.full((5, 6), 2.0), rng.uniform(size=(3, 5, 6))).value, 0.0)

    def test_image_edges_reduce_penalty(self):
        depth = np.tile(np.arange(6, dtype=float), (5, 1))
        flat = smoothness_loss(depth, np.zeros((5, 6))).value
        edgy = smoothness_loss(depth, np.tile(np.arange(6, dtype=float) * 3.0, (5, 1))).value
        self.assertLess(edgy, flat)
        self.assertAlmostEqual(flat, 25.0 / 30.0)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        depth = rng.normal(size=(5, 6))
        image = rng.uniform(size=(3, 5, 6))
        result = smoothness_loss(depth, image)
        numeric = _numeric(lambda: smoothness_loss(depth, image).value, depth)
        np.testing.assert_allclose(result.gradient, numeric, rtol=1e-5, atol=1e-8)

    def test_total_over_scales(self):
        rng = np.random.default_rng(5)
        preds = [rng.normal(size=(4, 4)), rng.normal(size=(2, 2))]
        gts = [rng.normal(size=(4, 4)), rng.normal(size=(2, 2))]
        masks = [np.ones((4, 4), bool), np.ones((2, 2), bool)]
        images = [rng.uniform(size=(4, 4)), rng.uniform(size=(2, 2))]
        config = DepthLossConfig(lam=0.5, alpha_smooth=0.2, scales=2)
        result = total_depth_loss(preds, gts, masks, images, config)
        expected = sum(si_loss(p, g, m, 0.5).value + 0.2 * smoothness_loss(p, i).value
                       for p, g, m, i in zip(preds, gts, masks, images))
        self.assertAlmostEqual(result.value, expected, places=12)
        self.assertEqual([g.shape for g in result.gradient], [(4, 4), (2, 2)])

    def test_invalid_config(self):
        with self.assertRaises(ConfigError):
            DepthLossConfig(lam=1.5)


class TestDetectionLoss(unittest.TestCase):

    def test_small_components_are_floored(self):
        targets = _targets([1, 0, -1], [0], np.zeros(12))
        probs = np.array([[1.0], [0.0], [0.5]])
        result = detection_loss(probs, np.zeros((3, 12)), targets)
        self.assertAlmostEqual(result.components["cls"], 1e-3)
        self.assertAlmostEqual(result.components["reg"], 1e-3)
        self.assertAlmostEqual(result.components["dim"], 1e-3)
        self.assertAlmostEqual(result.value, 3e-3)
        self.assertNotIn("dim_logits", result.extra_gradients)
        self.assertTrue(np.all(result.gradient == 0.0))

        zeroed = detection_loss(probs, np.zeros((3, 12)), targets, zero_small=True)
        self.assertEqual(zeroed.value, 0.0)

        unclipped = detection_loss(probs, np.zeros((3, 12)), targets, clip_floor=0.0)
        self.assertEqual(unclipped.components["dim"], 0.0)

    def test_ignored_anchors_have_no_gradient(self):
        targets = _targets([1, 0, -1], [0], np.zeros(12))
        probs = np.array([[0.3], [0.6], [0.4]])
        regression = np.zeros((3, 12))
        regression[0, :] = 2.0
        result = detection_loss(probs, regression, targets)
        self.assertEqual(result.gradient[2, 0], 0.0)
        self.assertLess(result.gradient[0, 0], 0.0)
        self.assertGreater(result.gradient[1, 0], 0.0)
        self.assertAlmostEqual(result.components["reg"], 12 * 1.5)
        np.testing.assert_allclose(result.extra_gradients["regression"][0], np.ones(12))
        self.assertTrue(np.all(result.extra_gradients["regression"][1:] == 0.0))

    def test_dimension_bins(self):
        targets = _targets([1, 0], [0], np.ones(12))
        edges = {"Car": np.array([[1.0, 1.5, 2.0], [1.0, 1.5, 2.0], [3.0, 3.5, 4.5]])}
        logits = np.zeros((1, 3, 2))
        result = detection_loss(np.array([[0.2], [0.7]]), np.zeros((2, 12)), targets,
                                dim_logits=logits, bin_edges=edges)
        self.assertAlmostEqual(result.components["dim"], math.log(2.0), places=12)
        self.assertEqual(result.extra_gradients["dim_logits"].shape, (1, 3, 2))

    def test_shape_check(self):
        targets = _targets([1, 0], [0], np.zeros(12))
        with self.assertRaises(ShapeError):
            detection_loss(np.zeros((2, 1)), np.zeros((2, 9)), targets)


if __name__ == '__main__':
    unittest.main()
