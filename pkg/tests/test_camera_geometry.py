import unittest
import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import numpy as np
from modules.camera_geometry import (
    CameraIntrinsics,
    GroundModel,
    backproject,
    depth_prior_map,
    ground_depth,
    ground_depth_map,
    project,
    project_points,
    virtual_disparity,
)
from modules.utils import ConfigError, GeometryError

KITTI = CameraIntrinsics(f_x=721.5377, f_y=721.5377, c_x=609.5593, c_y=172.854, T_y=0.2163791,
                         image_w=1242, image_h=375)


class TestProjection(unittest.TestCase):

    def test_principal_point(self):
        u, v = project((0.0, 0.0, 10.0), CameraIntrinsics(700.0, 700.0, 600.0, 180.0))
        self.assertEqual((u, v), (600.0, 180.0))

    def test_project_backproject_inverse(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            point = (rng.uniform(-20, 20), rng.uniform(-3, 3), rng.uniform(1, 80))
            u, v = project(point, KITTI)
            restored = backproject(u, v, point[2], KITTI)
            np.testing.assert_allclose(restored, point, rtol=1e-9, atol=1e-9)

    def test_strict_mode_drops_ty(self):
        u, v = project((1.0, 1.0, 10.0), KITTI)
        exact = backproject(u, v, 10.0, KITTI)
        strict = backproject(u, v, 10.0, KITTI, ignore_ty=True)
        self.assertAlmostEqual(strict[1] - exact[1], KITTI.T_y / KITTI.f_y, places=12)

    def test_nonpositive_depth(self):
        with self.assertRaises(GeometryError):
            project((0.0, 0.0, 0.0), KITTI)
        with self.assertRaises(GeometryError):
            backproject(10.0, 10.0, -1.0, KITTI)
        with self.assertRaises(GeometryError):
            project_points(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]), KITTI)

    def test_vectorized_matches_scalar(self):
        points = np.array([[1.0, 1.5, 10.0], [-3.0, 0.5, 25.0]])
        uv = project_points(points, KITTI)
        for p, row in zip(points, uv):
            np.testing.assert_allclose(project(tuple(p), KITTI), row, rtol=1e-12)

    def test_invalid_intrinsics(self):
        with self.assertRaises(GeometryError):
            CameraIntrinsics(0.0, 700.0, 600.0, 180.0)


class TestGroundPrior(unittest.TestCase):

    def test_ground_point_round_trip(self):
        ground = GroundModel()
        z = ground_depth(300.0, KITTI, ground)
        u, v = project((0.0, ground.elevation, z), KITTI)
        self.assertAlmostEqual(v, 300.0, places=9)

    def test_no_prior_above_vanishing_line(self):
        ground = GroundModel()
        self.assertIsNone(ground_depth(KITTI.c_y, KITTI, ground))
        self.assertIsNone(ground_depth(50.0, KITTI, ground))
        self.assertEqual(virtual_disparity(50.0, KITTI, ground), 0.0)

    def test_disparity_depth_product(self):
        rng = np.random.default_rng(1)
        ground = GroundModel()
        for _ in range(100):
            intr = CameraIntrinsics(rng.uniform(300, 1500), rng.uniform(300, 1500),
                                    rng.uniform(300, 900), rng.uniform(100, 250), rng.uniform(-0.5, 0.5))
            rows = np.linspace(intr.c_y + 0.5, intr.c_y + 2000.0, 10000)
            z = ground_depth_map(rows, intr, ground)
            d = virtual_disparity(rows, intr, ground)
            np.testing.assert_allclose(d * z.filled(np.nan), intr.f_y * ground.virtual_baseline, rtol=1e-9)
            self.assertTrue(np.all(np.diff(z.filled(np.nan)) < 0))
            self.assertTrue(np.all(np.diff(d) >= 0))

    def test_depth_map_masks_sky_rows(self):
        z = ground_depth_map(np.array([10.0, 172.854, 300.0]), KITTI, GroundModel())
        self.assertEqual(list(z.mask), [True, True, False])

    def test_invalid_ground(self):
        with self.assertRaises(ConfigError):
            GroundModel(elevation=0.0)


class TestPriorMap(unittest.TestCase):

    def test_shape_and_columns(self):
        intr = KITTI.with_image_size(1280, 288)
        prior = depth_prior_map(intr, GroundModel(), 16, 18, 80)
        self.assertEqual(prior.data.shape, (1, 18, 80))
        self.assertTrue(np.all(prior.data == prior.data[:, :, :1]))

    def test_rows_above_horizon_are_zero(self):
        intr = CameraIntrinsics(721.5, 721.5, 640.0, 100.0, image_w=1280, image_h=288)
        prior = depth_prior_map(intr, GroundModel(), 16, 18, 80)
        rows_above = (np.arange(18) + 0.5) * 16 <= intr.c_y
        self.assertTrue(np.all(prior.data[0, rows_above] == 0.0))
        self.assertTrue(np.all(prior.data[0, ~rows_above] > 0.0))

    def test_bad_stride(self):
        with self.assertRaises(ConfigError):
            depth_prior_map(KITTI, GroundModel(), 0, 18, 80)


if __name__ == '__main__':
    unittest.main()
