import unittest
import sys
import os
import math
import tempfile
from dataclasses import replace
from pathlib import Path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import numpy as np
from modules.boxes import Box3D, alpha_from_yaw, project_box
from modules.camera_geometry import project
from modules.kitti_io import (
    crop_top,
    flip_horizontal,
    intrinsics_from_calibration,
    parse_calibration,
    parse_labels,
    prepare_frame,
    read_calibration_file,
    scale_calibration,
    write_calibration,
    write_labels,
    write_predictions,
)
from modules.utils import MissingDataError, ParseError

CALIB_TEXT = """P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P1: 7.215377e+02 0.000000e+00 6.095593e+02 -3.875744e+02 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
P3: 7.215377e+02 0.000000e+00 6.095593e+02 -3.395242e+02 0.000000e+00 7.215377e+02 1.728540e+02 2.199936e+00 0.000000e+00 0.000000e+00 1.000000e+00 2.729905e-03
R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
Tr_velo_to_cam: 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 -9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01
Tr_imu_to_velo: 9.999976e-01 7.553071e-04 -2.035826e-03 -8.086759e-01 -7.854027e-04 9.998898e-01 -1.482298e-02 3.195559e-01 2.024406e-03 1.482454e-02 9.998881e-01 -7.997231e-01
"""

LABEL_TEXT = """Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59
Pedestrian 0.00 1 0.21 423.17 173.67 433.17 224.03 1.60 0.38 0.30 -5.87 1.63 23.11 -0.03
DontCare -1.00 -1 -10.00 503.89 169.71 590.61 190.13 -1.00 -1.00 -1.00 -1000.00 -1000.00 -1000.00 -10.00
"""


class TestCalibration(unittest.TestCase):

    def test_parse_shapes(self):
        calib = parse_calibration(CALIB_TEXT)
        self.assertEqual(sorted(calib.projections), ["P0", "P1", "P2", "P3"])
        self.assertEqual(calib.rectification.shape, (3, 3))
        self.assertEqual(calib.velo_to_cam.shape, (3, 4))
        self.assertIn("Tr_imu_to_velo", calib.extras)

    def test_intrinsics(self):
        intr = intrinsics_from_calibration(parse_calibration(CALIB_TEXT))
        self.assertEqual(intr.f_x, 721.5377)
        self.assertEqual(intr.c_y, 172.854)
        self.assertEqual(intr.T_y, 0.2163791)

    def test_missing_camera(self):
        calib = parse_calibration("P0: " + " ".join(["1"] * 12))
        with self.assertRaises(MissingDataError) as ctx:
            intrinsics_from_calibration(calib)
        self.assertIn("missing P2", str(ctx.exception))

    def test_wrong_count_reports_line(self):
        with self.assertRaises(ParseError) as ctx:
            parse_calibration("P0: 1 2 3\n")
        self.assertEqual(ctx.exception.line, 1)

    def test_write_parse_fixpoint(self):
        calib = parse_calibration(CALIB_TEXT)
        text = write_calibration(calib)
        self.assertEqual(parse_calibration(text), calib)
        self.assertEqual(write_calibration(parse_calibration(text)), text)

    def test_read_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "000000.txt"
            path.write_text(CALIB_TEXT, encoding="utf-8")
            self.assertEqual(read_calibration_file(path), parse_calibration(CALIB_TEXT))


class TestLabels(unittest.TestCase):

    def test_parse_fields(self):
        labels = parse_labels(LABEL_TEXT)
        self.assertEqual(len(labels), 3)
        car = labels[0]
        self.assertEqual(car.category, "Car")
        self.assertEqual(car.dimensions, (1.65, 1.67, 3.64))
        self.assertEqual(car.location, (-0.65, 1.71, 46.70))
        self.assertIsNone(car.score)
        self.assertTrue(labels[2].is_dontcare)

    def test_write_parse_fixpoint(self):
        text = write_labels(parse_labels(LABEL_TEXT))
        self.assertEqual(text, LABEL_TEXT)
        self.assertEqual(parse_labels(text), parse_labels(LABEL_TEXT))

    def test_predictions_carry_score(self):
        text = write_predictions(parse_labels(LABEL_TEXT)[:1])
        record = parse_labels(text)[0]
        self.assertEqual(record.score, 1.0)

    def test_precise_round_trip(self):
        record = replace(parse_labels(LABEL_TEXT)[0], location=(0.1234567891, 1.65, 20.000000001), score=0.123456789)
        self.assertEqual(parse_labels(write_labels([record], precise=True))[0], record)

    def test_field_count(self):
        with self.assertRaises(ParseError):
            parse_labels("Car 0 0 0 1 2 3 4\n")

    def test_negative_dimensions(self):
        with self.assertRaises(ParseError):
            parse_labels("Car 0.00 0 0.0 1 2 3 4 -1.0 1.0 1.0 0.0 1.0 10.0 0.0\n")

    def test_box3d_conversion(self):
        car = parse_labels(LABEL_TEXT)[0]
        box = car.to_box3d()
        self.assertEqual(box.dims, (1.67, 1.65, 3.64))


class TestAugmentation(unittest.TestCase):

    def setUp(self):
        self.calib = parse_calibration(CALIB_TEXT)
        self.labels = parse_labels(LABEL_TEXT)[:2]

    def test_flip_involution(self):
        labels, calib = flip_horizontal(*flip_horizontal(self.labels, self.calib, 1242), 1242)
        self.assertTrue(calib.allclose(self.calib, atol=1e-9))
        for a, b in zip(labels, self.labels):
            np.testing.assert_allclose(a.bbox2d.as_tuple(), b.bbox2d.as_tuple(), atol=1e-9)
            np.testing.assert_allclose(a.location, b.location, atol=1e-9)
            self.assertAlmostEqual(math.cos(a.rotation_y - b.rotation_y), 1.0, places=12)
            expected = alpha_from_yaw(b.rotation_y, b.location[0], b.location[2])
            self.assertAlmostEqual(math.cos(a.alpha - expected), 1.0, places=9)

    def test_flip_mirrors_projection(self):
        intr = intrinsics_from_calibration(self.calib)
        labels, calib = flip_horizontal(self.labels, self.calib, 1242)
        flipped = intrinsics_from_calibration(calib)
        x, y, z = self.labels[0].location
        u, v = project((x, y, z), intr)
        u2, v2 = project((-x, y, z), flipped)
        self.assertAlmostEqual(u2, 1241.0 - u, places=9)
        self.assertAlmostEqual(v2, v, places=9)

    def test_crop_shifts_rows_only(self):
        calib, labels = crop_top(self.calib, self.labels, 100)
        before = intrinsics_from_calibration(self.calib)
        after = intrinsics_from_calibration(calib)
        self.assertAlmostEqual(after.c_y, before.c_y - 100)
        self.assertEqual(after.c_x, before.c_x)
        self.assertAlmostEqual(labels[0].bbox2d.top, self.labels[0].bbox2d.top - 100)
        point = (2.0, 1.5, 20.0)
        P_old = self.calib.projections["P2"]
        P_new = calib.projections["P2"]
        h = np.append(point, 1.0)
        old = P_old @ h
        new = P_new @ h
        self.assertAlmostEqual(new[1] / new[2], old[1] / old[2] - 100, places=9)

    def test_crop_zero_is_identity(self):
        calib, labels = crop_top(self.calib, self.labels, 0)
        self.assertEqual(calib, self.calib)
        self.assertEqual(labels, self.labels)

    def test_scale(self):
        calib, labels = scale_calibration(self.calib, self.labels, 2.0, 0.5)
        intr = intrinsics_from_calibration(calib)
        self.assertAlmostEqual(intr.f_x, 2 * 721.5377)
        self.assertAlmostEqual(intr.c_y, 0.5 * 172.854)
        self.assertAlmostEqual(labels[0].bbox2d.right, 2 * 614.12)

    def test_prepare_frame_network_input(self):
        box = Box3D((3.0, 1.65, 15.0), (1.6, 1.5, 3.9), 0.4)
        def no_depth_offset(P):
            P[2, 3] = 0.0
            return P

        base = self.calib.map_projections(no_depth_offset)
        intr, calib, _ = prepare_frame(base, [], 100, (1242, 375), (1280, 288))
        self.assertEqual((intr.image_w, intr.image_h), (1280, 288))
        original = intrinsics_from_calibration(base)
        u, v = project(box.center, original)
        u2, v2 = project(box.center, intr)
        self.assertAlmostEqual(u2, u * 1280 / 1242, places=6)
        self.assertAlmostEqual(v2, (v - 100) * 288 / 275, places=6)
        self.assertGreater(project_box(box, intr).height, 0)


if __name__ == '__main__':
    unittest.main()
