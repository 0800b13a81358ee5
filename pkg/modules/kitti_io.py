"""
KITTI ファイル解析モジュール
- キャリブレーション / ラベル / 予測ファイルの読み書き
- 左右反転と上部クロップ、入力解像度へのスケーリング
"""
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.boxes import Box2D, Box3D, alpha_from_yaw
from modules.camera_geometry import CameraIntrinsics
from modules.utils import (
    GeometryError,
    MissingDataError,
    ParseError,
    format_float,
    normalize_angle,
    parse_floats,
    parse_key_value_lines,
)

logger = logging.getLogger(__name__)

PROJECTION_KEYS = ("P0", "P1", "P2", "P3")
RECT_KEY = "R0_rect"
VELO_KEY = "Tr_velo_to_cam"
DONTCARE = "DontCare"


@dataclass(frozen=True, eq=False)
class CalibrationFile:
    """キャリブレーション（投影行列 3x4、平行化行列 3x3、LiDAR→カメラ 3x4）"""
    projections: Dict[str, np.ndarray]
    rectification: Optional[np.ndarray] = None
    velo_to_cam: Optional[np.ndarray] = None
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, matrix in self.projections.items():
            _check_matrix(name, matrix, (3, 4))
        if self.rectification is not None:
            _check_matrix(RECT_KEY, self.rectification, (3, 3))
        if self.velo_to_cam is not None:
            _check_matrix(VELO_KEY, self.velo_to_cam, (3, 4))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CalibrationFile):
            return NotImplemented
        return (_dict_equal(self.projections, other.projections)
                and _optional_equal(self.rectification, other.rectification)
                and _optional_equal(self.velo_to_cam, other.velo_to_cam)
                and _dict_equal(self.extras, other.extras))

    def allclose(self, other: "CalibrationFile", atol: float = 1e-9) -> bool:
        if set(self.projections) != set(other.projections):
            return False
        return all(np.allclose(self.projections[k], other.projections[k], rtol=0.0, atol=atol)
                   for k in self.projections)

    def map_projections(self, func) -> "CalibrationFile":
        """全投影行列に func を適用した新しいキャリブレーション"""
        projections = {name: func(matrix.copy()) for name, matrix in self.projections.items()}
        return replace(self, projections=projections)


def _check_matrix(name: str, matrix: np.ndarray, shape: Tuple[int, int]) -> None:
    if matrix.shape != shape:
        raise ParseError(f"{name} must be {shape[0]}x{shape[1]}, got {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ParseError(f"{name} has non-finite entries")


def _optional_equal(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


def _dict_equal(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray]) -> bool:
    if set(a) != set(b):
        return False
    return all(_optional_equal(a[k], b[k]) for k in a)


@dataclass(frozen=True)
class LabelRecord:
    """KITTI ラベル1行分。dimensions は (h3d, w3d, l3d)、location は底面中心"""
    category: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: Box2D
    dimensions: Tuple[float, float, float]
    location: Tuple[float, float, float]
    rotation_y: float
    score: Optional[float] = None

    @property
    def is_dontcare(self) -> bool:
        return self.category == DONTCARE

    def to_box3d(self) -> Box3D:
        h, w, l = self.dimensions
        return Box3D(center=self.location, dims=(w, h, l), yaw=self.rotation_y)

    @classmethod
    def from_box3d(cls, category: str, box2d: Box2D, box3d: Box3D, alpha: float,
                   score: Optional[float] = None, truncation: float = 0.0, occlusion: int = 0) -> "LabelRecord":
        w, h, l = box3d.dims
        return cls(category, truncation, occlusion, normalize_angle(alpha), box2d,
                   (h, w, l), tuple(box3d.center), box3d.yaw, score)


# ---------------------------------------------------------------------------
# キャリブレーション

def parse_calibration(text: str) -> CalibrationFile:
    """KITTI キャリブレーションを解析。未知のキーは extras に保持"""
    projections: Dict[str, np.ndarray] = {}
    rectification = None
    velo_to_cam = None
    extras: Dict[str, np.ndarray] = {}
    for lineno, key, value in parse_key_value_lines(text):
        values = parse_floats(value.split(), lineno)
        if key in PROJECTION_KEYS:
            if len(values) != 12:
                raise ParseError(f"{key} expects 12 values, got {len(values)}", lineno)
            projections[key] = np.array(values).reshape(3, 4)
        elif key == RECT_KEY:
            if len(values) != 9:
                raise ParseError(f"{key} expects 9 values, got {len(values)}", lineno)
            rectification = np.array(values).reshape(3, 3)
        elif key == VELO_KEY:
            if len(values) != 12:
                raise ParseError(f"{key} expects 12 values, got {len(values)}", lineno)
            velo_to_cam = np.array(values).reshape(3, 4)
        else:
            extras[key] = np.array(values)
    return CalibrationFile(projections, rectification, velo_to_cam, extras)


def write_calibration(calib: CalibrationFile) -> str:
    """キャリブレーションを正準形式のテキストにする（値は最短往復表記）"""
    lines = []
    for key in PROJECTION_KEYS:
        if key in calib.projections:
            lines.append(_matrix_line(key, calib.projections[key]))
    for key in sorted(k for k in calib.projections if k not in PROJECTION_KEYS):
        lines.append(_matrix_line(key, calib.projections[key]))
    if calib.rectification is not None:
        lines.append(_matrix_line(RECT_KEY, calib.rectification))
    if calib.velo_to_cam is not None:
        lines.append(_matrix_line(VELO_KEY, calib.velo_to_cam))
    for key in sorted(calib.extras):
        lines.append(_matrix_line(key, calib.extras[key]))
    return "\n".join(lines) + "\n"


def _matrix_line(key: str, matrix: np.ndarray) -> str:
    values = " ".join(format_float(v) for v in np.asarray(matrix).ravel())
    return f"{key}: {values}" if values else f"{key}:"


def intrinsics_from_calibration(calib: CalibrationFile, camera: str = "P2",
                                image_w: int = 1242, image_h: int = 375) -> CameraIntrinsics:
    """投影行列から f_x, f_y, c_x, c_y, T_y を取り出す"""
    if camera not in calib.projections:
        raise MissingDataError(f"missing {camera}")
    P = calib.projections[camera]
    return CameraIntrinsics(f_x=float(P[0, 0]), f_y=float(P[1, 1]), c_x=float(P[0, 2]),
                            c_y=float(P[1, 2]), T_y=float(P[1, 3]), image_w=image_w, image_h=image_h)


# ---------------------------------------------------------------------------
# ラベル / 予測

def parse_labels(text: str) -> List[LabelRecord]:
    """ラベルまたは予測ファイルを解析（15列、スコア付きは16列）"""
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) not in (15, 16):
            raise ParseError(f"expected 15 or 16 fields, got {len(tokens)}", lineno)
        category = tokens[0]
        numbers = parse_floats(tokens[1:], lineno)
        truncation, occlusion_raw, alpha = numbers[0:3]
        if occlusion_raw != int(occlusion_raw):
            raise ParseError(f"occlusion must be an integer, got {tokens[2]!r}", lineno)
        left, top, right, bottom = numbers[3:7]
        h, w, l = numbers[7:10]
        x, y, z = numbers[10:13]
        rotation_y = numbers[13]
        score = numbers[14] if len(numbers) == 15 else None
        if category != DONTCARE:
            if min(h, w, l) < 0:
                raise ParseError(f"negative dimensions ({h}, {w}, {l})", lineno)
            if z < 0:
                raise ParseError(f"negative depth z={z}", lineno)
        try:
            bbox = Box2D(left, top, right, bottom)
        except GeometryError as e:
            raise ParseError(str(e), lineno) from None
        records.append(LabelRecord(
            category=category,
            truncation=truncation,
            occlusion=int(occlusion_raw),
            alpha=alpha if category == DONTCARE else normalize_angle(alpha),
            bbox2d=bbox,
            dimensions=(h, w, l),
            location=(x, y, z),
            rotation_y=rotation_y if category == DONTCARE else normalize_angle(rotation_y),
            score=score,
        ))
    return records


def write_labels(records: Sequence[LabelRecord], precise: bool = False) -> str:
    """
    ラベルをKITTI形式で書き出す

    幾何は devkit と同じ小数2桁、スコアは小数6桁。precise=True で最短往復表記。
    """
    fmt = format_float if precise else (lambda v: f"{v:.2f}")
    lines = []
    for r in records:
        fields = [
            r.category,
            fmt(r.truncation),
            str(r.occlusion),
            fmt(r.alpha),
            *(fmt(v) for v in r.bbox2d.as_tuple()),
            *(fmt(v) for v in r.dimensions),
            *(fmt(v) for v in r.location),
            fmt(r.rotation_y),
        ]
        if r.score is not None:
            fields.append(format_float(r.score) if precise else f"{r.score:.6f}")
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def write_predictions(records: Sequence[LabelRecord], precise: bool = False) -> str:
    """予測ファイル。スコアがない行は 1.0 とみなして必ず書く"""
    scored = [r if r.score is not None else replace(r, score=1.0) for r in records]
    return write_labels(scored, precise=precise)


def read_calibration_file(path) -> CalibrationFile:
    return parse_calibration(Path(path).read_text(encoding="utf-8"))


def read_label_file(path) -> List[LabelRecord]:
    return parse_labels(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# データ拡張・前処理

def flip_horizontal(labels: Sequence[LabelRecord], calib: CalibrationFile,
                    image_width: int) -> Tuple[List[LabelRecord], CalibrationFile]:
    """左右反転。2回適用すると元に戻る"""
    if not image_width > 0:
        raise GeometryError(f"image width must be positive, got {image_width}")
    edge = image_width - 1.0

    def mirror_projection(P: np.ndarray) -> np.ndarray:
        P[0, 2] = edge - P[0, 2]
        # x 方向の並進も反転させて投影との整合を保つ
        P[0, 3] = -P[0, 3]
        return P

    flipped = []
    for r in labels:
        box = r.bbox2d
        bbox = Box2D(edge - box.right, box.top, edge - box.left, box.bottom)
        x, y, z = r.location
        location = (-x, y, z)
        rotation_y = normalize_angle(math.pi - r.rotation_y)
        if z > 0:
            alpha = alpha_from_yaw(rotation_y, -x, z)
        else:
            alpha = normalize_angle(math.pi - r.alpha)
        flipped.append(replace(r, bbox2d=bbox, location=location, rotation_y=rotation_y, alpha=alpha))
    return flipped, calib.map_projections(mirror_projection)


def crop_top(calib: CalibrationFile, labels: Sequence[LabelRecord],
             crop_rows: float) -> Tuple[CalibrationFile, List[LabelRecord]]:
    """画像上部 crop_rows 行を切り落とす。c_y と2Dボックスのyだけが変わる"""
    if crop_rows < 0:
        raise GeometryError(f"crop_rows must be >= 0, got {crop_rows}")
    if crop_rows == 0:
        return calib, list(labels)

    def shift_rows(P: np.ndarray) -> np.ndarray:
        # v' = v - crop  <=>  row1' = row1 - crop * row2
        P[1, :] -= crop_rows * P[2, :]
        return P

    cropped = []
    for r in labels:
        box = r.bbox2d
        bbox = Box2D(box.left, max(box.top - crop_rows, 0.0), box.right, max(box.bottom - crop_rows, 0.0))
        cropped.append(replace(r, bbox2d=bbox))
    return calib.map_projections(shift_rows), cropped


def scale_calibration(calib: CalibrationFile, labels: Sequence[LabelRecord],
                      scale_x: float, scale_y: float) -> Tuple[CalibrationFile, List[LabelRecord]]:
    """入力画像のリサイズに合わせて投影行列と2Dボックスをスケーリング"""
    if not (scale_x > 0 and scale_y > 0):
        raise GeometryError(f"scale factors must be positive, got ({scale_x}, {scale_y})")

    def scale_rows(P: np.ndarray) -> np.ndarray:
        P[0, :] *= scale_x
        P[1, :] *= scale_y
        return P

    scaled = []
    for r in labels:
        box = r.bbox2d
        bbox = Box2D(box.left * scale_x, box.top * scale_y, box.right * scale_x, box.bottom * scale_y)
        scaled.append(replace(r, bbox2d=bbox))
    return calib.map_projections(scale_rows), scaled


def prepare_frame(calib: CalibrationFile, labels: Sequence[LabelRecord], crop_rows: int,
                  image_size: Tuple[int, int], input_size: Optional[Tuple[int, int]] = None,
                  camera: str = "P2") -> Tuple[CameraIntrinsics, CalibrationFile, List[LabelRecord]]:
    """
    ネットワーク入力座標系へ変換: 上部クロップ → 入力解像度へリサイズ

    image_size / input_size は (幅, 高さ)。input_size が None ならリサイズしない。
    """
    image_w, image_h = image_size
    calib, labels = crop_top(calib, labels, crop_rows)
    out_w, out_h = image_w, image_h - crop_rows
    if input_size is not None and tuple(input_size) != (out_w, out_h):
        target_w, target_h = input_size
        calib, labels = scale_calibration(calib, labels, target_w / out_w, target_h / out_h)
        out_w, out_h = target_w, target_h
    intr = intrinsics_from_calibration(calib, camera, image_w=int(out_w), image_h=int(out_h))
    return intr, calib, labels
