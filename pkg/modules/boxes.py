"""
ボックスモジュール
- 2Dボックス / 向き付き3Dボックス
- 3Dコーナー生成と画像平面への投影
- 2D IoU、回転BEV IoU（Sutherland–Hodgman クリッピング）、3D IoU
- 観測角 alpha と yaw の相互変換
"""
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from modules.camera_geometry import CameraIntrinsics, project_points
from modules.utils import GeometryError, normalize_angle

CLIP_EPS = 1e-12


@dataclass(frozen=True)
class Box2D:
    """軸平行2Dボックス（ピクセル）"""
    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        if self.right < self.left or self.bottom < self.top:
            raise GeometryError(f"invalid 2D box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.left + self.right), 0.5 * (self.top + self.bottom))

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.left, self.top, self.right, self.bottom)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box2D":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


@dataclass(frozen=True)
class Box3D:
    """
    向き付き3Dボックス（カメラ座標、y軸下向き）

    center は KITTI の location と同じく底面中心。dims は (w3d, h3d, l3d)。
    """
    center: Tuple[float, float, float]
    dims: Tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        if any(d < 0 for d in self.dims):
            raise GeometryError(f"negative box dimensions {self.dims}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def x(self) -> float:
        return self.center[0]

    @property
    def y(self) -> float:
        return self.center[1]

    @property
    def z(self) -> float:
        return self.center[2]

    @property
    def volume(self) -> float:
        w, h, l = self.dims
        return w * h * l

    def replace(self, center=None, dims=None, yaw=None) -> "Box3D":
        return Box3D(self.center if center is None else center,
                     self.dims if dims is None else dims,
                     self.yaw if yaw is None else yaw)


@dataclass(frozen=True)
class ObservationAngle:
    """観測角 alpha と (sin, cos) エンコード"""
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", normalize_angle(float(self.alpha)))

    def encode(self) -> Tuple[float, float]:
        return (math.sin(self.alpha), math.cos(self.alpha))

    @classmethod
    def from_encoding(cls, sin_a: float, cos_a: float) -> "ObservationAngle":
        """(sin, cos) を単位長に正規化してから角度を取り出す"""
        norm = math.hypot(sin_a, cos_a)
        if norm == 0.0:
            return cls(0.0)
        return cls(math.atan2(sin_a / norm, cos_a / norm))

    @classmethod
    def from_yaw(cls, yaw: float, x3d: float, z3d: float) -> "ObservationAngle":
        return cls(alpha_from_yaw(yaw, x3d, z3d))


def alpha_from_yaw(yaw: float, x3d: float, z3d: float) -> float:
    """alpha = normalize(yaw - atan2(x, z))"""
    if not z3d > 0:
        raise GeometryError(f"nonpositive depth z={z3d}")
    return normalize_angle(yaw - math.atan2(x3d, z3d))


def yaw_from_alpha(alpha: float, x3d: float, z3d: float) -> float:
    """alpha_from_yaw の逆変換"""
    if not z3d > 0:
        raise GeometryError(f"nonpositive depth z={z3d}")
    return normalize_angle(alpha + math.atan2(x3d, z3d))


def corners3d(box: Box3D) -> np.ndarray:
    """yaw回転した直方体の8頂点 (8, 3)。底面 y = y3d、上面 y = y3d - h3d"""
    w, h, l = box.dims
    x_corners = np.array([l, l, -l, -l, l, l, -l, -l]) * 0.5
    y_corners = np.array([0.0, 0.0, 0.0, 0.0, -h, -h, -h, -h])
    z_corners = np.array([w, -w, -w, w, w, -w, -w, w]) * 0.5
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rotation = np.array([[c, 0.0, s],
                         [0.0, 1.0, 0.0],
                         [-s, 0.0, c]])
    corners = rotation @ np.vstack([x_corners, y_corners, z_corners])
    return corners.T + np.asarray(box.center)


def project_box(box: Box3D, intr: CameraIntrinsics) -> Box2D:
    """8頂点を投影した外接矩形（画像範囲でクリップ）"""
    corners = corners3d(box)
    if np.any(corners[:, 2] <= 0):
        raise GeometryError("behind-camera: box has corners with z <= 0")
    uv = project_points(corners, intr)
    max_u = float(intr.image_w - 1)
    max_v = float(intr.image_h - 1)
    left = min(max(float(uv[:, 0].min()), 0.0), max_u)
    right = min(max(float(uv[:, 0].max()), 0.0), max_u)
    top = min(max(float(uv[:, 1].min()), 0.0), max_v)
    bottom = min(max(float(uv[:, 1].max()), 0.0), max_v)
    return Box2D(left, top, right, bottom)


def iou_2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_2d_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """(N, 4) と (M, 4) の [l, t, r, b] 配列から (N, M) の IoU 行列"""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2]) - np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    ih = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3]) - np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return iou


def bev_polygon(box: Box3D) -> List[Tuple[float, float]]:
    """地面 (x, z) 平面上の回転矩形（反時計回り）。長さ l は進行方向、幅 w は横方向"""
    corners = corners3d(box)[:4]
    polygon = [(float(p[0]), float(p[2])) for p in corners]
    if polygon_area(polygon) < 0:
        polygon.reverse()
    return polygon


def polygon_area(polygon: Sequence[Tuple[float, float]]) -> float:
    """符号付き面積（反時計回りで正）"""
    n = len(polygon)
    if n < 3:
        return 0.0
    area = 0.0
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        area += x1 * y2 - x2 * y1
    return 0.5 * area


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _segment_intersection(p, q, a, b):
    """線分 pq と直線 ab の交点"""
    dx1, dy1 = q[0] - p[0], q[1] - p[1]
    dx2, dy2 = b[0] - a[0], b[1] - a[1]
    denom = dx1 * dy2 - dy1 * dx2
    if abs(denom) < CLIP_EPS:
        return q
    t = ((a[0] - p[0]) * dy2 - (a[1] - p[1]) * dx2) / denom
    return (p[0] + t * dx1, p[1] + t * dy1)


def _dedupe(polygon: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
    result: List[Tuple[float, float]] = []
    for point in polygon:
        if result and abs(point[0] - result[-1][0]) <= CLIP_EPS and abs(point[1] - result[-1][1]) <= CLIP_EPS:
            continue
        result.append(point)
    if len(result) > 1 and abs(result[0][0] - result[-1][0]) <= CLIP_EPS and abs(result[0][1] - result[-1][1]) <= CLIP_EPS:
        result.pop()
    return result


def clip_polygon(subject: Sequence[Tuple[float, float]], window: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Sutherland–Hodgman: subject を凸多角形 window（反時計回り）でクリップ"""
    output = list(subject)
    n = len(window)
    for i in range(n):
        if not output:
            break
        a, b = window[i], window[(i + 1) % n]
        candidates = output
        output = []
        prev = candidates[-1]
        prev_inside = _cross(a, b, prev) >= -CLIP_EPS
        for point in candidates:
            inside = _cross(a, b, point) >= -CLIP_EPS
            if inside:
                if not prev_inside:
                    output.append(_segment_intersection(prev, point, a, b))
                output.append(point)
            elif prev_inside:
                output.append(_segment_intersection(prev, point, a, b))
            prev, prev_inside = point, inside
        output = _dedupe(output)
    return output


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    poly_a = bev_polygon(a)
    poly_b = bev_polygon(b)
    clipped = clip_polygon(poly_a, poly_b)
    if len(clipped) < 3:
        return 0.0
    return max(polygon_area(clipped), 0.0)


def iou_bev(a: Box3D, b: Box3D) -> float:
    if a == b and a.dims[0] * a.dims[2] > 0:
        return 1.0
    inter = bev_intersection_area(a, b)
    area_a = a.dims[0] * a.dims[2]
    area_b = b.dims[0] * b.dims[2]
    union = area_a + area_b - inter
    if union <= 0 or inter <= 0:
        return 0.0
    return min(inter / union, 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    if a == b and a.volume > 0:
        return 1.0
    # 高さ方向は [y - h, y]（y下向き・底面基準）
    top = max(a.y - a.dims[1], b.y - b.dims[1])
    bottom = min(a.y, b.y)
    overlap_h = bottom - top
    if overlap_h <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * overlap_h
    union = a.volume + b.volume - inter
    if union <= 0 or inter <= 0:
        return 0.0
    return min(inter / union, 1.0)
