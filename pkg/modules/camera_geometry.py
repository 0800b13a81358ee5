"""
カメラ幾何モジュール
- ピンホール投影と逆投影
- 地面平面による奥行き事前分布
- 仮想視差エンコード（負の視差はReLUで抑制）
- 特徴マップ解像度の事前分布マップ生成
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from modules.utils import ConfigError, GeometryError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class CameraIntrinsics:
    """投影パラメータ（ピクセル単位、T_y はメートル・ピクセル）"""
    f_x: float
    f_y: float
    c_x: float
    c_y: float
    T_y: float = 0.0
    image_w: int = 1242
    image_h: int = 375

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise GeometryError(f"focal lengths must be positive: f_x={self.f_x}, f_y={self.f_y}")
        if not (self.image_w > 0 and self.image_h > 0):
            raise GeometryError(f"image size must be positive: {self.image_w}x{self.image_h}")

    def with_image_size(self, image_w: int, image_h: int) -> "CameraIntrinsics":
        return CameraIntrinsics(self.f_x, self.f_y, self.c_x, self.c_y, self.T_y, image_w, image_h)


@dataclass(frozen=True)
class GroundModel:
    """カメラ高さ EL と仮想ステレオ基線長 B（メートル）"""
    elevation: float = 1.65
    virtual_baseline: float = 0.54

    def __post_init__(self):
        if not self.elevation > 0:
            raise ConfigError(f"ground elevation must be positive: {self.elevation}")
        if not self.virtual_baseline > 0:
            raise ConfigError(f"virtual baseline must be positive: {self.virtual_baseline}")


def project(point3d: Tuple[float, float, float], intr: CameraIntrinsics) -> Tuple[float, float]:
    """3D点 (x, y, z) を画像座標 (u, v) へ投影"""
    x, y, z = point3d
    if not z > 0:
        raise GeometryError(f"nonpositive depth z={z}")
    u = intr.f_x * x / z + intr.c_x
    v = (intr.f_y * y + intr.T_y) / z + intr.c_y
    return u, v


def project_points(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """(N, 3) の点群をまとめて投影し (N, 2) を返す"""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    if np.any(z <= 0):
        raise GeometryError("nonpositive depth in point set")
    u = intr.f_x * points[:, 0] / z + intr.c_x
    v = (intr.f_y * points[:, 1] + intr.T_y) / z + intr.c_y
    return np.stack([u, v], axis=1)


def backproject(u: float, v: float, z: float, intr: CameraIntrinsics,
                ignore_ty: bool = False) -> Tuple[float, float, float]:
    """
    画素 (u, v) と奥行き z から3D点を復元

    既定では project の厳密な逆写像（T_y 補正込み）。
    ignore_ty=True で T_y を無視した単純な式になる。
    """
    if not z > 0:
        raise GeometryError(f"nonpositive depth z={z}")
    x3d = (u - intr.c_x) / intr.f_x * z
    y3d = (v - intr.c_y) / intr.f_y * z
    if not ignore_ty:
        y3d -= intr.T_y / intr.f_y
    return x3d, y3d, z


def _ground_numerator(intr: CameraIntrinsics, ground: GroundModel) -> float:
    numerator = intr.f_y * ground.elevation + intr.T_y
    if not numerator > 0:
        raise GeometryError(f"f_y*EL + T_y must be positive, got {numerator}")
    return numerator


def ground_depth(v: float, intr: CameraIntrinsics, ground: GroundModel) -> Optional[float]:
    """地面上の画素行 v までの奥行き。消失線以上の行は None（事前分布なし）"""
    numerator = _ground_numerator(intr, ground)
    if v <= intr.c_y:
        return None
    return numerator / (v - intr.c_y)


def ground_depth_map(rows: np.ndarray, intr: CameraIntrinsics, ground: GroundModel) -> np.ndarray:
    """行ごとの地面奥行き。事前分布のない行は NaN ではなくマスクで返す"""
    rows = np.asarray(rows, dtype=np.float64)
    numerator = _ground_numerator(intr, ground)
    valid = rows > intr.c_y
    depth = np.zeros_like(rows)
    depth[valid] = numerator / (rows[valid] - intr.c_y)
    return np.ma.masked_array(depth, mask=~valid)


def virtual_disparity(v: ArrayLike, intr: CameraIntrinsics, ground: GroundModel) -> ArrayLike:
    """仮想視差 d = max(0, f_y·B·(v - c_y) / (f_y·EL + T_y))"""
    numerator = _ground_numerator(intr, ground)
    scale = intr.f_y * ground.virtual_baseline / numerator
    d = np.maximum(0.0, scale * (np.asarray(v, dtype=np.float64) - intr.c_y))
    if np.ndim(d) == 0:
        return float(d)
    return d


def depth_prior_map(intr: CameraIntrinsics, ground: GroundModel, stride: int, rows: int, cols: int):
    """
    1 x rows x cols の奥行き事前分布特徴マップ

    行 r の値は画素中心 v = (r + 0.5) * stride での仮想視差で、列方向には一定。
    """
    from modules.gac_core import FeatureMap

    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if rows < 1 or cols < 1:
        raise ConfigError(f"grid must be non-empty, got {rows}x{cols}")
    if rows * stride < intr.image_h or cols * stride < intr.image_w:
        logger.debug("prior grid %dx%d at stride %d does not cover %dx%d image",
                     rows, cols, stride, intr.image_h, intr.image_w)
    centers = (np.arange(rows, dtype=np.float64) + 0.5) * stride
    column = virtual_disparity(centers, intr, ground)
    data = np.repeat(np.asarray(column).reshape(1, rows, 1), cols, axis=2)
    return FeatureMap(data)
