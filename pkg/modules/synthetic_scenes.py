"""
合成シーン生成モジュール
- 地面平面上に物体を置いた (キャリブレーション, ラベル) の決定的生成
- SplitMix64 によるカウンタベース乱数（フレーム番号ごとに独立なストリーム）
- 山登り法テスト用の摂動付き予測の生成
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Sequence, Tuple

import numpy as np

from modules.boxes import Box3D, alpha_from_yaw, corners3d, project_box
from modules.camera_geometry import CameraIntrinsics, GroundModel, project, project_points
from modules.kitti_io import CalibrationFile, LabelRecord
from modules.utils import ConfigError, normalize_angle, parallel_map

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIN_DEPTH_MARGIN = 0.1


def mix64(z: int) -> int:
    """SplitMix64 の出力関数"""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """
    64bit SplitMix64 生成器

    state += 0x9E3779B97F4A7C15 してから mix64 を返す。一様乱数は上位53bitから作る。
    整数演算のみなのでプラットフォームに依存しない。
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        # Box-Muller（1回の呼び出しで2つ消費）
        u1 = self.uniform()
        u2 = self.uniform()
        radius = math.sqrt(-2.0 * math.log(1.0 - u1))
        return mean + std * radius * math.cos(2.0 * math.pi * u2)

    def integer(self, low: int, high: int) -> int:
        """[low, high] の整数"""
        return low + int(self.uniform() * (high - low + 1))


def frame_rng(seed: int, frame_index: int) -> SplitMix64:
    """フレームごとのストリーム。seed とフレーム番号だけで決まる"""
    return SplitMix64(mix64((seed + GOLDEN_GAMMA * (frame_index + 1)) & MASK64))


@dataclass(frozen=True)
class ClassSpec:
    """カテゴリ名と寸法 (h, w, l) の平均・標準偏差"""
    name: str
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]


CAR = ClassSpec("Car", (1.53, 1.63, 3.88), (0.14, 0.10, 0.43))
KITTI_CAMERA = CameraIntrinsics(f_x=721.5377, f_y=721.5377, c_x=609.5593, c_y=172.854,
                                T_y=0.0, image_w=1242, image_h=375)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    min_objects: int = 1
    max_objects: int = 6
    depth_range: Tuple[float, float] = (8.0, 45.0)
    lateral_range: Tuple[float, float] = (-12.0, 12.0)
    classes: Tuple[ClassSpec, ...] = (CAR,)
    camera: CameraIntrinsics = KITTI_CAMERA
    ground: GroundModel = field(default_factory=GroundModel)
    yaw_range: Tuple[float, float] = (-math.pi, math.pi)
    max_retries: int = 50

    def __post_init__(self):
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"invalid object count range [{self.min_objects}, {self.max_objects}]")
        for name in ("depth_range", "lateral_range", "yaw_range"):
            low, high = getattr(self, name)
            if not low < high:
                raise ConfigError(f"{name} must be non-empty, got ({low}, {high})")
        if self.depth_range[0] <= 0:
            raise ConfigError("depth range must be positive")
        if not self.classes:
            raise ConfigError("at least one object class is required")
        if self.max_retries < 1:
            raise ConfigError("max_retries must be >= 1")


def calibration_for(intr: CameraIntrinsics) -> CalibrationFile:
    """内部パラメータから KITTI 形式のキャリブレーションを作る（全カメラ同一）"""
    P = np.array([[intr.f_x, 0.0, intr.c_x, 0.0],
                  [0.0, intr.f_y, intr.c_y, intr.T_y],
                  [0.0, 0.0, 1.0, 0.0]])
    velo = np.array([[0.0, -1.0, 0.0, 0.0],
                     [0.0, 0.0, -1.0, 0.0],
                     [1.0, 0.0, 0.0, 0.0]])
    return CalibrationFile({key: P.copy() for key in ("P0", "P1", "P2", "P3")}, np.eye(3), velo)


def _inside_image(box: Box3D, intr: CameraIntrinsics) -> bool:
    corners = corners3d(box)
    if np.any(corners[:, 2] <= MIN_DEPTH_MARGIN):
        return False
    uv = project_points(corners, intr)
    return bool(np.all(uv[:, 0] >= 0) and np.all(uv[:, 0] <= intr.image_w - 1)
                and np.all(uv[:, 1] >= 0) and np.all(uv[:, 1] <= intr.image_h - 1))


def _sample_object(rng: SplitMix64, spec: SceneSpec):
    cls = spec.classes[rng.integer(0, len(spec.classes) - 1)]
    dims = tuple(max(rng.normal(m, s), 0.3 * m) for m, s in zip(cls.mean, cls.std))
    z = rng.uniform(*spec.depth_range)
    x = rng.uniform(*spec.lateral_range)
    yaw = rng.uniform(*spec.yaw_range)
    h, w, l = dims
    return cls.name, Box3D((x, spec.ground.elevation, z), (w, h, l), yaw)


def _generate_frame(task) -> Tuple[CalibrationFile, List[LabelRecord]]:
    spec, index = task
    rng = frame_rng(spec.seed, index)
    intr = spec.camera
    count = rng.integer(spec.min_objects, spec.max_objects)
    labels = []
    for _ in range(count):
        for _ in range(spec.max_retries):
            category, box = _sample_object(rng, spec)
            if _inside_image(box, intr):
                labels.append(LabelRecord.from_box3d(category, project_box(box, intr), box,
                                                     alpha_from_yaw(box.yaw, box.x, box.z)))
                break
        else:
            logger.debug("frame %d: object dropped after %d retries", index, spec.max_retries)
    return calibration_for(intr), labels


def generate(spec: SceneSpec, frames: int, start: int = 0, jobs: int = 1) -> List[Tuple[CalibrationFile, List[LabelRecord]]]:
    """
    frames 枚の合成フレームを生成する

    各フレームは (seed, フレーム番号) だけから決まるので並列数に依存しない。
    物体の底面は y3d = EL、2Dボックスは3Dボックスの投影、alpha は yaw と整合する。
    """
    if frames < 0:
        raise ConfigError(f"frames must be >= 0, got {frames}")
    corpus = parallel_map(_generate_frame, [(spec, start + i) for i in range(frames)], jobs=jobs)
    logger.info("generated %d synthetic frames (%d objects)", frames, sum(len(labels) for _, labels in corpus))
    return corpus


def bottom_center_pixel(record: LabelRecord, intr: CameraIntrinsics) -> Tuple[float, float]:
    """底面中心 (x, y, z) の投影画素"""
    return project(record.location, intr)


def perturb_predictions(labels: Sequence[LabelRecord], seed: int, frame_index: int = 0,
                        max_yaw: float = 0.3, score: float = 0.9) -> List[LabelRecord]:
    """
    正解ラベルから山登り法の入力を作る

    2Dボックスは正解の投影のまま、yaw を ±max_yaw の範囲で乱し、alpha を付け直す。
    """
    rng = frame_rng(seed ^ 0x5EED, frame_index)
    result = []
    for record in labels:
        if record.is_dontcare:
            continue
        delta = rng.uniform(-max_yaw, max_yaw)
        yaw = normalize_angle(record.rotation_y + delta)
        x, _, z = record.location
        result.append(replace(record, rotation_y=yaw, alpha=alpha_from_yaw(yaw, x, z), score=score))
    return result
