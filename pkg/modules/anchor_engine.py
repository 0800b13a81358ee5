"""
アンカーエンジン
- 密な2Dアンカーグリッド（スケール × アスペクト比）
- 学習データ走査による形状ごとの3D事前統計（z, sin α, cos α の平均・分散）
- 地面から離れたアンカーの除去
- 回帰ターゲット（12値）のエンコード / デコード
- 統計ファイルの保存と読み込み
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from modules.boxes import Box2D, Box3D, ObservationAngle, iou_2d_matrix, yaw_from_alpha
from modules.camera_geometry import CameraIntrinsics, GroundModel, backproject, project
from modules.evaluation import Detection
from modules.kitti_io import CalibrationFile, LabelRecord, intrinsics_from_calibration
from modules.utils import (
    ConfigError,
    GeometryError,
    MissingDataError,
    ParseError,
    ShapeError,
    format_float,
    parallel_map,
    parse_floats,
)

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-2
SIZE_FLOOR = 1e-3
SHARD_FRAMES = 64
STATS_VERSION = 1
DEFAULT_SCALES = (24.0, 32.0, 48.0, 64.0, 96.0, 128.0, 192.0, 256.0)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
NUM_TARGETS = 12
# 閾値未満でも最良アンカーを前景にするための最小 IoU
FORCE_MIN_IOU = 0.1
TARGET_NAMES = ("dx", "dy", "dw", "dh", "dcx", "dcy", "dz", "dh3d", "dw3d", "dl3d", "dsin", "dcos")


# ---------------------------------------------------------------------------
# 統計

@dataclass(frozen=True, eq=False)
class DimensionStats:
    """カテゴリごとの3D寸法 (h, w, l) の統計"""
    category: str
    count: int
    mean: np.ndarray
    var: np.ndarray
    minimum: np.ndarray
    maximum: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.maximum(np.sqrt(np.maximum(self.var, 0.0)), STD_FLOOR)


@dataclass(frozen=True, eq=False)
class AnchorStats:
    """
    形状ごとの事前統計

    mean / var の列は (z, sin α, cos α)。分散は母分散。
    count < min_support の形状は使用不可。
    """
    shapes: Tuple[Tuple[float, float], ...]
    count: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    min_support: int = 10
    dimensions: Dict[str, DimensionStats] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.shapes)
        if self.count.shape != (n,) or self.mean.shape != (n, 3) or self.var.shape != (n, 3):
            raise ShapeError(f"statistics arrays do not match {n} shapes")

    @property
    def usable(self) -> np.ndarray:
        return (self.count >= max(self.min_support, 1))

    @property
    def std(self) -> np.ndarray:
        return np.maximum(np.sqrt(np.maximum(self.var, 0.0)), STD_FLOOR)

    @property
    def mean_z(self) -> np.ndarray:
        return self.mean[:, 0]

    @property
    def var_z(self) -> np.ndarray:
        return self.var[:, 0]

    def dimension_stats(self, category: str) -> DimensionStats:
        if category not in self.dimensions:
            raise MissingDataError(f"no dimension statistics for category {category!r}")
        return self.dimensions[category]


def _merge_moments(n_a, mean_a, m2_a, n_b, mean_b, m2_b):
    """2組の (件数, 平均, 偏差平方和) を結合する"""
    n = n_a + n_b
    if n == 0:
        return 0, mean_a, m2_a
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = m2_a + m2_b + delta * delta * (n_a * n_b / n)
    return n, mean, m2


class _DimensionAccumulator:
    def __init__(self):
        self.count = 0
        self.mean = np.zeros(3)
        self.m2 = np.zeros(3)
        self.minimum = np.full(3, np.inf)
        self.maximum = np.full(3, -np.inf)

    def add(self, hwl: Sequence[float]):
        value = np.asarray(hwl, dtype=np.float64)
        self.count, self.mean, self.m2 = _merge_moments(self.count, self.mean, self.m2, 1, value, np.zeros(3))
        self.minimum = np.minimum(self.minimum, value)
        self.maximum = np.maximum(self.maximum, value)

    def merge(self, other: "_DimensionAccumulator"):
        self.count, self.mean, self.m2 = _merge_moments(self.count, self.mean, self.m2,
                                                        other.count, other.mean, other.m2)
        self.minimum = np.minimum(self.minimum, other.minimum)
        self.maximum = np.maximum(self.maximum, other.maximum)


class AnchorStatsAccumulator:
    """形状ごとのモーメントを逐次加算し、シャード同士を結合できる集計器"""

    def __init__(self, num_shapes: int):
        self.count = np.zeros(num_shapes, dtype=np.int64)
        self.mean = np.zeros((num_shapes, 3))
        self.m2 = np.zeros((num_shapes, 3))
        self.dimensions: Dict[str, _DimensionAccumulator] = {}

    def add(self, shape_index: int, values: Sequence[float], weight: int = 1):
        """values = (z, sin α, cos α) を weight 回分加える"""
        if weight <= 0:
            return
        s = shape_index
        n, mean, m2 = _merge_moments(int(self.count[s]), self.mean[s], self.m2[s],
                                     weight, np.asarray(values, dtype=np.float64), np.zeros(3))
        self.count[s], self.mean[s], self.m2[s] = n, mean, m2

    def add_dimensions(self, category: str, hwl: Sequence[float]):
        self.dimensions.setdefault(category, _DimensionAccumulator()).add(hwl)

    def merge(self, other: "AnchorStatsAccumulator") -> "AnchorStatsAccumulator":
        if other.count.shape != self.count.shape:
            raise ShapeError("cannot merge accumulators over different shape sets")
        for s in range(self.count.shape[0]):
            n, mean, m2 = _merge_moments(int(self.count[s]), self.mean[s], self.m2[s],
                                         int(other.count[s]), other.mean[s], other.m2[s])
            self.count[s], self.mean[s], self.m2[s] = n, mean, m2
        for category in sorted(other.dimensions):
            self.dimensions.setdefault(category, _DimensionAccumulator()).merge(other.dimensions[category])
        return self

    def finalize(self, shapes: Sequence[Tuple[float, float]], min_support: int = 10) -> AnchorStats:
        counts = self.count.copy()
        with np.errstate(invalid="ignore", divide="ignore"):
            var = np.where(counts[:, None] > 0, self.m2 / np.maximum(counts, 1)[:, None], 0.0)
        dims = {}
        for category in sorted(self.dimensions):
            acc = self.dimensions[category]
            dims[category] = DimensionStats(category, acc.count, acc.mean.copy(),
                                            acc.m2 / max(acc.count, 1), acc.minimum.copy(), acc.maximum.copy())
        return AnchorStats(tuple(tuple(s) for s in shapes), counts, self.mean.copy(),
                           np.maximum(var, 0.0), min_support, dims)


# ---------------------------------------------------------------------------
# グリッド

@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """
    特徴マップの各セルに全形状のアンカーを置いたグリッド

    アンカーの並びは位置（行優先）→ 形状。中心は ((c + 0.5)·stride, (r + 0.5)·stride)。
    """
    stride: int
    shapes: Tuple[Tuple[float, float], ...]
    rows: int
    cols: int
    stats: Optional[AnchorStats] = None

    @property
    def num_shapes(self) -> int:
        return len(self.shapes)

    @property
    def num_anchors(self) -> int:
        return self.rows * self.cols * self.num_shapes

    @cached_property
    def shape_indices(self) -> np.ndarray:
        return np.tile(np.arange(self.num_shapes), self.rows * self.cols)

    @cached_property
    def centers(self) -> np.ndarray:
        """(N, 2) のアンカー中心 (u, v)"""
        v, u = np.meshgrid((np.arange(self.rows) + 0.5) * self.stride,
                           (np.arange(self.cols) + 0.5) * self.stride, indexing="ij")
        cells = np.stack([u.ravel(), v.ravel()], axis=1)
        return np.repeat(cells, self.num_shapes, axis=0)

    @cached_property
    def sizes(self) -> np.ndarray:
        """(N, 2) のアンカー幅・高さ"""
        return np.asarray(self.shapes, dtype=np.float64)[self.shape_indices]

    @cached_property
    def boxes(self) -> np.ndarray:
        """(N, 4) の [left, top, right, bottom]"""
        half = 0.5 * self.sizes
        return np.hstack([self.centers - half, self.centers + half])

    def with_stats(self, stats: AnchorStats) -> "AnchorGrid":
        if len(stats.shapes) != self.num_shapes or not np.array_equal(
                np.asarray(stats.shapes, dtype=np.float64), np.asarray(self.shapes, dtype=np.float64)):
            raise ShapeError(f"statistics cover {len(stats.shapes)} shapes, grid has {self.num_shapes}")
        return AnchorGrid(self.stride, self.shapes, self.rows, self.cols, stats)

    def require_stats(self) -> AnchorStats:
        if self.stats is None:
            raise MissingDataError("anchor grid has no statistics attached")
        return self.stats


def anchor_shapes(scales: Sequence[float], ratios: Sequence[float]) -> Tuple[Tuple[float, float], ...]:
    """スケール優先・比率従属の順で (w, h) を列挙。ratio は h / w"""
    shapes = []
    for scale in scales:
        for ratio in ratios:
            root = math.sqrt(ratio)
            shapes.append((scale / root, scale * root))
    return tuple(shapes)


def build_grid(intr: CameraIntrinsics, stride: int = 16, scales: Sequence[float] = DEFAULT_SCALES,
               ratios: Sequence[float] = DEFAULT_RATIOS) -> AnchorGrid:
    if not scales or not ratios:
        raise ConfigError("empty anchor configuration: scales and ratios must be non-empty")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise ConfigError("anchor scales and ratios must be positive")
    rows = math.ceil(intr.image_h / stride)
    cols = math.ceil(intr.image_w / stride)
    return AnchorGrid(int(stride), anchor_shapes(scales, ratios), rows, cols)


# ---------------------------------------------------------------------------
# 統計の収集

def _objects(labels: Sequence[LabelRecord], classes: Optional[Sequence[str]] = None) -> List[LabelRecord]:
    return [r for r in labels if not r.is_dontcare and (classes is None or r.category in classes)]


def _accumulate_shard(task) -> AnchorStatsAccumulator:
    grid, frames, iou_threshold, classes = task
    acc = AnchorStatsAccumulator(grid.num_shapes)
    anchor_boxes = grid.boxes
    for labels in frames:
        objects = _objects(labels, classes)
        if not objects:
            continue
        gt_boxes = np.array([r.bbox2d.as_tuple() for r in objects])
        matched = iou_2d_matrix(anchor_boxes, gt_boxes) >= iou_threshold
        per_shape = matched.reshape(-1, grid.num_shapes, len(objects)).sum(axis=0)
        for g, record in enumerate(objects):
            values = (record.location[2], math.sin(record.alpha), math.cos(record.alpha))
            for s in np.nonzero(per_shape[:, g])[0]:
                acc.add(int(s), values, int(per_shape[s, g]))
            acc.add_dimensions(record.category, record.dimensions)
    return acc


def collect_stats(grid: AnchorGrid, corpus: Sequence[Tuple[Sequence[LabelRecord], object]],
                  iou_threshold: float = 0.5, min_support: int = 10,
                  classes: Optional[Sequence[str]] = None, jobs: int = 1) -> AnchorStats:
    """
    学習データを走査して形状ごとの事前統計を集める

    corpus の要素は (ラベル, キャリブレーション) で、ラベルはグリッドと同じ画像座標系。
    各 (アンカー, 物体) ペアで iou_2d >= iou_threshold のものを集計する。
    SHARD_FRAMES フレームごとのシャードを順番に結合するため、jobs によらず結果は同一。
    """
    if not corpus:
        raise ConfigError("empty corpus")
    if not 0.0 < iou_threshold <= 1.0:
        raise ConfigError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    frames = [labels for labels, _ in corpus]
    tasks = [(grid, frames[i:i + SHARD_FRAMES], iou_threshold, classes)
             for i in range(0, len(frames), SHARD_FRAMES)]
    shards = parallel_map(_accumulate_shard, tasks, jobs=jobs, chunksize=1)
    total = AnchorStatsAccumulator(grid.num_shapes)
    for shard in shards:
        total.merge(shard)
    stats = total.finalize(grid.shapes, min_support)
    logger.info("collected anchor statistics: %d frames, %d/%d usable shapes",
                len(frames), int(stats.usable.sum()), grid.num_shapes)
    return stats


# ---------------------------------------------------------------------------
# 地面フィルタ

def anchor_heights(grid: AnchorGrid, intr: CameraIntrinsics) -> np.ndarray:
    """各アンカー中心を形状の平均奥行きで逆投影したときの y3d"""
    stats = grid.require_stats()
    z = stats.mean_z[grid.shape_indices]
    v = grid.centers[:, 1]
    return ((v - intr.c_y) * z - intr.T_y) / intr.f_y


def filter_ground(grid: AnchorGrid, intr: CameraIntrinsics, ground: GroundModel,
                  tolerance: float = 1.0) -> np.ndarray:
    """
    |y3d - EL| <= tolerance のアンカーを残すマスク

    使用不可の形状は常に除外。tolerance = inf ではフィルタを無効化し全て残す。
    """
    if math.isnan(tolerance) or tolerance < 0:
        raise ConfigError(f"ground tolerance must be >= 0, got {tolerance}")
    if math.isinf(tolerance):
        return np.ones(grid.num_anchors, dtype=bool)
    stats = grid.require_stats()
    usable = stats.usable[grid.shape_indices]
    heights = anchor_heights(grid, intr)
    return usable & (np.abs(heights - ground.elevation) <= tolerance)


def filter_summary(grid: AnchorGrid, mask: np.ndarray, class_targets: Optional[np.ndarray] = None) -> Dict[str, object]:
    """マスクの集計（全体 / 行ごとの残存数 / 負例の除去率）"""
    per_row = mask.reshape(grid.rows, -1).sum(axis=1)
    summary: Dict[str, object] = {
        "total": int(mask.size),
        "kept": int(mask.sum()),
        "keep_fraction": float(mask.mean()) if mask.size else 0.0,
        "per_row": per_row.astype(int).tolist(),
    }
    if class_targets is not None:
        negatives = class_targets == 0
        removed = negatives & ~mask
        summary["negatives"] = int(negatives.sum())
        summary["negatives_removed_fraction"] = float(removed.sum() / max(negatives.sum(), 1))
    return summary


# ---------------------------------------------------------------------------
# ターゲット

@dataclass(frozen=True, eq=False)
class RegressionTargets:
    """前景アンカーのインデックスと 12 値の回帰ターゲット"""
    anchor_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.anchor_indices.shape[0], NUM_TARGETS):
            raise ShapeError(f"regression values must be ({self.anchor_indices.shape[0]}, 12), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise GeometryError("non-finite regression target")


@dataclass(frozen=True, eq=False)
class EncodedTargets:
    """
    class_targets: -1 無視、0 背景、1 + クラス番号 前景
    gt_indices / categories / dimensions は前景アンカーごと（regression と同じ並び）
    """
    class_targets: np.ndarray
    regression: RegressionTargets
    gt_indices: np.ndarray
    categories: List[str]
    dimensions: np.ndarray

    @property
    def num_foreground(self) -> int:
        return int(self.regression.anchor_indices.shape[0])


def _as_intrinsics(calib: Union[CameraIntrinsics, CalibrationFile], grid: AnchorGrid) -> CameraIntrinsics:
    if isinstance(calib, CameraIntrinsics):
        return calib
    return intrinsics_from_calibration(calib, image_w=grid.cols * grid.stride, image_h=grid.rows * grid.stride)


def encode_targets(grid: AnchorGrid, labels: Sequence[LabelRecord],
                   calib: Union[CameraIntrinsics, CalibrationFile],
                   iou_fg: float = 0.5, iou_bg: float = 0.4, mask: Optional[np.ndarray] = None,
                   classes: Sequence[str] = ("Car",), force_min_iou: float = FORCE_MIN_IOU) -> EncodedTargets:
    """
    アンカーに分類ターゲットと回帰ターゲットを割り当てる

    best IoU >= iou_fg で前景、< iou_bg で背景、その間は無視。
    mask で除外されたアンカーと使用不可形状のアンカーは無視扱い。
    各物体について、残ったアンカーのうち IoU 最大のものは、その IoU が force_min_iou 以上なら
    iou_fg に届かなくても前景にする。
    """
    if iou_bg > iou_fg:
        raise ConfigError(f"iou_bg ({iou_bg}) must not exceed iou_fg ({iou_fg})")
    if not 0.0 <= force_min_iou <= iou_fg:
        raise ConfigError(f"force_min_iou must lie in [0, iou_fg], got {force_min_iou}")
    stats = grid.require_stats()
    intr = _as_intrinsics(calib, grid)
    n = grid.num_anchors
    allowed = stats.usable[grid.shape_indices]
    if mask is not None:
        if mask.shape != (n,):
            raise ShapeError(f"mask must have {n} entries, got {mask.shape}")
        allowed = allowed & mask

    objects = _objects(labels, classes)
    class_targets = np.zeros(n, dtype=np.int64)
    class_targets[~allowed] = -1
    if not objects:
        empty = RegressionTargets(np.zeros(0, dtype=np.int64), np.zeros((0, NUM_TARGETS)))
        return EncodedTargets(class_targets, empty, np.zeros(0, dtype=np.int64), [], np.zeros((0, 3)))

    gt_boxes = np.array([r.bbox2d.as_tuple() for r in objects])
    iou = iou_2d_matrix(grid.boxes, gt_boxes)
    iou[~allowed] = -1.0
    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(n), best_gt]

    foreground = allowed & (best_iou >= iou_fg)
    class_targets[allowed & (best_iou >= iou_bg) & ~foreground] = -1
    for g in range(len(objects)):
        a = int(np.argmax(iou[:, g]))
        if iou[a, g] > 0 and iou[a, g] >= force_min_iou and not foreground[a]:
            foreground[a] = True
            best_gt[a] = g

    indices = np.nonzero(foreground)[0]
    values = np.zeros((indices.size, NUM_TARGETS))
    categories = []
    dims = np.zeros((indices.size, 3))
    for i, a in enumerate(indices):
        record = objects[best_gt[a]]
        class_targets[a] = 1 + list(classes).index(record.category)
        values[i] = _encode_one(grid, stats, int(a), record, intr)
        categories.append(record.category)
        dims[i] = record.dimensions
    return EncodedTargets(class_targets, RegressionTargets(indices, values), best_gt[indices], categories, dims)


def _encode_one(grid: AnchorGrid, stats: AnchorStats, anchor: int, record: LabelRecord,
                intr: CameraIntrinsics) -> np.ndarray:
    ax, ay = grid.centers[anchor]
    aw, ah = grid.sizes[anchor]
    s = grid.shape_indices[anchor]
    box = record.bbox2d
    gx, gy = box.center
    h3d, w3d, l3d = record.dimensions
    x, y, z = record.location
    pu, pv = project((x, y - 0.5 * h3d, z), intr)
    dim_stats = stats.dimension_stats(record.category)
    mean, std = stats.mean[s], stats.std[s]
    return np.array([
        (gx - ax) / aw,
        (gy - ay) / ah,
        math.log(max(box.width, SIZE_FLOOR) / aw),
        math.log(max(box.height, SIZE_FLOOR) / ah),
        (pu - ax) / aw,
        (pv - ay) / ah,
        (z - mean[0]) / std[0],
        *((np.asarray(record.dimensions) - dim_stats.mean) / dim_stats.std),
        (math.sin(record.alpha) - mean[1]) / std[1],
        (math.cos(record.alpha) - mean[2]) / std[2],
    ])


def decode_targets(grid: AnchorGrid, regression: np.ndarray, scores: np.ndarray,
                   intr: CameraIntrinsics, anchor_indices: Optional[np.ndarray] = None,
                   classes: Sequence[str] = ("Car",), score_threshold: Optional[float] = None) -> List[Detection]:
    """
    回帰出力を検出に戻す（encode_targets の逆変換）

    anchor_indices が None なら regression は全アンカー分 (N, 12)。
    scores は (M,) または (M, K)。奥行きが正にならない出力は捨てる。
    """
    stats = grid.require_stats()
    regression = np.asarray(regression, dtype=np.float64)
    if anchor_indices is None:
        anchor_indices = np.arange(grid.num_anchors)
    anchor_indices = np.asarray(anchor_indices, dtype=np.int64)
    if regression.shape != (anchor_indices.size, NUM_TARGETS):
        raise ShapeError(f"regression must be ({anchor_indices.size}, 12), got {regression.shape}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    if scores.shape[0] != anchor_indices.size:
        raise ShapeError(f"scores cover {scores.shape[0]} anchors, expected {anchor_indices.size}")

    detections = []
    for i, a in enumerate(anchor_indices):
        k = int(np.argmax(scores[i]))
        score = float(scores[i, k])
        if score_threshold is not None and score < score_threshold:
            continue
        s = grid.shape_indices[a]
        if not stats.usable[s]:
            continue
        category = classes[k]
        try:
            detections.append(_decode_one(grid, stats, int(a), regression[i], intr, category, score))
        except GeometryError as e:
            logger.debug("anchor %d dropped on decode: %s", a, e)
    return detections


def _decode_one(grid: AnchorGrid, stats: AnchorStats, anchor: int, t: np.ndarray,
                intr: CameraIntrinsics, category: str, score: float) -> Detection:
    ax, ay = grid.centers[anchor]
    aw, ah = grid.sizes[anchor]
    s = grid.shape_indices[anchor]
    mean, std = stats.mean[s], stats.std[s]
    dim_stats = stats.dimension_stats(category)

    box2d = Box2D.from_center(ax + t[0] * aw, ay + t[1] * ah, aw * math.exp(t[2]), ah * math.exp(t[3]))
    z = mean[0] + t[6] * std[0]
    x, y_center, z = backproject(ax + t[4] * aw, ay + t[5] * ah, z, intr)
    h3d, w3d, l3d = np.maximum(dim_stats.mean + t[7:10] * dim_stats.std, 0.0)
    sin_a = mean[1] + t[10] * std[1]
    cos_a = mean[2] + t[11] * std[2]
    alpha = ObservationAngle.from_encoding(sin_a, cos_a).alpha
    yaw = yaw_from_alpha(alpha, x, z)
    box3d = Box3D((x, y_center + 0.5 * h3d, z), (w3d, h3d, l3d), yaw)
    return Detection(category, box2d, box3d, alpha, score)


def dimension_bin_edges(stats: AnchorStats, category: str, bins: int = 12) -> np.ndarray:
    """寸法マルチビン用の (3, bins + 1) 境界。観測範囲 [min, max] を等分"""
    if bins < 2:
        raise ConfigError(f"bins must be >= 2, got {bins}")
    dims = stats.dimension_stats(category)
    low = dims.minimum.copy()
    high = dims.maximum.copy()
    flat = high - low < STD_FLOOR
    low[flat] -= STD_FLOOR
    high[flat] += STD_FLOOR
    return np.stack([np.linspace(low[j], high[j], bins + 1) for j in range(3)])


# ---------------------------------------------------------------------------
# 保存 / 読み込み

def format_stats(stats: AnchorStats) -> str:
    """
    バージョン付きテキスト表

    shape 行: w h count mean_z var_z mean_sin var_sin mean_cos var_cos
    dim 行: category count mean_h mean_w mean_l var_h var_w var_l min_h min_w min_l max_h max_w max_l
    """
    lines = [f"anchor_stats {STATS_VERSION}", f"min_support {stats.min_support}"]
    for s, (w, h) in enumerate(stats.shapes):
        moments = []
        for j in range(3):
            moments += [stats.mean[s, j], stats.var[s, j]]
        lines.append(" ".join(["shape", format_float(w), format_float(h), str(int(stats.count[s]))]
                              + [format_float(v) for v in moments]))
    for category in sorted(stats.dimensions):
        d = stats.dimensions[category]
        values = [*d.mean, *d.var, *d.minimum, *d.maximum]
        lines.append(" ".join(["dim", category, str(d.count)] + [format_float(v) for v in values]))
    return "\n".join(lines) + "\n"


def parse_stats(text: str) -> AnchorStats:
    shapes, counts, means, variances = [], [], [], []
    dims: Dict[str, DimensionStats] = {}
    min_support = None
    version_seen = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        kind = tokens[0]
        if kind == "anchor_stats":
            if len(tokens) != 2 or tokens[1] != str(STATS_VERSION):
                raise ParseError(f"unsupported statistics version {tokens[1:]}", lineno)
            version_seen = True
        elif kind == "min_support":
            min_support = int(parse_floats(tokens[1:2], lineno)[0])
        elif kind == "shape":
            if len(tokens) != 10:
                raise ParseError(f"shape row expects 9 values, got {len(tokens) - 1}", lineno)
            values = parse_floats(tokens[1:], lineno)
            shapes.append((values[0], values[1]))
            counts.append(int(values[2]))
            means.append(values[3::2])
            variances.append(values[4::2])
        elif kind == "dim":
            if len(tokens) != 15:
                raise ParseError(f"dim row expects 14 values, got {len(tokens) - 1}", lineno)
            values = np.array(parse_floats(tokens[3:], lineno))
            count = int(parse_floats(tokens[2:3], lineno)[0])
            dims[tokens[1]] = DimensionStats(tokens[1], count, values[0:3], values[3:6], values[6:9], values[9:12])
        else:
            raise ParseError(f"unknown row kind {kind!r}", lineno)
    if not version_seen:
        raise ParseError("missing 'anchor_stats' header")
    if not shapes:
        raise ParseError("statistics file has no shape rows")
    return AnchorStats(tuple(shapes), np.array(counts, dtype=np.int64), np.array(means),
                       np.array(variances), 10 if min_support is None else min_support, dims)


def save_stats(stats: AnchorStats, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_stats(stats), encoding="utf-8")


def load_stats(path) -> AnchorStats:
    return parse_stats(Path(path).read_text(encoding="utf-8"))


def stats_table(stats: AnchorStats) -> pd.DataFrame:
    """形状ごとの件数・平均・標準偏差の一覧"""
    w, h = np.asarray(stats.shapes).T
    return pd.DataFrame({
        "w": w,
        "h": h,
        "count": stats.count,
        "mean_z": stats.mean[:, 0],
        "var_z": stats.var[:, 0],
        "mean_sin": stats.mean[:, 1],
        "var_sin": stats.var[:, 1],
        "mean_cos": stats.mean[:, 2],
        "var_cos": stats.var[:, 2],
        "usable": stats.usable,
    })
