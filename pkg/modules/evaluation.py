"""
評価モジュール
- 検出結果の型と正準化（スコア降順、同点は内容順）
- KITTI devkit 準拠の難易度判定
- 貪欲 IoU マッチング（2D / BEV / 3D）
- 11点 / 40点補間 AP と評価レポート
- 奥行き推定指標（SILog など）と 2D NMS
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from modules.boxes import Box2D, Box3D, iou_2d, iou_2d_matrix, iou_3d, iou_bev
from modules.kitti_io import LabelRecord, read_label_file
from modules.utils import ConfigError, GacError, ShapeError, parallel_map

logger = logging.getLogger(__name__)

DIFFICULTIES = ("easy", "moderate", "hard")
IGNORED = "ignored"
MIN_HEIGHT = {"easy": 40.0, "moderate": 25.0, "hard": 25.0}
MAX_OCCLUSION = {"easy": 0, "moderate": 1, "hard": 2}
MAX_TRUNCATION = {"easy": 0.15, "moderate": 0.30, "hard": 0.50}
NEIGHBOR_CLASSES = {"Car": "Van", "Pedestrian": "Person_sitting"}
CRITERIA = ("2D", "BEV", "3D")
DONTCARE_OVERLAP = 0.5


@dataclass(frozen=True)
class Detection:
    """1フレーム内の検出1件"""
    category: str
    box2d: Box2D
    box3d: Box3D
    alpha: float
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise GacError(f"non-finite detection score {self.score}")

    def to_label(self) -> LabelRecord:
        return LabelRecord.from_box3d(self.category, self.box2d, self.box3d, self.alpha, self.score)

    @classmethod
    def from_label(cls, record: LabelRecord, default_score: float = 1.0) -> "Detection":
        score = default_score if record.score is None else record.score
        return cls(record.category, record.bbox2d, record.to_box3d(), record.alpha, score)


DetectionSet = List[Detection]


def _tie_key(det: Detection) -> Tuple:
    return (det.category, det.box2d.as_tuple(), tuple(det.box3d.center), tuple(det.box3d.dims),
            det.box3d.yaw, det.alpha)


def canonicalize(detections: Sequence[Detection]) -> DetectionSet:
    """スコア降順に並べ替える。同点は検出内容で順序を決めるので、入力の並びには依存しない"""
    return sorted(detections, key=lambda d: (-d.score, _tie_key(d)))


# ---------------------------------------------------------------------------
# 難易度

def assign_difficulty(gt: LabelRecord) -> FrozenSet[str]:
    """2Dボックス高さ・遮蔽・切れの閾値で難易度を判定。どれにも入らなければ {ignored}"""
    if gt.is_dontcare:
        return frozenset({IGNORED})
    height = gt.bbox2d.height
    levels = {
        level for level in DIFFICULTIES
        if height >= MIN_HEIGHT[level]
        and gt.occlusion <= MAX_OCCLUSION[level]
        and gt.truncation <= MAX_TRUNCATION[level]
    }
    return frozenset(levels) if levels else frozenset({IGNORED})


# ---------------------------------------------------------------------------
# マッチング

@dataclass
class FrameMatch:
    """
    1フレームのマッチ結果

    scores / is_tp は TP か FP として数える検出のみ（スコア降順）。
    outcomes は入力検出ごとの "tp" / "fp" / "ignored"。
    """
    scores: List[float] = field(default_factory=list)
    is_tp: List[bool] = field(default_factory=list)
    num_gt: int = 0
    outcomes: List[str] = field(default_factory=list)
    matched_gt: List[Optional[int]] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return sum(self.is_tp)

    @property
    def fp(self) -> int:
        return len(self.is_tp) - self.tp

    @property
    def fn(self) -> int:
        return self.num_gt - self.tp


def _criterion_iou(det: Detection, gt: LabelRecord, criterion: str) -> float:
    if criterion == "2D":
        return iou_2d(det.box2d, gt.bbox2d)
    if criterion == "BEV":
        return iou_bev(det.box3d, gt.to_box3d())
    if criterion == "3D":
        return iou_3d(det.box3d, gt.to_box3d())
    raise ConfigError(f"unknown criterion {criterion!r}")


def _dontcare_overlap(det: Box2D, region: Box2D) -> float:
    iw = min(det.right, region.right) - max(det.left, region.left)
    ih = min(det.bottom, region.bottom) - max(det.top, region.top)
    if iw <= 0 or ih <= 0 or det.area <= 0:
        return 0.0
    return iw * ih / det.area


def match_frame(dets: Sequence[Detection], gts: Sequence[LabelRecord], criterion: str,
                iou_threshold: float, difficulty: str = "moderate", category: str = "Car") -> FrameMatch:
    """
    貪欲マッチング（dets はスコア降順であること）

    対象外の GT（難易度外・近縁クラス）や DontCare 領域にマッチした検出は TP にも FP にも数えない。
    難易度の最小高さより低い検出も無視する。
    """
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}")
    if difficulty not in DIFFICULTIES:
        raise ConfigError(f"unknown difficulty {difficulty!r}")
    care, ignored, regions = [], [], []
    neighbor = NEIGHBOR_CLASSES.get(category)
    for index, gt in enumerate(gts):
        if gt.is_dontcare:
            regions.append(gt.bbox2d)
        elif gt.category == category:
            (care if difficulty in assign_difficulty(gt) else ignored).append(index)
        elif gt.category == neighbor:
            ignored.append(index)

    result = FrameMatch(num_gt=len(care))
    used = set()
    for det in dets:
        if det.category != category:
            result.outcomes.append(IGNORED)
            result.matched_gt.append(None)
            continue
        if det.box2d.height < MIN_HEIGHT[difficulty]:
            result.outcomes.append(IGNORED)
            result.matched_gt.append(None)
            continue
        best, best_iou = _best_unmatched(det, gts, care, used, criterion, iou_threshold)
        if best is not None:
            used.add(best)
            result.scores.append(det.score)
            result.is_tp.append(True)
            result.outcomes.append("tp")
            result.matched_gt.append(best)
            continue
        best, _ = _best_unmatched(det, gts, ignored, used, criterion, iou_threshold)
        if best is not None:
            used.add(best)
            result.outcomes.append(IGNORED)
            result.matched_gt.append(best)
            continue
        if any(_dontcare_overlap(det.box2d, region) >= DONTCARE_OVERLAP for region in regions):
            result.outcomes.append(IGNORED)
            result.matched_gt.append(None)
            continue
        result.scores.append(det.score)
        result.is_tp.append(False)
        result.outcomes.append("fp")
        result.matched_gt.append(None)
    return result


def _best_unmatched(det: Detection, gts: Sequence[LabelRecord], candidates: Sequence[int], used: set,
                    criterion: str, iou_threshold: float) -> Tuple[Optional[int], float]:
    best, best_iou = None, -1.0
    for index in candidates:
        if index in used:
            continue
        value = _criterion_iou(det, gts[index], criterion)
        if value >= iou_threshold and value > best_iou:
            best, best_iou = index, value
    return best, best_iou


# ---------------------------------------------------------------------------
# AP

@dataclass(frozen=True, eq=False)
class PRCurve:
    """スコア降順に並べた (閾値, precision, recall)"""
    scores: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    num_gt: int
    difficulty: str = "moderate"
    criterion: str = "3D"
    iou_threshold: float = 0.7


def pr_curve(matches: Sequence[FrameMatch], difficulty: str = "moderate", criterion: str = "3D",
             iou_threshold: float = 0.7) -> PRCurve:
    scores, flags = [], []
    num_gt = 0
    for m in matches:
        scores.extend(m.scores)
        flags.extend(m.is_tp)
        num_gt += m.num_gt
    scores_arr = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores_arr, kind="stable")
    sorted_scores = scores_arr[order]
    tp = np.asarray(flags, dtype=bool)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    # 同点の検出は1つの閾値にまとめ、その最後の位置の累積値を使う
    last = np.flatnonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True)) if len(order) else order
    tp_cum, fp_cum = tp_cum[last], fp_cum[last]
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    recall = tp_cum / num_gt if num_gt else np.zeros_like(precision, dtype=np.float64)
    return PRCurve(sorted_scores[last], precision.astype(np.float64), recall.astype(np.float64),
                   num_gt, difficulty, criterion, iou_threshold)


def recall_positions(positions: int) -> np.ndarray:
    if positions == 40:
        return np.arange(1, 41) / 40.0
    if positions == 11:
        return np.arange(0, 11) / 10.0
    raise ConfigError(f"positions must be 11 or 40, got {positions}")


def interpolated_ap(curve: PRCurve, positions: int = 40) -> Optional[float]:
    """各再現率位置で「その再現率以上の最大 precision」を平均。GT がなければ None"""
    if curve.num_gt == 0:
        return None
    total = 0.0
    points = recall_positions(positions)
    for r in points:
        reached = curve.recall >= r - 1e-12
        total += float(curve.precision[reached].max()) if np.any(reached) else 0.0
    return total / len(points)


def ap(matches: Sequence[FrameMatch], positions: int = 40) -> Optional[float]:
    return interpolated_ap(pr_curve(matches), positions)


# ---------------------------------------------------------------------------
# データセット評価

@dataclass(frozen=True)
class EvalConfig:
    classes: Tuple[str, ...] = ("Car",)
    iou_thresholds: Dict[str, Tuple[float, ...]] = field(default_factory=lambda: {"Car": (0.7, 0.5)})
    default_thresholds: Tuple[float, ...] = (0.5,)
    criteria: Tuple[str, ...] = CRITERIA
    difficulties: Tuple[str, ...] = DIFFICULTIES
    positions: Tuple[int, ...] = (40, 11)
    jobs: int = 1

    def thresholds_for(self, category: str) -> Tuple[float, ...]:
        return tuple(self.iou_thresholds.get(category, self.default_thresholds))

    def metric_names(self) -> List[str]:
        names = []
        for category in self.classes:
            for criterion in self.criteria:
                for positions in self.positions:
                    for difficulty in self.difficulties:
                        for threshold in self.thresholds_for(category):
                            names.append(metric_name(category, criterion, positions, difficulty, threshold))
        return names


def metric_name(category: str, criterion: str, positions: int, difficulty: str, threshold: float) -> str:
    return f"{category}_{criterion}_AP{positions}_{difficulty}_iou{threshold:.2f}"


@dataclass
class EvalReport:
    metrics: Dict[str, Optional[float]]
    frames: int
    missing_predictions: List[str] = field(default_factory=list)
    unmatched_predictions: List[str] = field(default_factory=list)

    @property
    def absent(self) -> List[str]:
        return [name for name, value in self.metrics.items() if value is None]

    def format_metrics(self) -> str:
        """機械可読な "名前 値" 行（小数6桁）。値のない指標は absent"""
        lines = []
        for name in sorted(self.metrics):
            value = self.metrics[name]
            lines.append(f"{name} {value:.6f}" if value is not None else f"{name} absent")
        return "\n".join(lines) + "\n"

    def to_table(self) -> pd.DataFrame:
        rows = []
        for name, value in self.metrics.items():
            category, criterion, positions, difficulty, threshold = name.rsplit("_", 4)
            rows.append({"class": category, "criterion": criterion, "metric": positions,
                         "iou": threshold[3:], "difficulty": difficulty,
                         "value": np.nan if value is None else 100.0 * value})
        if not rows:
            return pd.DataFrame()
        table = pd.DataFrame(rows).pivot(index=["class", "metric", "criterion", "iou"],
                                         columns="difficulty", values="value")
        ordered = [d for d in DIFFICULTIES if d in table.columns]
        return table[ordered]

    def format_report(self) -> str:
        header = [f"frames: {self.frames}"]
        if self.missing_predictions:
            header.append(f"frames without predictions: {len(self.missing_predictions)}")
        if self.unmatched_predictions:
            header.append(f"prediction frames without ground truth: {len(self.unmatched_predictions)}")
        table = self.to_table()
        body = table.to_string(float_format=lambda v: f"{v:.2f}") if not table.empty else "(no metrics)"
        return "\n".join(header) + "\n\n" + body + "\n"


def _frame_ids(directory: Path) -> List[str]:
    return sorted(p.stem for p in directory.glob("*.txt"))


def _match_task(task) -> Dict[Tuple[str, str, float, str], FrameMatch]:
    pred_path, gt_path, config = task
    gts = read_label_file(gt_path)
    dets = []
    if pred_path is not None:
        dets = canonicalize([Detection.from_label(r) for r in read_label_file(pred_path) if not r.is_dontcare])
    result = {}
    for category in config.classes:
        for criterion in config.criteria:
            for threshold in config.thresholds_for(category):
                for difficulty in config.difficulties:
                    result[(category, criterion, threshold, difficulty)] = match_frame(
                        dets, gts, criterion, threshold, difficulty, category)
    return result


def evaluate(pred_dir, gt_dir, config: Optional[EvalConfig] = None,
             frame_ids: Optional[Sequence[str]] = None) -> EvalReport:
    """
    予測ディレクトリと正解ディレクトリを比較して AP を計算する

    予測ファイルのないフレームは検出なしとして評価し、正解のない予測フレームは除外する（いずれも警告）。
    """
    config = config or EvalConfig()
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if not gt_dir.is_dir():
        raise ConfigError(f"ground-truth directory not found: {gt_dir}")
    gt_ids = list(frame_ids) if frame_ids is not None else _frame_ids(gt_dir)
    pred_ids = set(_frame_ids(pred_dir)) if pred_dir.is_dir() else set()
    missing = [f for f in gt_ids if f not in pred_ids]
    unmatched = sorted(pred_ids - set(gt_ids))
    if missing:
        logger.warning("%d frames have no prediction file (evaluated as empty): %s",
                       len(missing), ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else ""))
    if unmatched:
        logger.warning("%d prediction frames have no ground truth and are skipped", len(unmatched))

    tasks = [(pred_dir / f"{f}.txt" if f in pred_ids else None, gt_dir / f"{f}.txt", config) for f in gt_ids]
    per_frame = parallel_map(_match_task, tasks, jobs=config.jobs)

    metrics: Dict[str, Optional[float]] = {}
    for category in config.classes:
        for criterion in config.criteria:
            for threshold in config.thresholds_for(category):
                for difficulty in config.difficulties:
                    key = (category, criterion, threshold, difficulty)
                    curve = pr_curve([frame[key] for frame in per_frame], difficulty, criterion, threshold)
                    for positions in config.positions:
                        metrics[metric_name(category, criterion, positions, difficulty, threshold)] = \
                            interpolated_ap(curve, positions)
    logger.info("evaluated %d frames, %d metrics", len(gt_ids), len(metrics))
    return EvalReport(metrics, len(gt_ids), missing, unmatched)


# ---------------------------------------------------------------------------
# 奥行き指標 / NMS

def depth_metrics(pred, gt, mask=None) -> Dict[str, float]:
    """KITTI 奥行きベンチマーク指標。SILog は 100 倍したスケール"""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}")
    valid = (gt > 0) & (pred > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not np.any(valid):
        raise GacError("no valid pixels for depth metrics")
    p, g = pred[valid], gt[valid]
    d = np.log(p) - np.log(g)
    return {
        "silog": float(np.sqrt(max(np.mean(d * d) - np.mean(d) ** 2, 0.0)) * 100.0),
        "abs_rel": float(np.mean(np.abs(p - g) / g)),
        "sq_rel": float(np.mean((p - g) ** 2 / g)),
        "rmse": float(np.sqrt(np.mean((p - g) ** 2))),
        "rmse_log": float(np.sqrt(np.mean(d * d))),
    }


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> DetectionSet:
    """クラスごとの貪欲 2D NMS。出力はスコア降順"""
    ordered = canonicalize(detections)
    if not ordered:
        return []
    boxes = np.array([d.box2d.as_tuple() for d in ordered])
    overlaps = iou_2d_matrix(boxes, boxes)
    suppressed = np.zeros(len(ordered), dtype=bool)
    keep = []
    for i, det in enumerate(ordered):
        if suppressed[i]:
            continue
        keep.append(det)
        for j in range(i + 1, len(ordered)):
            if ordered[j].category == det.category and overlaps[i, j] > iou_threshold:
                suppressed[j] = True
    return keep
