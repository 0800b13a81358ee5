"""
後処理最適化モジュール
観測角（と任意で奥行き）を山登り法で動かし、推定2Dボックスと
3Dボックス投影の IoU を最大化する。
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

from modules.boxes import Box2D, Box3D, alpha_from_yaw, iou_2d, project_box, yaw_from_alpha
from modules.camera_geometry import CameraIntrinsics
from modules.evaluation import Detection
from modules.utils import ConfigError, GeometryError

logger = logging.getLogger(__name__)

MODES = ("angle", "angle_depth")
INVALID_IOU = -1.0


@dataclass(frozen=True)
class HillClimbConfig:
    mode: str = "angle"
    step_alpha: float = 0.1
    step_z: float = 0.5
    shrink: float = 0.5
    max_iterations: int = 50
    epsilon: float = 1e-6
    min_step_alpha: float = 1e-4
    min_step_z: float = 1e-3
    scan_radius: float = 0.35
    scan_step: float = 0.0125
    scan_starts: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown hill-climbing mode {self.mode!r}, expected one of {MODES}")
        if not (self.step_alpha > 0 and self.step_z > 0):
            raise ConfigError("hill-climbing steps must be positive")
        if not 0.0 < self.shrink < 1.0:
            raise ConfigError(f"shrink must lie in (0, 1), got {self.shrink}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not (self.min_step_alpha > 0 and self.min_step_z > 0):
            raise ConfigError("minimum steps must be positive")
        if not (self.scan_radius >= 0 and self.scan_step > 0):
            raise ConfigError("scan_radius must be >= 0 and scan_step positive")
        if self.scan_starts < 0:
            raise ConfigError(f"scan_starts must be >= 0, got {self.scan_starts}")

    @property
    def optimize_depth(self) -> bool:
        return self.mode == "angle_depth"


def objective(box3d: Box3D, box2d: Box2D, intr: CameraIntrinsics) -> float:
    """投影ボックスと2Dボックスの IoU。カメラ後方にかかる候補は -1"""
    try:
        return iou_2d(project_box(box3d, intr), box2d)
    except GeometryError:
        return INVALID_IOU


def _candidate(box3d: Box3D, alpha: float, d_alpha: float, d_z: float) -> Tuple[Optional[Box3D], float]:
    x, y, z = box3d.center
    if d_z:
        new_z = z + d_z
        if new_z <= 0:
            return None, alpha
        scale = new_z / z
        x, y, z = x * scale, y * scale, new_z
    new_alpha = alpha + d_alpha
    yaw = yaw_from_alpha(new_alpha, x, z)
    return box3d.replace(center=(x, y, z), yaw=yaw), new_alpha


def _climb(box3d: Box3D, alpha: float, value: float, box2d: Box2D, intr: CameraIntrinsics,
           cfg: HillClimbConfig, step_alpha: float) -> Tuple[Box3D, float, int]:
    current, best = box3d, value
    step_z = cfg.step_z
    accepted = 0
    for _ in range(cfg.max_iterations):
        alpha_done = step_alpha < cfg.min_step_alpha
        z_done = not cfg.optimize_depth or step_z < cfg.min_step_z
        if alpha_done and z_done:
            break
        moves = [(step_alpha, 0.0), (-step_alpha, 0.0)]
        if cfg.optimize_depth:
            moves += [(0.0, step_z), (0.0, -step_z)]
        chosen, chosen_alpha = None, alpha
        chosen_iou = best + cfg.epsilon
        for d_alpha, d_z in moves:
            candidate, candidate_alpha = _candidate(current, alpha, d_alpha, d_z)
            if candidate is None:
                continue
            iou = objective(candidate, box2d, intr)
            if iou > chosen_iou:
                chosen, chosen_iou, chosen_alpha = candidate, iou, candidate_alpha
        if chosen is None:
            step_alpha *= cfg.shrink
            step_z *= cfg.shrink
            continue
        current, best, alpha = chosen, chosen_iou, chosen_alpha
        accepted += 1
    return current, best, accepted


def _scan_seeds(box3d: Box3D, alpha: float, box2d: Box2D, intr: CameraIntrinsics,
                cfg: HillClimbConfig) -> List[Tuple[Box3D, float, float]]:
    """
    α を [α-scan_radius, α+scan_radius] 内の scan_step の倍数で評価し、
    IoU の局所最大を上位 scan_starts 個返す

    格子は開始点ではなく α の絶対値に固定するので、収束点から再実行しても同じ種が得られる。
    """
    if cfg.scan_radius <= 0 or cfg.scan_starts == 0:
        return []
    first = math.ceil((alpha - cfg.scan_radius) / cfg.scan_step)
    last = math.floor((alpha + cfg.scan_radius) / cfg.scan_step)
    samples = []
    for k in range(first, last + 1):
        grid_alpha = k * cfg.scan_step
        candidate = box3d.replace(yaw=yaw_from_alpha(grid_alpha, box3d.x, box3d.z))
        samples.append((candidate, grid_alpha, objective(candidate, box2d, intr)))
    peaks = []
    for i, (candidate, grid_alpha, value) in enumerate(samples):
        if value == INVALID_IOU:
            continue
        left = samples[i - 1][2] if i > 0 else INVALID_IOU
        right = samples[i + 1][2] if i + 1 < len(samples) else INVALID_IOU
        if value >= left and value >= right:
            peaks.append((i, candidate, grid_alpha, value))
    peaks.sort(key=lambda p: (-p[3], p[0]))
    return [(c, a, v) for _, c, a, v in peaks[:cfg.scan_starts]]


def refine(box3d: Box3D, box2d: Box2D, intr: CameraIntrinsics,
           cfg: HillClimbConfig = HillClimbConfig()) -> Tuple[Box3D, float]:
    """
    座標降下の山登り

    各反復で有効な変数それぞれに ±step を試し（順序 +α, -α, +z, -z）、
    epsilon を超えて改善する最良の手を採用する。改善がなければ全ステップを縮小。
    最大反復数に達するか、全ステップが最小値を下回ったら終了。

    開始点に加え、α を ±scan_radius で走査して得た局所最大からも scan_step 刻みで登り、最良の収束点を返す。
    開始点からの結果を epsilon を超えて上回らない限り開始点側を採用する。IoU は初期値より悪化しない。
    """
    initial = objective(box3d, box2d, intr)
    if initial == INVALID_IOU:
        raise GeometryError("behind-camera: initial box does not project in front of the camera")
    alpha = alpha_from_yaw(box3d.yaw, box3d.x, box3d.z)
    best_box, best, accepted = _climb(box3d, alpha, initial, box2d, intr, cfg, cfg.step_alpha)

    for seed, seed_alpha, value in _scan_seeds(box3d, alpha, box2d, intr, cfg):
        box, iou, moves = _climb(seed, seed_alpha, value, box2d, intr, cfg, cfg.scan_step)
        if iou > best + cfg.epsilon:
            best_box, best, accepted = box, iou, moves + 1

    logger.debug("hill climbing: %d accepted moves, IoU %.6f -> %.6f", accepted, initial, best)
    return best_box, best


@dataclass(frozen=True)
class RefineOutcome:
    detection: Detection
    initial_iou: float
    final_iou: float
    flagged: bool = False


def refine_detection(detection: Detection, intr: CameraIntrinsics, cfg: HillClimbConfig) -> RefineOutcome:
    initial = objective(detection.box3d, detection.box2d, intr)
    if initial == INVALID_IOU:
        return RefineOutcome(detection, initial, initial, flagged=True)
    box, final = refine(detection.box3d, detection.box2d, intr, cfg)
    if box is detection.box3d:
        return RefineOutcome(detection, initial, final)
    alpha = alpha_from_yaw(box.yaw, box.x, box.z)
    return RefineOutcome(replace(detection, box3d=box, alpha=alpha), initial, final)


def refine_outcomes(detections: Sequence[Detection], intr: CameraIntrinsics,
                    cfg: HillClimbConfig = HillClimbConfig()) -> List[RefineOutcome]:
    outcomes = [refine_detection(d, intr, cfg) for d in detections]
    flagged = sum(o.flagged for o in outcomes)
    if flagged:
        logger.warning("%d behind-camera detections passed through unrefined", flagged)
    return outcomes


def refine_set(detections: Sequence[Detection], intr: CameraIntrinsics,
               cfg: HillClimbConfig = HillClimbConfig()) -> List[Detection]:
    """各検出を独立に refine。順序とスコアは保たれる"""
    return [o.detection for o in refine_outcomes(detections, intr, cfg)]


def mean_improvement(outcomes: Sequence[RefineOutcome]) -> float:
    scored = [o.final_iou - o.initial_iou for o in outcomes if not o.flagged]
    return sum(scored) / len(scored) if scored else 0.0
