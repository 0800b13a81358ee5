"""
損失関数モジュール
- focal loss / smooth-L1 / 次元のマルチビン交差エントロピー
- スケール不変（SI）奥行き損失とエッジ考慮の平滑化損失
- 奥行き損失の総和と検出損失 L = L_cls + L_reg
すべて値と解析的勾配を返す。
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from modules.utils import ConfigError, GacError, ShapeError

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
GradientType = Union[np.ndarray, List[np.ndarray]]


@dataclass
class LossValue:
    """損失値と、微分対象と同じ形の勾配"""
    value: float
    gradient: GradientType
    extra_gradients: Dict[str, np.ndarray] = field(default_factory=dict)
    components: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class DepthLossConfig:
    lam: float = 0.3
    alpha_smooth: float = 0.3
    scales: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.alpha_smooth < 0:
            raise ConfigError(f"smoothness weight must be >= 0, got {self.alpha_smooth}")
        if self.scales < 1:
            raise ConfigError(f"scales must be >= 1, got {self.scales}")


def focal_loss(p, target, gamma: float = 2.0, balance: float = 0.25) -> LossValue:
    """
    -balance * (1 - p_t)^gamma * log(p_t)、p_t は target=1 なら p、0 なら 1-p

    p は [1e-7, 1-1e-7] にクランプし、勾配もクランプ後の値で計算する。
    配列入力では要素ごとの損失の和を返す。
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    target = np.asarray(target, dtype=np.float64)
    positive = target >= 0.5
    p_t = np.where(positive, p, 1.0 - p)
    one_minus = 1.0 - p_t
    log_p = np.log(p_t)
    loss = -balance * one_minus ** gamma * log_p
    if gamma == 0:
        d_pt = -balance / p_t
    else:
        d_pt = balance * gamma * one_minus ** (gamma - 1.0) * log_p - balance * one_minus ** gamma / p_t
    grad = np.where(positive, d_pt, -d_pt)
    return LossValue(float(np.sum(loss)), grad if grad.ndim else np.asarray(grad))


def smooth_l1(residual, beta: float = 1.0) -> LossValue:
    """|r| < beta で 0.5 r² / beta、それ以外は |r| - 0.5 beta"""
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    r = np.asarray(residual, dtype=np.float64)
    abs_r = np.abs(r)
    quadratic = abs_r < beta
    loss = np.where(quadratic, 0.5 * r * r / beta, abs_r - 0.5 * beta)
    grad = np.where(quadratic, r / beta, np.sign(r))
    return LossValue(float(np.sum(loss)), grad)


def _check_edges(bin_edges) -> np.ndarray:
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 3:
        raise GacError(f"multi-bin needs at least 2 bins, got edges {edges.tolist()}")
    if np.any(np.diff(edges) <= 0):
        raise GacError("unsorted bin edges")
    return edges


def bin_index(value: float, bin_edges) -> int:
    """value を含むビン。外側の値は端のビンにクランプ"""
    edges = _check_edges(bin_edges)
    index = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(index, 0), edges.size - 2)


def multibin_ce(logits, true_value: float, bin_edges) -> LossValue:
    """真値を含むビンに対する softmax 交差エントロピー"""
    edges = _check_edges(bin_edges)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (edges.size - 1,):
        raise ShapeError(f"expected {edges.size - 1} logits, got {logits.shape}")
    target = bin_index(true_value, edges)
    shifted = logits - logits.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    log_probs = shifted - log_z
    probs = np.exp(log_probs)
    grad = probs.copy()
    grad[target] -= 1.0
    return LossValue(float(-log_probs[target]), grad)


def multibin_decode(logits, bin_edges) -> float:
    """argmax ビンの中心値"""
    edges = _check_edges(bin_edges)
    k = int(np.argmax(np.asarray(logits)))
    return float(0.5 * (edges[k] + edges[k + 1]))


def si_loss(pred_log_depth, gt_log_depth, valid_mask, lam: float = 0.3) -> LossValue:
    """(1/n) Σ d² - (λ/n²) (Σ d)²、d = pred - gt（有効画素のみ）"""
    pred = np.asarray(pred_log_depth, dtype=np.float64)
    gt = np.asarray(gt_log_depth, dtype=np.float64)
    mask = np.asarray(valid_mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise GacError("empty mask: SI loss needs at least one valid pixel")
    d = np.where(mask, pred - gt, 0.0)
    total = float(np.sum(d))
    value = float(np.sum(d * d)) / n - lam * total * total / (n * n)
    grad = np.where(mask, 2.0 * d / n - 2.0 * lam * total / (n * n), 0.0)
    return LossValue(value, grad)


def _image_gradient_norms(image: np.ndarray):
    """チャネル方向L1ノルムの前進差分 (x方向, y方向)"""
    gx = np.sum(np.abs(image[:, :, 1:] - image[:, :, :-1]), axis=0)
    gy = np.sum(np.abs(image[:, 1:, :] - image[:, :-1, :]), axis=0)
    return gx, gy


def smoothness_loss(pred_depth, image) -> LossValue:
    """
    (1/N) Σ |∂x z| e^{-||∂x I||} + |∂y z| e^{-||∂y I||}

    前進差分で最終行・最終列は省略。N は全画素数。
    """
    depth = np.asarray(pred_depth, dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if depth.ndim != 2 or img.shape[1:] != depth.shape:
        raise ShapeError(f"shape mismatch: depth {depth.shape}, image {img.shape}")
    n = depth.size
    gx, gy = _image_gradient_norms(img)
    wx, wy = np.exp(-gx), np.exp(-gy)
    dx = depth[:, 1:] - depth[:, :-1]
    dy = depth[1:, :] - depth[:-1, :]
    value = (float(np.sum(np.abs(dx) * wx)) + float(np.sum(np.abs(dy) * wy))) / n

    grad = np.zeros_like(depth)
    sx = np.sign(dx) * wx / n
    sy = np.sign(dy) * wy / n
    grad[:, 1:] += sx
    grad[:, :-1] -= sx
    grad[1:, :] += sy
    grad[:-1, :] -= sy
    return LossValue(value, grad)


def total_depth_loss(predictions: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                     masks: Sequence[np.ndarray], images: Sequence[np.ndarray],
                     config: Optional[DepthLossConfig] = None) -> LossValue:
    """各スケールの si_loss + alpha * smoothness_loss の総和（平滑化は予測対数奥行きに適用）"""
    config = config or DepthLossConfig(scales=max(1, len(predictions)))
    if len(predictions) < 1:
        raise ConfigError("at least one scale is required")
    if not (len(predictions) == len(gts) == len(masks) == len(images)):
        raise ShapeError("per-scale inputs must have the same length")
    value = 0.0
    grads = []
    components: Dict[str, float] = {}
    for level, (pred, gt, mask, image) in enumerate(zip(predictions, gts, masks, images)):
        si = si_loss(pred, gt, mask, config.lam)
        value += si.value
        grad = si.gradient
        components[f"si_{level}"] = si.value
        if config.alpha_smooth > 0:
            smooth = smoothness_loss(pred, image)
            value += config.alpha_smooth * smooth.value
            grad = grad + config.alpha_smooth * smooth.gradient
            components[f"smooth_{level}"] = smooth.value
        grads.append(grad)
    return LossValue(value, grads, components=components)


def _clip_component(value: float, clip_floor: float, zero_small: bool):
    """小さすぎる損失を clip_floor で床上げ（zero_small なら 0 に）。戻り値は (値, 勾配を残すか)"""
    if clip_floor <= 0 or value >= clip_floor:
        return value, True
    return (0.0 if zero_small else clip_floor), False


def detection_loss(class_probs, regression, targets, dim_logits=None, bin_edges=None,
                   clip_floor: float = 1e-3, gamma: float = 2.0, balance: float = 0.25,
                   beta: float = 1.0, zero_small: bool = False) -> LossValue:
    """
    L = L_cls + L_reg

    class_probs: (N, K) シグモイド確率、regression: (N, 12)、targets: EncodedTargets。
    dim_logits: (F, 3, k) 前景アンカーごとの次元マルチビン、bin_edges: カテゴリ→(3, k+1)。
    各成分は clip_floor で下からクランプしてから合計する。dim_logits がなくても次元成分は
    0 として扱いクランプするので、完全な予測の損失は 3 * clip_floor。
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[:, None]
    regression = np.asarray(regression, dtype=np.float64)
    n_anchors = targets.class_targets.shape[0]
    if probs.shape[0] != n_anchors or regression.shape != (n_anchors, 12):
        raise ShapeError(f"outputs {probs.shape} / {regression.shape} do not match {n_anchors} anchors")

    cls_t = targets.class_targets
    considered = cls_t >= 0
    onehot = np.zeros_like(probs)
    fg = cls_t > 0
    onehot[np.nonzero(fg)[0], cls_t[fg] - 1] = 1.0
    num_fg = max(1, int(fg.sum()))

    focal = focal_loss(probs, onehot, gamma, balance)
    per_anchor = np.where(considered[:, None], 1.0, 0.0)
    cls_value = float(np.sum(_focal_elementwise(probs, onehot, gamma, balance) * per_anchor)) / num_fg
    cls_grad = focal.gradient * per_anchor / num_fg

    reg_grad = np.zeros_like(regression)
    reg_value = 0.0
    indices = targets.regression.anchor_indices
    if indices.size:
        residual = regression[indices] - targets.regression.values
        sl1 = smooth_l1(residual, beta)
        reg_value = sl1.value / indices.size
        reg_grad[indices] = sl1.gradient / indices.size

    dim_value = 0.0
    dim_grad = None
    if dim_logits is not None:
        dim_logits = np.asarray(dim_logits, dtype=np.float64)
        dim_grad = np.zeros_like(dim_logits)
        if indices.size:
            if bin_edges is None:
                raise ConfigError("bin_edges are required with dim_logits")
            count = indices.size * 3
            for i in range(indices.size):
                edges = bin_edges[targets.categories[i]]
                for j in range(3):
                    ce = multibin_ce(dim_logits[i, j], targets.dimensions[i, j], edges[j])
                    dim_value += ce.value / count
                    dim_grad[i, j] = ce.gradient / count

    cls_value, keep_cls = _clip_component(cls_value, clip_floor, zero_small)
    reg_value, keep_reg = _clip_component(reg_value, clip_floor, zero_small)
    dim_value, keep_dim = _clip_component(dim_value, clip_floor, zero_small)
    if not keep_cls:
        cls_grad = np.zeros_like(cls_grad)
    if not keep_reg:
        reg_grad = np.zeros_like(reg_grad)
    extra = {"regression": reg_grad}
    if dim_grad is not None:
        extra["dim_logits"] = dim_grad if keep_dim else np.zeros_like(dim_grad)
    total = cls_value + reg_value + dim_value
    return LossValue(total, cls_grad, extra_gradients=extra,
                     components={"cls": cls_value, "reg": reg_value, "dim": dim_value})


def _focal_elementwise(p, target, gamma: float, balance: float) -> np.ndarray:
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = np.where(target >= 0.5, p, 1.0 - p)
    return -balance * (1.0 - p_t) ** gamma * np.log(p_t)
