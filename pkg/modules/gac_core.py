"""
地面認識畳み込み（GAC）数値コア
- 行ごとの基準オフセット δ⁰
- オフセット位置での縦方向線形補間サンプリング（特徴と奥行き事前分布）
- 残差結合（恒等パス + 混合行列）
- 全入力に対する解析的勾配
- FeatureMap ラスタファイルの読み書き
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from modules.camera_geometry import CameraIntrinsics, GroundModel
from modules.utils import ConfigError, ParseError, ShapeError

logger = logging.getLogger(__name__)

RASTER_MAGIC = b"GACF"
RASTER_VERSION = 1
PADDING_MODES = ("border", "zeros")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """channels x rows x cols の実数グリッド"""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"feature map must be a non-empty rank-3 grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ShapeError("feature map has non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class OffsetField:
    """δ_y = base（行のみに依存）+ residual（画素ごと）。単位は特徴グリッド"""
    base: np.ndarray
    residual: np.ndarray
    object_height: float = 1.5

    def __post_init__(self):
        base = np.asarray(self.base, dtype=np.float64).reshape(-1)
        residual = np.asarray(self.residual, dtype=np.float64)
        if residual.ndim != 2 or residual.shape[0] != base.shape[0]:
            raise ShapeError(f"residual {residual.shape} does not match base rows {base.shape}")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "residual", residual)

    @property
    def total(self) -> np.ndarray:
        return self.base[:, None] + self.residual

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "OffsetField":
        return cls(np.zeros(rows), np.zeros((rows, cols)))


@dataclass(frozen=True, eq=False)
class GacCache:
    """逆伝播用に保持する順伝播の中間値"""
    features: np.ndarray
    prior: np.ndarray
    mixing: np.ndarray
    sampled: np.ndarray
    positions: np.ndarray
    padding: str


def base_offsets(rows: int, stride: int, intr: CameraIntrinsics, ground: GroundModel,
                 object_height: float) -> np.ndarray:
    """
    δ⁰(r) = max(0, ĥ / (2EL - ĥ) * (v_r - c_y)) / stride、v_r = (r + 0.5) * stride

    消失線より上は 0（下向きのみ探索）。
    """
    if not 0.0 < object_height < 2.0 * ground.elevation:
        raise ConfigError(f"invalid object height {object_height}: must lie in (0, 2*EL)")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    coefficient = object_height / (2.0 * ground.elevation - object_height)
    v = (np.arange(rows, dtype=np.float64) + 0.5) * stride
    return np.maximum(0.0, coefficient * (v - intr.c_y)) / stride


def offset_field(rows: int, cols: int, stride: int, intr: CameraIntrinsics, ground: GroundModel,
                 object_height: float, residual: Optional[np.ndarray] = None) -> OffsetField:
    base = base_offsets(rows, stride, intr, ground, object_height)
    if residual is None:
        residual = np.zeros((rows, cols))
    return OffsetField(base, residual, object_height)


def _sample_rows(grid: np.ndarray, positions: np.ndarray, padding: str):
    """
    grid (K, R, W) を各 (r, w) の行位置 positions (R, W) で線形補間

    戻り値: sampled (K, R, W), 下側インデックス i0, 上側 i1, 重み t, 有効マスク
    """
    rows = grid.shape[1]
    if padding == "border":
        clamped = np.clip(positions, 0.0, rows - 1.0)
        valid = np.ones_like(positions, dtype=bool)
    else:
        clamped = positions
        valid = (positions >= 0.0) & (positions <= rows - 1.0)
        clamped = np.where(valid, clamped, 0.0)
    i0 = np.floor(clamped).astype(np.int64)
    i0 = np.clip(i0, 0, max(rows - 2, 0))
    i1 = np.minimum(i0 + 1, rows - 1)
    t = clamped - i0
    if rows == 1:
        t = np.zeros_like(t)
    cols = np.arange(grid.shape[2])[None, :]
    lower = grid[:, i0, cols]
    upper = grid[:, i1, cols]
    sampled = (1.0 - t)[None] * lower + t[None] * upper
    sampled = sampled * valid[None]
    return sampled, i0, i1, t, valid


def gac_forward(features: FeatureMap, prior: FeatureMap, offsets: OffsetField,
                mixing: np.ndarray, padding: str = "border"):
    """
    出力 = features + mixing @ [features(r + δ); prior(r + δ)]

    mixing は (C, C + 1)。戻り値は (出力 FeatureMap, 逆伝播用キャッシュ)。
    """
    if padding not in PADDING_MODES:
        raise ConfigError(f"unknown padding {padding!r}")
    F = features.data
    P = prior.data
    C, R, W = F.shape
    if P.shape != (1, R, W):
        raise ShapeError(f"prior must be 1x{R}x{W}, got {P.shape}")
    if offsets.residual.shape != (R, W):
        raise ShapeError(f"offsets must be {R}x{W}, got {offsets.residual.shape}")
    mixing = np.asarray(mixing, dtype=np.float64)
    if mixing.shape != (C, C + 1):
        raise ShapeError(f"mixing must be {C}x{C + 1}, got {mixing.shape}")

    positions = np.arange(R, dtype=np.float64)[:, None] + offsets.total
    stacked = np.concatenate([F, P], axis=0)
    sampled, _, _, _, _ = _sample_rows(stacked, positions, padding)
    out = F + np.einsum("ck,krw->crw", mixing, sampled)
    cache = GacCache(F, P, mixing, sampled, positions, padding)
    return FeatureMap(out), cache


def gac_backward(upstream: FeatureMap, cache: GacCache) -> Dict[str, np.ndarray]:
    """
    gac_forward の解析的勾配

    オフセットに関する勾配は括弧内2行の差分。整数位置では下側セル
    [k-1, k] の差分を採用する（左連続の劣勾配）。クランプ領域では 0。
    """
    G = upstream.data
    F, P, M = cache.features, cache.prior, cache.mixing
    C, R, W = F.shape
    if G.shape != (C, R, W):
        raise ShapeError(f"upstream gradient must be {C}x{R}x{W}, got {G.shape}")

    grad_mixing = np.einsum("crw,krw->ck", G, cache.sampled)
    grad_sampled = np.einsum("ck,crw->krw", M, G)

    stacked = np.concatenate([F, P], axis=0)
    _, i0, i1, t, valid = _sample_rows(stacked, cache.positions, cache.padding)
    grad_stacked = np.zeros_like(stacked)
    cols = np.broadcast_to(np.arange(W)[None, :], (R, W))
    weight_lo = ((1.0 - t) * valid)[None] * grad_sampled
    weight_hi = (t * valid)[None] * grad_sampled
    for k in range(stacked.shape[0]):
        np.add.at(grad_stacked[k], (i0, cols), weight_lo[k])
        np.add.at(grad_stacked[k], (i1, cols), weight_hi[k])

    grad_features = G + grad_stacked[:C]
    grad_prior = grad_stacked[C:]

    s = cache.positions
    interior = (s > 0.0) & (s <= R - 1.0)
    j0 = np.clip(np.ceil(s).astype(np.int64) - 1, 0, max(R - 2, 0))
    j1 = np.minimum(j0 + 1, R - 1)
    slope = stacked[:, j1, cols] - stacked[:, j0, cols]
    grad_offsets = np.sum(grad_sampled * slope, axis=0) * interior

    return {
        "features": grad_features,
        "prior": grad_prior,
        "offsets": grad_offsets,
        "mixing": grad_mixing,
    }


def identity_mixing(channels: int) -> np.ndarray:
    """サンプルした特徴をそのまま足し、事前分布チャネルは使わない混合行列"""
    return np.hstack([np.eye(channels), np.zeros((channels, 1))])


# ---------------------------------------------------------------------------
# ラスタファイル

def write_raster(feature_map: FeatureMap, path) -> None:
    """ヘッダ（magic, version, channels, rows, cols）+ float64 LE ペイロード"""
    header = RASTER_MAGIC + np.array(
        [RASTER_VERSION, feature_map.channels, feature_map.rows, feature_map.cols], dtype="<u4"
    ).tobytes()
    payload = np.ascontiguousarray(feature_map.data, dtype="<f8").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)


def read_raster(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if raw[:4] != RASTER_MAGIC:
        raise ParseError(f"{path}: bad raster magic")
    version, channels, rows, cols = np.frombuffer(raw[4:20], dtype="<u4")
    if version != RASTER_VERSION:
        raise ParseError(f"{path}: unsupported raster version {version}")
    expected = int(channels) * int(rows) * int(cols) * 8
    if len(raw) - 20 != expected:
        raise ParseError(f"{path}: payload is {len(raw) - 20} bytes, expected {expected}")
    data = np.frombuffer(raw[20:], dtype="<f8").reshape(int(channels), int(rows), int(cols))
    return FeatureMap(data.astype(np.float64))
