"""
共通ユーティリティ
- 例外階層
- 角度の正規化
- KEY: value 形式テキストの解析
- 浮動小数の書式とフレームIDの扱い
- フレーム並列実行
"""
import math
import os
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, TypeVar

# Configure logger
logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

TWO_PI = 2.0 * math.pi


class GacError(ValueError):
    """ツールキット共通の例外"""


class ParseError(GacError):
    """ファイル解析エラー（行番号付き）"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GeometryError(GacError):
    """奥行きが非正・カメラ後方などの幾何エラー"""


class ShapeError(GacError):
    """配列形状の不一致"""


class ConfigError(GacError):
    """設定値の検証エラー"""


class MissingDataError(GacError):
    """必要なファイル・キーが存在しない"""


def normalize_angle(angle: float) -> float:
    """角度を [-π, π) に折り返す。範囲内の値はそのまま返す"""
    if -math.pi <= angle < math.pi:
        return float(angle)
    wrapped = math.fmod(angle + math.pi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    result = wrapped - math.pi
    # fmodの丸めで π ちょうどになる場合がある
    if result >= math.pi:
        result -= TWO_PI
    return result


def angle_difference(a: float, b: float) -> float:
    """2角度の差の絶対値（周期を考慮）"""
    return abs(normalize_angle(a - b))


def parse_key_value_lines(text: str, separator: str = ":") -> List[Tuple[int, str, str]]:
    """
    "KEY: v1 v2 ..." 形式のテキストを (行番号, キー, 値文字列) のリストに分解

    空行と # で始まる行は無視する。区切り文字のない行は ParseError。
    """
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if separator not in line:
            raise ParseError(f"missing '{separator}' in {line[:40]!r}", lineno)
        key, value = line.split(separator, 1)
        key = key.strip()
        if not key:
            raise ParseError("empty key", lineno)
        entries.append((lineno, key, value.strip()))
    return entries


def parse_floats(tokens: Sequence[str], lineno: Optional[int] = None) -> List[float]:
    """トークン列を float に変換（非数値・非有限はエラー）"""
    values = []
    for token in tokens:
        try:
            value = float(token)
        except ValueError:
            raise ParseError(f"non-numeric token {token!r}", lineno) from None
        if not math.isfinite(value):
            raise ParseError(f"non-finite token {token!r}", lineno)
        values.append(value)
    return values


def format_float(value: float) -> str:
    """最短で往復可能な10進表記"""
    return repr(float(value))


def frame_filename(frame_id, suffix: str = ".txt") -> str:
    """フレームIDを6桁ゼロ埋めのファイル名にする"""
    return f"{int(frame_id):06d}{suffix}"


def resolve_jobs(jobs: int) -> int:
    """jobs=0 は利用可能なコア数"""
    if jobs <= 0:
        return os.cpu_count() or 1
    return jobs


def parallel_map(func: Callable[[T], R], items: Iterable[T], jobs: int = 1, chunksize: int = 8) -> List[R]:
    """
    順序を保ったままフレーム単位で並列実行する

    func はモジュールトップレベルの関数であること（プロセス間で受け渡すため）。
    """
    items = list(items)
    workers = min(resolve_jobs(jobs), max(1, len(items)))
    if workers == 1:
        return [func(item) for item in items]
    logger.debug("parallel_map: %d items on %d workers", len(items), workers)
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items, chunksize=chunksize))
