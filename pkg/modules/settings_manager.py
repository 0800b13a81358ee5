"""
設定管理モジュール
- 既定値 < 設定ファイル < 環境変数（GAC_ 接頭辞、.env 対応）< CLI 指定 の順で上書き
- ドット区切りキーでの取得・設定
- 実行設定（RunConfig）への変換と値の検証
"""
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from modules.camera_geometry import GroundModel
from modules.evaluation import EvalConfig
from modules.post_optim import HillClimbConfig
from modules.synthetic_scenes import SceneSpec
from modules.utils import ConfigError, GacError, parse_key_value_lines

logger = logging.getLogger(__name__)

ENV_PREFIX = "GAC_"
TRUE_WORDS = ("true", "1", "yes", "on")
FALSE_WORDS = ("false", "0", "no", "off")


@dataclass(frozen=True)
class AnchorConfig:
    stride: int
    scales: Tuple[float, ...]
    ratios: Tuple[float, ...]
    stats_iou: float
    min_support: int
    iou_fg: float
    iou_bg: float
    ground_tolerance: float
    classes: Tuple[str, ...]
    force_min_iou: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    """検証済みの実行設定"""
    data_root: Path
    split: Optional[Path]
    out: Path
    camera: str
    crop_top: int
    image_size: Tuple[int, int]
    input_size: Tuple[int, int]
    anchor: AnchorConfig
    ground: GroundModel
    hill_climb: HillClimbConfig
    evaluation: EvalConfig
    scene: SceneSpec
    synth_frames: int
    jobs: int


class SettingsManager:
    """設定管理クラス"""

    def __init__(self, settings_path: Optional[str] = None, env_file: Optional[str] = None,
                 use_env: bool = True):
        if settings_path is None:
            self.settings_path = Path(__file__).parent.parent / "data" / "default.cfg"
        else:
            self.settings_path = Path(settings_path)
        self._settings = self._default_settings()
        self._load()
        if use_env:
            self._load_env(env_file)

    def _load(self) -> None:
        """設定ファイルを読み込む。存在しなければ既定値のまま"""
        if not self.settings_path.exists():
            logger.debug("settings file %s not found, using defaults", self.settings_path)
            return
        text = self.settings_path.read_text(encoding="utf-8")
        try:
            entries = parse_key_value_lines(text, separator="=")
        except GacError as e:
            raise ConfigError(f"{self.settings_path}: {e}") from None
        for lineno, key, value in entries:
            if self._lookup(key) is None:
                raise ConfigError(f"{self.settings_path}: line {lineno}: unknown key {key!r}")
            self.set(key, value)
        logger.debug("loaded %d settings from %s", len(entries), self.settings_path)

    def _load_env(self, env_file: Optional[str]) -> None:
        """.env と環境変数 GAC_SECTION__KEY を反映"""
        load_dotenv(env_file, override=False)
        for name in sorted(os.environ):
            if not name.startswith(ENV_PREFIX):
                continue
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            if self._lookup(key) is None:
                logger.warning("ignoring unknown environment setting %s", name)
                continue
            self.set(key, os.environ[name])

    def _default_settings(self) -> dict:
        """デフォルト設定"""
        return {
            "data": {
                "root": "data/kitti",
                "split": "",
                "out": "out",
                "camera": "P2",
                "crop_top": 100,
                "image_w": 1242,
                "image_h": 375,
                "input_w": 1280,
                "input_h": 288,
            },
            "anchor": {
                "stride": 16,
                "scales": [24.0, 32.0, 48.0, 64.0, 96.0, 128.0, 192.0, 256.0],
                "ratios": [0.5, 1.0, 2.0],
                "stats_iou": 0.5,
                "min_support": 10,
                "iou_fg": 0.5,
                "iou_bg": 0.4,
                "force_min_iou": 0.1,
                "ground_tolerance": 1.0,
                "classes": ["Car"],
            },
            "ground": {
                "elevation": 1.65,
                "baseline": 0.54,
            },
            "postopt": {
                "mode": "angle",
                "step_alpha": 0.1,
                "step_z": 0.5,
                "shrink": 0.5,
                "max_iterations": 50,
                "epsilon": 1e-6,
                "scan_radius": 0.35,
                "scan_step": 0.0125,
                "scan_starts": 4,
            },
            "eval": {
                "classes": ["Car"],
                "car_thresholds": [0.7, 0.5],
                "default_thresholds": [0.5],
            },
            "synth": {
                "frames": 100,
                "seed": 0,
                "min_objects": 1,
                "max_objects": 6,
            },
            "run": {
                "jobs": 0,
            },
            "log": {
                "level": "INFO",
            },
        }

    def _lookup(self, key: str) -> Any:
        keys = key.split('.')
        value = self._default_settings()
        try:
            for k in keys:
                value = value[k]
        except (KeyError, TypeError):
            return None
        return None if isinstance(value, dict) else value

    def is_known(self, key: str) -> bool:
        return self._lookup(key) is not None

    def get(self, key: str, default: Any = None) -> Any:
        """設定値を取得（ドット区切りのキーに対応）"""
        keys = key.split('.')
        value = self._settings
        try:
            for k in keys:
                value = value[k]
            return value
        except (KeyError, TypeError):
            return default

    def set(self, key: str, value: Any) -> None:
        """設定値を保存（ドット区切りのキーに対応）。文字列は既定値の型に変換"""
        template = self._lookup(key)
        if isinstance(value, str) and template is not None:
            value = _coerce(key, value, template)
        keys = key.split('.')
        target = self._settings
        for k in keys[:-1]:
            if k not in target:
                target[k] = {}
            target = target[k]
        target[keys[-1]] = value

    def items(self) -> Dict[str, Any]:
        """全設定をドット区切りキーの辞書で返す"""
        flat: Dict[str, Any] = {}

        def walk(prefix: str, node: dict):
            for k, v in node.items():
                name = f"{prefix}.{k}" if prefix else k
                if isinstance(v, dict):
                    walk(name, v)
                else:
                    flat[name] = v

        walk("", self._settings)
        return flat

    def save(self, path: Optional[str] = None) -> Path:
        """正準形式（キーのソート順）で設定ファイルを書き出す"""
        target = Path(path) if path else self.settings_path
        target.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{k} = {_render(v)}" for k, v in sorted(self.items().items())]
        target.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return target

    def to_run_config(self, require_data: bool = True) -> RunConfig:
        """検証済みの RunConfig を作る。パスと数値範囲の問題は ConfigError"""
        root = Path(self.get("data.root"))
        split_value = self.get("data.split")
        split = Path(split_value) if split_value else None
        if require_data:
            if not root.is_dir():
                raise ConfigError(f"dataset root not found: {root}")
            if split is not None and not split.is_file():
                raise ConfigError(f"split file not found: {split}")

        _check_range("data.crop_top", self.get("data.crop_top"), 0, self.get("data.image_h") - 1)
        for key in ("data.image_w", "data.image_h", "data.input_w", "data.input_h", "anchor.stride",
                    "anchor.min_support", "postopt.max_iterations"):
            _check_range(key, self.get(key), 1, None)
        for key in ("anchor.stats_iou", "anchor.iou_fg", "anchor.iou_bg"):
            _check_range(key, self.get(key), 0.0, 1.0)
        _check_range("synth.frames", self.get("synth.frames"), 0, None)
        _check_range("run.jobs", self.get("run.jobs"), 0, None)

        anchor = AnchorConfig(
            stride=self.get("anchor.stride"),
            scales=tuple(self.get("anchor.scales")),
            ratios=tuple(self.get("anchor.ratios")),
            stats_iou=self.get("anchor.stats_iou"),
            min_support=self.get("anchor.min_support"),
            iou_fg=self.get("anchor.iou_fg"),
            iou_bg=self.get("anchor.iou_bg"),
            force_min_iou=self.get("anchor.force_min_iou"),
            ground_tolerance=self.get("anchor.ground_tolerance"),
            classes=tuple(self.get("anchor.classes")),
        )
        if not anchor.scales or not anchor.ratios:
            raise ConfigError("anchor.scales and anchor.ratios must be non-empty")
        if anchor.iou_bg > anchor.iou_fg:
            raise ConfigError("anchor.iou_bg must not exceed anchor.iou_fg")
        if not 0.0 <= anchor.force_min_iou <= anchor.iou_fg:
            raise ConfigError("anchor.force_min_iou must lie in [0, anchor.iou_fg]")
        if math.isnan(anchor.ground_tolerance) or anchor.ground_tolerance < 0:
            raise ConfigError("anchor.ground_tolerance must be >= 0 (inf disables filtering)")

        ground = GroundModel(self.get("ground.elevation"), self.get("ground.baseline"))
        hill = HillClimbConfig(
            mode=self.get("postopt.mode"),
            step_alpha=self.get("postopt.step_alpha"),
            step_z=self.get("postopt.step_z"),
            shrink=self.get("postopt.shrink"),
            max_iterations=self.get("postopt.max_iterations"),
            epsilon=self.get("postopt.epsilon"),
            scan_radius=self.get("postopt.scan_radius"),
            scan_step=self.get("postopt.scan_step"),
            scan_starts=self.get("postopt.scan_starts"),
        )
        jobs = self.get("run.jobs")
        evaluation = EvalConfig(
            classes=tuple(self.get("eval.classes")),
            iou_thresholds={"Car": tuple(self.get("eval.car_thresholds"))},
            default_thresholds=tuple(self.get("eval.default_thresholds")),
            jobs=jobs,
        )
        scene = SceneSpec(
            seed=self.get("synth.seed"),
            min_objects=self.get("synth.min_objects"),
            max_objects=self.get("synth.max_objects"),
            ground=ground,
        )
        return RunConfig(
            data_root=root,
            split=split,
            out=Path(self.get("data.out")),
            camera=self.get("data.camera"),
            crop_top=self.get("data.crop_top"),
            image_size=(self.get("data.image_w"), self.get("data.image_h")),
            input_size=(self.get("data.input_w"), self.get("data.input_h")),
            anchor=anchor,
            ground=ground,
            hill_climb=hill,
            evaluation=evaluation,
            scene=scene,
            synth_frames=self.get("synth.frames"),
            jobs=jobs,
        )


def _coerce(key: str, raw: str, template: Any) -> Any:
    text = raw.strip()
    try:
        if isinstance(template, bool):
            lowered = text.lower()
            if lowered in TRUE_WORDS:
                return True
            if lowered in FALSE_WORDS:
                return False
            raise ValueError(text)
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, list):
            items = [t.strip() for t in text.split(",") if t.strip()]
            element = template[0] if template else ""
            return [_coerce(key, t, element) for t in items]
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return text


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _check_range(key: str, value, low, high) -> None:
    if value is None or (low is not None and value < low) or (high is not None and value > high):
        raise ConfigError(f"{key} out of range: {value}")
