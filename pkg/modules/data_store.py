"""
データストアモジュール
- KITTI 形式ディレクトリ（calib/, label_2/ など）へのフレーム単位アクセス
- 分割ファイル（フレームIDの改行区切りリスト）の読み込み
- 出力ディレクトリへの書き込み
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from modules.utils import ConfigError, MissingDataError, frame_filename

logger = logging.getLogger(__name__)


class DataStore:
    """フレーム単位のファイル保存・管理クラス"""

    # データタイプとサブディレクトリのマッピング
    TABLE_MAPPING = {
        "calib": "calib",
        "labels": "label_2",
        "predictions": "predictions",
        "refined": "refined",
        "priors": "priors",
    }

    def __init__(self, root, directories: Optional[Dict[str, str]] = None):
        self.root = Path(root)
        self.directories = dict(self.TABLE_MAPPING)
        if directories:
            self.directories.update(directories)

    def _get_dir(self, data_type: str) -> Path:
        if data_type not in self.directories:
            raise ConfigError(f"no directory mapping found for {data_type!r}")
        path = Path(self.directories[data_type])
        return path if path.is_absolute() else self.root / path

    def path(self, data_type: str, frame_id, suffix: str = ".txt") -> Path:
        return self._get_dir(data_type) / frame_filename(frame_id, suffix)

    def create(self, data_type: str, frame_id, content, suffix: str = ".txt") -> Path:
        """新規作成（既存ファイルは上書き）。content は str または bytes"""
        target = self.path(data_type, frame_id, suffix)
        target.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            target.write_text(content, encoding="utf-8")
        return target

    def get(self, data_type: str, frame_id) -> str:
        target = self.path(data_type, frame_id)
        if not target.exists():
            raise MissingDataError(f"missing {data_type} file for frame {frame_id}: {target}")
        return target.read_text(encoding="utf-8")

    def exists(self, data_type: str, frame_id) -> bool:
        return self.path(data_type, frame_id).exists()

    def list(self, data_type: str, suffix: str = ".txt") -> List[str]:
        """フレームIDの一覧（ソート済み）"""
        directory = self._get_dir(data_type)
        if not directory.is_dir():
            return []
        return sorted(p.stem for p in directory.glob(f"*{suffix}"))

    def count(self, data_type: str) -> int:
        return len(self.list(data_type))

    def missing(self, data_type: str, frame_ids: Iterable[str]) -> List[str]:
        """存在しないフレームを列挙"""
        return [f for f in frame_ids if not self.exists(data_type, f)]

    def require(self, frame_ids: Iterable[str], data_types=("calib", "labels")) -> None:
        """必要なファイルが揃っているか確認し、欠けていれば全件を列挙して失敗する"""
        frame_ids = list(frame_ids)
        problems = []
        for data_type in data_types:
            absent = self.missing(data_type, frame_ids)
            if absent:
                problems.append(f"{data_type}: {', '.join(absent)}")
        if problems:
            raise MissingDataError("missing files -- " + "; ".join(problems))

    @staticmethod
    def read_split(path) -> List[str]:
        """改行区切りのフレームID。空行と # 行は無視"""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"split file not found: {path}")
        ids = []
        for line in path.read_text(encoding="utf-8").splitlines():
            token = line.strip()
            if not token or token.startswith("#"):
                continue
            try:
                ids.append(frame_filename(token, suffix=""))
            except ValueError:
                raise ConfigError(f"{path}: invalid frame id {token!r}") from None
        if not ids:
            raise ConfigError("empty split")
        return ids

    @staticmethod
    def write_split(path, frame_ids: Iterable[str]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{f}\n" for f in frame_ids), encoding="utf-8")
        return path
