from typing import Dict, Optional, Tuple

from modules.data_store import DataStore
from modules.settings_manager import SettingsManager
from modules.utils import ConfigError


def get_managers(settings_path: Optional[str] = None,
                 overrides: Optional[Dict[str, str]] = None) -> Tuple[SettingsManager, DataStore]:
    """設定とデータストアを一括初期化するファクトリー関数。overrides は CLI 指定の値"""
    settings = SettingsManager(settings_path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if not settings.is_known(key):
            raise ConfigError(f"unknown setting {key!r}")
        settings.set(key, value)

    # DataStore は設定されたデータセットルートを指す
    data_store = DataStore(settings.get("data.root"))
    return settings, data_store
