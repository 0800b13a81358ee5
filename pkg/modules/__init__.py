# 地面認識単眼3D検出ツールキット共通モジュール
from modules.settings_manager import SettingsManager, RunConfig
from modules.data_store import DataStore
from modules.utils import GacError, ParseError, GeometryError, ShapeError, ConfigError, MissingDataError

__all__ = ['SettingsManager', 'RunConfig', 'DataStore',
           'GacError', 'ParseError', 'GeometryError', 'ShapeError', 'ConfigError', 'MissingDataError']
