"""ユーティリティモジュール"""
from .config import Config, load_config, save_config
from .data_parser import DataParser, FrameRecord, Manifest
from .errors import AvatarError, CheckpointError, ManifestError, PrerequisiteError, SessionError

__all__ = [
    "Config",
    "load_config",
    "save_config",
    "DataParser",
    "FrameRecord",
    "Manifest",
    "AvatarError",
    "CheckpointError",
    "ManifestError",
    "PrerequisiteError",
    "SessionError",
]
