"""ドメイン固有の例外"""


class AvatarError(Exception):
    """パッケージ共通の基底例外"""


class PrerequisiteError(AvatarError):
    """前段ステージのチェックポイントが存在しない"""


class CheckpointError(AvatarError):
    """チェックポイントのバージョン・形状表が一致しない"""


class SessionError(AvatarError):
    """未初期化・未更新のセッションに対する操作"""


class ManifestError(AvatarError):
    """マニフェストの内容が不正"""
