"""チェックポイントコンテナ

1ファイルに バージョン・モジュールごとの重みブロック・形状表・トイ顔モデル・
代理ネットワークの重み・設定のスナップショットをまとめる。中身はテンソルと
プリミティブだけなので torch.load(weights_only=True) で読める。
アバターと逐次反転セッションも同じ形式で保存する。
"""
import logging
import pickle
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import torch
from torch import nn

from ..encoder.recurrent import RecurrentState
from ..encoder.sft import SFTParams
from ..generator.types import LatentCode, NeuralTexture, TriPlane
from ..pipeline.inversion import Avatar, AvatarSession
from .errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
AVATAR_KIND = "avatar"
SESSION_KIND = "session"
MODEL_KIND = "model"

PathLike = Union[str, Path]


def shape_table(state: Mapping[str, torch.Tensor]) -> Dict[str, list]:
    return {name: list(value.shape) for name, value in state.items()}


def save_checkpoint(
    path: PathLike,
    blocks: Mapping[str, nn.Module],
    face_model=None,
    proxies: Optional[nn.Module] = None,
    config=None,
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """モデル一式を保存

    Args:
        path: 保存先
        blocks: ブロック名 → モジュール
        face_model: ToyFaceModel
        proxies: 代理ネットワーク
        config: Config
        meta: 付随情報（ステージ名・バリアントなど）

    Returns:
        保存したパス
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    states = {name: {k: v.detach().cpu() for k, v in module.state_dict().items()}
              for name, module in blocks.items()}
    container = {
        "version": CHECKPOINT_VERSION,
        "kind": MODEL_KIND,
        "blocks": states,
        "shapes": {name: shape_table(state) for name, state in states.items()},
        "face_model": None if face_model is None else face_model.to_dict(),
        "proxies": None if proxies is None else {k: v.cpu() for k, v in proxies.state_dict().items()},
        "config": None if config is None else config.to_dict(),
        "meta": dict(meta or {}),
    }
    torch.save(container, path)
    logger.info(f"チェックポイントを保存しました: {path}")
    return path


def load_container(path: PathLike, kind: str = MODEL_KIND) -> Dict[str, Any]:
    """コンテナを読み込み、バージョンと種別を検証"""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"エラー: チェックポイントが見つかりません: {path}")
    try:
        container = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"エラー: チェックポイントを読み込めません: {path} ({e})") from e
    if not isinstance(container, dict) or container.get("version") != CHECKPOINT_VERSION:
        version = container.get("version") if isinstance(container, dict) else None
        raise CheckpointError(
            f"エラー: チェックポイントのバージョンが一致しません: {version} (期待値 {CHECKPOINT_VERSION})"
        )
    if container.get("kind") != kind:
        raise CheckpointError(f"エラー: {kind} ではなく {container.get('kind')} のファイルです: {path}")
    return container


def load_checkpoint(path: PathLike) -> Dict[str, Any]:
    return load_container(path, MODEL_KIND)


def restore_blocks(container: Dict[str, Any], modules: Mapping[str, nn.Module]) -> None:
    """形状表を検証してから重みを読み込む

    Args:
        container: load_checkpointの戻り値
        modules: ブロック名 → 読み込み先のモジュール
    """
    for name, module in modules.items():
        if name not in container["blocks"]:
            raise CheckpointError(f"エラー: チェックポイントにブロック '{name}' がありません")
        expected = shape_table(module.state_dict())
        stored = container["shapes"][name]
        if expected != stored:
            diff = sorted(k for k in set(expected) | set(stored) if expected.get(k) != stored.get(k))
            raise CheckpointError(f"エラー: ブロック '{name}' の形状表が一致しません: {', '.join(diff[:5])}")
        module.load_state_dict(container["blocks"][name])


# ----------------------------------------------------------------------
# アバター・セッション
# ----------------------------------------------------------------------
def _sft_to_dict(sft: Optional[SFTParams]) -> Optional[Dict[str, Any]]:
    if sft is None:
        return None
    return {
        "scales": [[a.detach().cpu(), b.detach().cpu()] for a, b in sft.scales],
        "plane_offset": None if sft.plane_offset is None else sft.plane_offset.detach().cpu(),
    }


def _sft_from_dict(data: Optional[Dict[str, Any]]) -> Optional[SFTParams]:
    if data is None:
        return None
    return SFTParams([(a, b) for a, b in data["scales"]], data["plane_offset"])


def avatar_to_dict(avatar: Avatar) -> Dict[str, Any]:
    return {
        "latent": avatar.latent.wplus.detach().cpu(),
        "texture": [s.detach().cpu() for s in avatar.texture.scales],
        "sft": _sft_to_dict(avatar.sft),
        "static": None if avatar.static is None else avatar.static.planes.detach().cpu(),
    }


def avatar_from_dict(data: Dict[str, Any]) -> Avatar:
    return Avatar(
        LatentCode(data["latent"]),
        NeuralTexture(list(data["texture"])),
        _sft_from_dict(data["sft"]),
        None if data["static"] is None else TriPlane(data["static"]),
    )


def save_avatar(path: PathLike, avatar: Avatar, meta: Optional[Dict[str, Any]] = None) -> Path:
    """アバターを保存"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"version": CHECKPOINT_VERSION, "kind": AVATAR_KIND, "avatar": avatar_to_dict(avatar),
                "meta": dict(meta or {})}, path)
    logger.info(f"アバターを保存しました: {path}")
    return path


def load_avatar(path: PathLike) -> Avatar:
    return avatar_from_dict(load_container(path, AVATAR_KIND)["avatar"])


def save_session(path: PathLike, session: AvatarSession, meta: Optional[Dict[str, Any]] = None) -> Path:
    """逐次反転セッションを保存（ストリームの中断・再開用）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {
        "latent": session.latent.wplus.detach().cpu(),
        "coarse_texture": [s.detach().cpu() for s in session.coarse_texture.scales],
        "coarse_static": session.coarse_static.planes.detach().cpu(),
        "state": session.state.to_dict(),
    }
    torch.save({"version": CHECKPOINT_VERSION, "kind": SESSION_KIND, "session": data,
                "meta": dict(meta or {})}, path)
    logger.info(f"セッションを保存しました: {path}")
    return path


def load_session(path: PathLike) -> AvatarSession:
    data = load_container(path, SESSION_KIND)["session"]
    return AvatarSession(
        LatentCode(data["latent"]),
        NeuralTexture(list(data["coarse_texture"])),
        TriPlane(data["coarse_static"]),
        RecurrentState.from_dict(data["state"]),
    )
