"""フレームマニフェストと画像・レポートの入出力"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from PIL import Image

from ..facemodel.toy_head import Camera, FaceParams
from .errors import ManifestError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST_VERSION = 1
ROLES = ("source", "driving", "eval")
FRAME_DIR = "frames"


@dataclass
class FrameRecord:
    """マニフェストの1フレーム（画像パスはマニフェストからの相対パス）"""

    image: str
    params: FaceParams
    camera: Camera
    role: str

    def to_dict(self) -> Dict:
        return {"image": self.image, "role": self.role,
                "params": self.params.to_dict(), "camera": self.camera.to_dict()}


@dataclass
class Manifest:
    """順序つきのフレーム列"""

    frames: List[FrameRecord]
    meta: Dict[str, object] = field(default_factory=dict)

    def by_role(self, role: str) -> List[FrameRecord]:
        return [f for f in self.frames if f.role == role]

    def validate(self) -> None:
        for i, frame in enumerate(self.frames):
            if frame.role not in ROLES:
                raise ManifestError(f"エラー: フレーム {i} の role が不正です: {frame.role}（{', '.join(ROLES)}）")
        if not self.by_role("source"):
            raise ManifestError("エラー: マニフェストにソースフレームがありません")


class DataParser:
    """マニフェスト・画像・評価レポートを読み書きするクラス"""

    @staticmethod
    def image_to_tensor(image: Image.Image) -> torch.Tensor:
        """PIL画像を [0,1] の 3×H×W テンソルに変換"""
        array = np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(array.copy()).permute(2, 0, 1)

    @staticmethod
    def tensor_to_image(tensor: torch.Tensor) -> Image.Image:
        """[0,1] の 3×H×W テンソルを8bit RGB画像に変換"""
        if tensor.dim() == 4:
            tensor = tensor[0]
        if tensor.dim() != 3 or tensor.shape[0] != 3:
            raise ValueError(f"エラー: 画像は 3×H×W である必要があります: {tuple(tensor.shape)}")
        array = (tensor.detach().cpu().clamp(0, 1) * 255.0).round().to(torch.uint8)
        return Image.fromarray(array.permute(1, 2, 0).numpy(), mode="RGB")

    @staticmethod
    def save_image(tensor: torch.Tensor, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        DataParser.tensor_to_image(tensor).save(path)
        return path

    @staticmethod
    def load_image(path: PathLike) -> torch.Tensor:
        with Image.open(path) as image:
            return DataParser.image_to_tensor(image)

    @staticmethod
    def save_manifest(manifest: Manifest, path: PathLike) -> Path:
        """マニフェストをJSONで保存

        Args:
            manifest: マニフェスト
            path: 保存先

        Returns:
            保存したパス
        """
        manifest.validate()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = {"version": MANIFEST_VERSION, "frames": [f.to_dict() for f in manifest.frames],
                "meta": manifest.meta}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
        logger.info(f"マニフェストを保存しました: {path}")
        return path

    @staticmethod
    def load_manifest(path: PathLike) -> Manifest:
        """マニフェストJSONを読み込む

        Args:
            path: マニフェストのパス

        Returns:
            Manifest
        """
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"エラー: マニフェストが見つかりません: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"エラー: マニフェストのJSONが不正です: {e}") from e
        if not isinstance(data, dict) or data.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"エラー: マニフェストのバージョンが不正です: {path}")
        try:
            frames = [
                FrameRecord(str(f["image"]), FaceParams.from_dict(f["params"]),
                            Camera.from_dict(f["camera"]), str(f["role"]))
                for f in data.get("frames", [])
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"エラー: フレームレコードが不正です: {e}") from e
        manifest = Manifest(frames, dict(data.get("meta", {})))
        manifest.validate()
        return manifest

    @staticmethod
    def write_sequence(out_dir: PathLike, images: Sequence[torch.Tensor], params: Sequence[FaceParams],
                       cameras: Sequence[Camera], roles: Sequence[str],
                       meta: Optional[Dict[str, object]] = None) -> Manifest:
        """画像列をPNGで書き出し、manifest.json を作る"""
        out_dir = Path(out_dir)
        if not (len(images) == len(params) == len(cameras) == len(roles)):
            raise ValueError("エラー: 画像・係数・カメラ・roleの数が一致しません")
        records = []
        for i, (image, p, c, role) in enumerate(zip(images, params, cameras, roles)):
            relative = f"{FRAME_DIR}/{i:04d}.png"
            DataParser.save_image(image, out_dir / relative)
            records.append(FrameRecord(relative, p, c, role))
        manifest = Manifest(records, dict(meta or {}))
        DataParser.save_manifest(manifest, out_dir / "manifest.json")
        return manifest

    @staticmethod
    def load_frames(manifest_path: PathLike, role: Optional[str] = None) -> List[FrameRecord]:
        """マニフェストを読み、指定roleのフレームを返す（Noneなら全フレーム）"""
        manifest = DataParser.load_manifest(manifest_path)
        return manifest.frames if role is None else manifest.by_role(role)

    @staticmethod
    def manifest_to_dataframe(manifest: Manifest) -> pd.DataFrame:
        """フレームレコードの一覧表（列: image, role, yaw, pitch）"""
        return pd.DataFrame(
            [{"image": f.image, "role": f.role, "yaw": f.camera.yaw, "pitch": f.camera.pitch}
             for f in manifest.frames],
            columns=["image", "role", "yaw", "pitch"],
        )

    @staticmethod
    def save_report(df: pd.DataFrame, path: PathLike) -> List[Path]:
        """DataFrameをCSVとJSONの両方で保存

        Args:
            df: レポート
            path: 拡張子を除いた保存先

        Returns:
            保存したパスのリスト
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
        df.to_csv(csv_path)
        df.reset_index().to_json(json_path, orient="records", force_ascii=False, indent=2)
        logger.info(f"レポートを保存しました: {csv_path}")
        return [csv_path, json_path]
