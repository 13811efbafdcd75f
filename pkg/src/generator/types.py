"""ジェネレータとエンコーダが共有する特徴コンテナ"""
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence

import torch

if TYPE_CHECKING:
    from ..encoder.sft import TexOffsets


@dataclass
class LatentCode:
    """W+ 潜在コード (B×L×D)"""

    wplus: torch.Tensor

    @property
    def num_layers(self) -> int:
        return self.wplus.shape[1]

    def detach(self) -> "LatentCode":
        return LatentCode(self.wplus.detach())


@dataclass
class NeuralTexture:
    """UV空間の多スケール特徴 F_tex（各スケール B×C_s×R_s×R_s）"""

    scales: List[torch.Tensor]

    def __post_init__(self):
        resolutions = [s.shape[-1] for s in self.scales]
        if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
            raise ValueError(f"エラー: テクスチャ解像度は狭義単調増加である必要があります: {resolutions}")

    @property
    def resolutions(self) -> List[int]:
        return [s.shape[-1] for s in self.scales]

    def with_offsets(self, offsets: Optional["TexOffsets"]) -> "NeuralTexture":
        if offsets is None:
            return self
        if [tuple(o.shape) for o in offsets.scales] != [tuple(s.shape) for s in self.scales]:
            raise ValueError("エラー: テクスチャオフセットの形状がテクスチャと一致しません")
        return NeuralTexture([s + o for s, o in zip(self.scales, offsets.scales)])

    def detach(self) -> "NeuralTexture":
        return NeuralTexture([s.detach() for s in self.scales])

    @staticmethod
    def mean(items: Sequence["NeuralTexture"]) -> "NeuralTexture":
        return NeuralTexture([torch.stack(group).mean(dim=0) for group in zip(*(t.scales for t in items))])


@dataclass
class TriPlane:
    """三平面特徴 F_tri (B×3×C_p×R_p×R_p、平面の順は xy, xz, yz)"""

    planes: torch.Tensor

    def __post_init__(self):
        if self.planes.dim() != 5 or self.planes.shape[1] != 3 or self.planes.shape[-1] != self.planes.shape[-2]:
            raise ValueError(f"エラー: 三平面の形状が不正です: {tuple(self.planes.shape)}")

    @property
    def front(self) -> torch.Tensor:
        return self.planes[:, 0]

    def detach(self) -> "TriPlane":
        return TriPlane(self.planes.detach())

    @staticmethod
    def mean(items: Sequence["TriPlane"]) -> "TriPlane":
        return TriPlane(torch.stack([t.planes for t in items]).mean(dim=0))

