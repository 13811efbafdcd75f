"""テクスチャオフセットとチャネル分割SFT（CS-SFT）"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch


@dataclass
class TexOffsets:
    """ニューラルテクスチャの各スケールに加えるオフセット"""

    scales: List[torch.Tensor]

    @staticmethod
    def mean(items: Sequence["TexOffsets"]) -> "TexOffsets":
        return TexOffsets([torch.stack(group).mean(dim=0) for group in zip(*(o.scales for o in items))])


@dataclass
class SFTParams:
    """静的ジェネレータの変調パラメータ

    scales: 各変調解像度の (α, β)。plane_offset は三平面への直接オフセット
    （オフセット予測型のエンコーダでのみ使う）。
    """

    scales: List[Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)
    plane_offset: Optional[torch.Tensor] = None

    @property
    def resolutions(self) -> List[int]:
        return [alpha.shape[-1] for alpha, _ in self.scales]

    @staticmethod
    def identity(batch: int, channels: Sequence[int], resolutions: Sequence[int],
                 device=None, dtype=torch.float32) -> "SFTParams":
        """α=1, β=0 の恒等変調"""
        scales = []
        for c, r in zip(channels, resolutions):
            scales.append((torch.ones(batch, c, r, r, device=device, dtype=dtype),
                           torch.zeros(batch, c, r, r, device=device, dtype=dtype)))
        return SFTParams(scales)


def apply_cs_sft(features: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """チャネルの前半だけを α ⊙ F + β で変調し、後半はそのまま通す

    Args:
        features: B×C×H×W
        alpha: B×(C/2)×H×W
        beta: alphaと同形状

    Returns:
        featuresと同形状
    """
    channels = features.shape[1]
    half = channels // 2
    expected = (features.shape[0], half, *features.shape[2:])
    if tuple(alpha.shape) != expected or tuple(beta.shape) != expected:
        raise ValueError(
            f"エラー: SFTパラメータの形状が一致しません (alpha {tuple(alpha.shape)}, "
            f"beta {tuple(beta.shape)}, 期待値 {expected})"
        )
    modulated, passthrough = torch.split(features, [half, channels - half], dim=1)
    return torch.cat([alpha * modulated + beta, passthrough], dim=1)
