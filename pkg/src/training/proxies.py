"""知覚距離・同一性類似度の代理ネットワーク

学習済みの知覚・顔認識ネットワークの代わりに、シード固定でランダム初期化した
3段の畳み込みピラミッドを凍結して使う。同じ画像同士では距離が0になる。
"""
from typing import List

import torch
from torch import nn
from torch.nn import functional as F

PROXY_WIDTHS = (16, 32, 64)


class ProxyNetwork(nn.Module):
    """凍結したランダム畳み込みピラミッド

    lpips: 各段の特徴の平均絶対差の和、embed: 最深段の大域平均、
    identity_distance: 1 − cos(embed)。
    """

    def __init__(self, seed: int = 0, widths=PROXY_WIDTHS):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        in_channels = 3
        for width in widths:
            conv = nn.Conv2d(in_channels, width, 3, 2, 1)
            with torch.no_grad():
                bound = (6.0 / (in_channels * 9)) ** 0.5
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
            self.stages.append(conv)
            in_channels = width
        self.requires_grad_(False)
        self.eval()

    def features(self, image: torch.Tensor) -> List[torch.Tensor]:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"エラー: 代理ネットワークの入力は B×3×H×W です: {tuple(image.shape)}")
        x = image * 2.0 - 1.0
        out = []
        for conv in self.stages:
            x = F.leaky_relu(conv(x), negative_slope=0.2)
            out.append(x)
        return out

    def lpips(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """サンプルごとの知覚距離 (B,)"""
        if pred.shape != target.shape:
            raise ValueError("エラー: 知覚距離の入力形状が一致しません")
        total = 0
        for fp, ft in zip(self.features(pred), self.features(target)):
            total = total + (fp - ft).abs().flatten(1).mean(dim=1)
        return total

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        """最深段の大域平均による埋め込み (B×C)"""
        return self.features(image)[-1].mean(dim=(2, 3))

    def identity_distance(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """サンプルごとの 1 − cos 類似度 (B,)"""
        return 1.0 - self.similarity(pred, target)

    def similarity(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return F.cosine_similarity(self.embed(pred), self.embed(target), dim=1, eps=1e-8)
