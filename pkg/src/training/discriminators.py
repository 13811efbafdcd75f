"""識別器（潜在識別器 D_W と画像識別器）"""
import math

import torch
from torch import nn
from torch.nn import functional as F

from ..generator.layers import default_init_weights


class LatentDiscriminator(nn.Module):
    """w ベクトルを実（写像ネットワーク由来）か予測かで判別するMLP

    B×L×D の入力は層ごとの B·L 個のコードとして扱う。
    """

    def __init__(self, style_dim: int, hidden: int = 128, num_layers: int = 3):
        super().__init__()
        layers = []
        in_dim = style_dim
        for _ in range(num_layers - 1):
            layers += [nn.Linear(in_dim, hidden), nn.LeakyReLU(0.2)]
            in_dim = hidden
        layers.append(nn.Linear(in_dim, 1))
        self.net = nn.Sequential(*layers)
        default_init_weights(self.net, a=0.2, mode="fan_in", nonlinearity="leaky_relu")
        self.style_dim = style_dim

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        if w.shape[-1] != self.style_dim:
            raise ValueError(f"エラー: 潜在の次元が {self.style_dim} ではありません: {tuple(w.shape)}")
        return self.net(w.reshape(-1, self.style_dim)).squeeze(-1)


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, in_channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(in_channels, out_channels, 3, 2, 1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1, 2, 0, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.leaky_relu(self.conv1(x), negative_slope=0.2)
        out = F.leaky_relu(self.conv2(out), negative_slope=0.2)
        return (out + self.skip(x)) / math.sqrt(2)


class ImageDiscriminator(nn.Module):
    """画像（と任意の条件マップ）→ ロジットの残差畳み込み識別器

    入力解像度は可変で、最後に4×4へ適応平均プールする。
    事前分布の学習ではランドマーク輪郭マップを条件チャネルとして結合し、
    二重識別器では6ch（ニューラル描画と最終画像）を受け取る。
    """

    def __init__(self, in_channels: int = 3, condition_channels: int = 0, widths=(32, 64, 64)):
        super().__init__()
        self.in_channels = in_channels
        self.condition_channels = condition_channels
        self.conv_first = nn.Conv2d(in_channels + condition_channels, widths[0], 1)
        self.blocks = nn.ModuleList(DiscriminatorBlock(widths[i], widths[i + 1]) for i in range(len(widths) - 1))
        self.final_conv = nn.Conv2d(widths[-1], widths[-1], 3, 1, 1)
        self.final_linear = nn.Sequential(nn.Linear(widths[-1] * 16, widths[-1]), nn.LeakyReLU(0.2),
                                          nn.Linear(widths[-1], 1))

    def forward(self, image: torch.Tensor, condition: torch.Tensor = None) -> torch.Tensor:
        if image.shape[1] != self.in_channels:
            raise ValueError(f"エラー: 識別器の入力チャネルは {self.in_channels} です: {tuple(image.shape)}")
        if self.condition_channels:
            if condition is None or condition.shape[1] != self.condition_channels:
                raise ValueError("エラー: 識別器の条件マップがありません")
            image = torch.cat([image, condition.to(image.dtype)], dim=1)
        x = F.leaky_relu(self.conv_first(image), negative_slope=0.2)
        for block in self.blocks:
            x = block(x)
        x = F.leaky_relu(self.final_conv(x), negative_slope=0.2)
        x = F.adaptive_avg_pool2d(x, 4)
        return self.final_linear(x.flatten(1)).squeeze(-1)
