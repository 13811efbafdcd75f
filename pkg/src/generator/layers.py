"""スタイル変調畳み込みの基本レイヤ"""
import math
from typing import Callable, Optional

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn import init


@torch.no_grad()
def default_init_weights(module: nn.Module, scale: float = 1.0, bias_fill: float = 0.0, **kwargs) -> None:
    """Conv2d/LinearをKaiming正規分布で初期化"""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            init.kaiming_normal_(m.weight, **kwargs)
            m.weight.data *= scale
            if m.bias is not None:
                m.bias.data.fill_(bias_fill)


class NormStyleCode(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(torch.mean(x ** 2, dim=1, keepdim=True) + 1e-8)


class MappingNetwork(nn.Module):
    """z → w の写像ネットワーク"""

    def __init__(self, z_dim: int, w_dim: int, num_layers: int = 4):
        super().__init__()
        layers = [NormStyleCode()]
        for i in range(num_layers):
            layers += [nn.Linear(z_dim if i == 0 else w_dim, w_dim), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)
        default_init_weights(self.net, scale=1.0, bias_fill=0.0, a=0.2, mode="fan_in", nonlinearity="leaky_relu")
        self.z_dim = z_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)

    @torch.no_grad()
    def mean_latent(self, num_samples: int = 4096, seed: int = 0) -> torch.Tensor:
        """固定シードのサンプルから平均潜在を推定"""
        gen = torch.Generator().manual_seed(seed)
        device = next(self.parameters()).device
        z = torch.randn(num_samples, self.z_dim, generator=gen).to(device)
        return self(z).mean(dim=0)


class ModulatedConv2d(nn.Module):
    """スタイルでカーネルを変調する畳み込み（バッチごとにgroup conv）"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, style_dim: int,
                 demodulate: bool = True, upsample: bool = False, eps: float = 1e-8):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.demodulate = demodulate
        self.upsample = upsample
        self.eps = eps
        self.modulation = nn.Linear(style_dim, in_channels, bias=True)
        default_init_weights(self.modulation, scale=1, bias_fill=1, a=0, mode="fan_in", nonlinearity="linear")
        self.weight = nn.Parameter(
            torch.randn(1, out_channels, in_channels, kernel_size, kernel_size)
            / math.sqrt(in_channels * kernel_size ** 2)
        )
        self.padding = kernel_size // 2

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        b, c, _, _ = x.shape
        style = self.modulation(style).view(b, 1, c, 1, 1)
        weight = self.weight * style
        if self.demodulate:
            demod = torch.rsqrt(weight.pow(2).sum([2, 3, 4]) + self.eps)
            weight = weight * demod.view(b, self.out_channels, 1, 1, 1)
        weight = weight.view(b * self.out_channels, c, self.kernel_size, self.kernel_size)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        _, _, h, w = x.shape
        out = F.conv2d(x.reshape(1, b * c, h, w), weight, padding=self.padding, groups=b)
        return out.view(b, self.out_channels, *out.shape[2:4])


class StyleConv(nn.Module):
    """変調畳み込み + バイアス + LeakyReLU（ノイズ入力なし）"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, style_dim: int,
                 upsample: bool = False):
        super().__init__()
        self.modulated_conv = ModulatedConv2d(in_channels, out_channels, kernel_size, style_dim,
                                              demodulate=True, upsample=upsample)
        self.bias = nn.Parameter(torch.zeros(1, out_channels, 1, 1))
        self.activate = nn.LeakyReLU(negative_slope=0.2)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        out = self.modulated_conv(x, style) * 2 ** 0.5
        return self.activate(out + self.bias)


class ToFeatures(nn.Module):
    """1×1の変調畳み込みで特徴を出力（復調なし）"""

    def __init__(self, in_channels: int, out_channels: int, style_dim: int):
        super().__init__()
        self.modulated_conv = ModulatedConv2d(in_channels, out_channels, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(1, out_channels, 1, 1))

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return self.modulated_conv(x, style) + self.bias


class ConstantInput(nn.Module):
    def __init__(self, num_channel: int, size: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(1, num_channel, size, size))

    def forward(self, batch: int) -> torch.Tensor:
        return self.weight.repeat(batch, 1, 1, 1)


class SynthesisBlock(nn.Module):
    """2つのStyleConvからなる1スケール分のブロック

    between は1つ目と2つ目の畳み込みの間に適用する変換（空間変調など）。
    """

    def __init__(self, in_channels: int, out_channels: int, style_dim: int, upsample: bool):
        super().__init__()
        self.conv1 = StyleConv(in_channels, out_channels, 3, style_dim, upsample=upsample)
        self.conv2 = StyleConv(out_channels, out_channels, 3, style_dim)

    def forward(self, x: torch.Tensor, style1: torch.Tensor, style2: torch.Tensor,
                between: Optional[Callable[[torch.Tensor], torch.Tensor]] = None) -> torch.Tensor:
        x = self.conv1(x, style1)
        if between is not None:
            x = between(x)
        return self.conv2(x, style2)
