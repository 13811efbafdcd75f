"""ワンショット反転用エンコーダ

E_latent は画像から W+ 潜在を、E_tex はUV平面上の観測から多スケールの
テクスチャオフセットを、E_tri は画像領域の観測からCS-SFTの (α, β) を予測する。
E_tex と E_tri はU-Net（ダウンパスのバックボーンと、スキップ接続つきデコーダ）に
スケールごとのヘッドを載せた構成で、ヘッドの最終層は0初期化されている。
ヘッドはtanhで有界にしたデコーダ特徴を読む。
"""
import logging
import math
from typing import List, Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from ..generator.layers import default_init_weights
from ..generator.types import LatentCode
from ..renderer.rasterizer import UVImage
from .sft import SFTParams, TexOffsets

logger = logging.getLogger(__name__)

TEXTURE_DOMAINS = ("uv", "image")
TRIPLANE_MODES = ("sft", "offset")


def zero_conv(in_channels: int, out_channels: int) -> nn.Conv2d:
    """重み・バイアスともに0の1×1畳み込み"""
    conv = nn.Conv2d(in_channels, out_channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ResBlock(nn.Module):
    """解像度を半分（down）または倍（up）にする残差ブロック"""

    def __init__(self, in_channels: int, out_channels: int, mode: str = "down"):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, in_channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(in_channels, out_channels, 3, 1, 1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.scale_factor = 0.5 if mode == "down" else 2.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.leaky_relu(self.conv1(x), negative_slope=0.2)
        out = F.interpolate(out, scale_factor=self.scale_factor, mode="bilinear", align_corners=False)
        out = F.leaky_relu(self.conv2(out), negative_slope=0.2)
        x = F.interpolate(x, scale_factor=self.scale_factor, mode="bilinear", align_corners=False)
        return out + self.skip(x)


class UNetBackbone(nn.Module):
    """ダウンパス。出力は細→粗の順の特徴リスト"""

    def __init__(self, in_channels: int, widths: Sequence[int]):
        super().__init__()
        self.in_channels = in_channels
        self.widths = list(widths)
        self.conv_first = nn.Conv2d(in_channels, widths[0], 1)
        self.conv_down = nn.ModuleList(
            ResBlock(widths[i - 1], widths[i], mode="down") for i in range(1, len(widths))
        )
        self.final_conv = nn.Conv2d(widths[-1], widths[-1], 3, 1, 1)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = [F.leaky_relu(self.conv_first(x), negative_slope=0.2)]
        for block in self.conv_down:
            features.append(block(features[-1]))
        features[-1] = F.leaky_relu(self.final_conv(features[-1]), negative_slope=0.2)
        return features


class DecoderBlock(nn.Module):
    """アップサンプル → スキップ特徴と結合 → 3×3畳み込み2段"""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv1 = nn.Conv2d(in_channels + skip_channels, out_channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1)

    def forward(self, x: torch.Tensor, skip: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        x = F.leaky_relu(self.conv1(x), negative_slope=0.2)
        return F.leaky_relu(self.conv2(x), negative_slope=0.2)


class UNetDecoder(nn.Module):
    """アップパス。バックボーン特徴（細→粗）から粗→細の順にデコーダ特徴を返す"""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        reversed_widths = list(widths)[::-1]
        self.channels = reversed_widths
        self.blocks = nn.ModuleList([DecoderBlock(reversed_widths[0], 0, reversed_widths[0], upsample=False)])
        for i in range(1, len(reversed_widths)):
            self.blocks.append(
                DecoderBlock(reversed_widths[i - 1], reversed_widths[i], reversed_widths[i], upsample=True)
            )

    def forward(self, features: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        skips = list(features)[::-1]
        x = self.blocks[0](skips[0])
        outputs = [x]
        for block, skip in zip(self.blocks[1:], skips[1:]):
            x = block(x, skip)
            outputs.append(x)
        return outputs


def bounded(features: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    """ヘッドが読む特徴（tanhで有界化）"""
    return [torch.tanh(f) for f in features]


class TextureHeads(nn.Module):
    """デコーダ特徴 → テクスチャオフセット（0初期化の1×1畳み込み）"""

    def __init__(self, in_channels: Sequence[int], out_channels: Sequence[int]):
        super().__init__()
        self.convs = nn.ModuleList(zero_conv(i, o) for i, o in zip(in_channels, out_channels))

    def forward(self, features: Sequence[torch.Tensor]) -> TexOffsets:
        return TexOffsets([conv(f) for conv, f in zip(self.convs, features)])


class SFTHeads(nn.Module):
    """デコーダ特徴 → CS-SFTの (α, β)

    α = 1 + scale(F)、β = shift(F)。最終層が0初期化なので初期状態は恒等変調。
    """

    def __init__(self, in_channels: Sequence[int], sft_channels: Sequence[int]):
        super().__init__()
        self.condition_scale = nn.ModuleList()
        self.condition_shift = nn.ModuleList()
        for c_in, c_out in zip(in_channels, sft_channels):
            self.condition_scale.append(nn.Sequential(
                nn.Conv2d(c_in, c_in, 3, 1, 1), nn.LeakyReLU(0.2), zero_conv(c_in, c_out)))
            self.condition_shift.append(nn.Sequential(
                nn.Conv2d(c_in, c_in, 3, 1, 1), nn.LeakyReLU(0.2), zero_conv(c_in, c_out)))

    def forward(self, features: Sequence[torch.Tensor]) -> SFTParams:
        scales = []
        for scale, shift, f in zip(self.condition_scale, self.condition_shift, features):
            scales.append((1.0 + scale(f), shift(f)))
        return SFTParams(scales)


class PlaneOffsetHeads(nn.Module):
    """最も細かいデコーダ特徴 → 静的三平面への直接オフセット"""

    def __init__(self, in_channels: int, plane_channels: int):
        super().__init__()
        self.plane_channels = plane_channels
        self.head = nn.Sequential(nn.Conv2d(in_channels, in_channels, 3, 1, 1), nn.LeakyReLU(0.2),
                                  zero_conv(in_channels, 3 * plane_channels))

    def forward(self, features: Sequence[torch.Tensor]) -> SFTParams:
        out = self.head(features[-1])
        return SFTParams(plane_offset=out.view(out.shape[0], 3, self.plane_channels, *out.shape[-2:]))


class RefinementEncoder(nn.Module):
    """U-Netバックボーン + デコーダ + 出力ヘッド

    サブクラスは heads を差し替えるだけで、再帰版（ConvGRU）も同じ
    デコーダとヘッドを複製して作る。
    """

    def __init__(self, in_channels: int, widths: Sequence[int], resolution: int, heads: nn.Module):
        super().__init__()
        if resolution % 2 ** (len(widths) - 1) != 0:
            raise ValueError(f"エラー: 入力解像度 {resolution} が {len(widths)} 段のU-Netで割り切れません")
        self.resolution = resolution
        self.backbone = UNetBackbone(in_channels, widths)
        self.decoder = UNetDecoder(widths)
        self.heads = heads

    @property
    def in_channels(self) -> int:
        return self.backbone.in_channels

    @property
    def resolutions(self) -> List[int]:
        """デコーダ出力の解像度（粗→細）"""
        n = len(self.backbone.widths)
        return [self.resolution // 2 ** (n - 1 - i) for i in range(n)]

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"エラー: エンコーダ入力は B×{self.in_channels}×H×W である必要があります: {tuple(x.shape)}"
            )
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(f"エラー: 入力解像度 {tuple(x.shape[-2:])} が {self.resolution} と一致しません")

    def encode_backbone(self, x: torch.Tensor) -> List[torch.Tensor]:
        self.check_input(x)
        return self.backbone(x)

    def forward(self, x: torch.Tensor):
        return self.heads(bounded(self.decoder(self.encode_backbone(x))))


class TextureEncoder(RefinementEncoder):
    """E_tex: 観測をテクスチャ特徴空間のオフセットへ変換

    input_domain='uv' ではUV平面へ逆投影した画像・残差・可視マスク（7ch）を、
    'image' では画像領域の画像と残差（6ch）をそのまま入力する。
    """

    def __init__(self, texture_channels: Sequence[int], widths: Sequence[int], resolution: int,
                 input_domain: str = "uv"):
        if input_domain not in TEXTURE_DOMAINS:
            raise ValueError(f"エラー: 未知の入力領域です: {input_domain}")
        decoder_channels = list(widths)[::-1]
        super().__init__(7 if input_domain == "uv" else 6, widths, resolution,
                         TextureHeads(decoder_channels, texture_channels))
        self.input_domain = input_domain

    @staticmethod
    def uv_inputs(uv_image: UVImage, uv_residual: UVImage) -> torch.Tensor:
        """UV入力を結合（不可視テクセルのデータは0）"""
        if uv_image.data.shape != uv_residual.data.shape:
            raise ValueError("エラー: UV画像とUV残差のグリッドが一致しません")
        if not torch.equal(uv_image.visibility, uv_residual.visibility):
            raise ValueError("エラー: UV画像とUV残差の可視マスクが一致しません")
        vis = uv_image.visibility
        return torch.cat([uv_image.data * vis, uv_residual.data * vis, vis], dim=1)

    @staticmethod
    def image_inputs(image: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
        if image.shape != residual.shape:
            raise ValueError("エラー: 画像と残差の形状が一致しません")
        return torch.cat([image, residual], dim=1)


class TriPlaneEncoder(RefinementEncoder):
    """E_tri: 画像と残差から静的三平面の変調を予測

    mode='sft' は各変調点の (α, β) を、'offset' は三平面への直接オフセットを出力する。
    """

    def __init__(self, sft_channels: Sequence[int], widths: Sequence[int], resolution: int,
                 plane_channels: int, plane_resolution: int, mode: str = "sft"):
        if mode not in TRIPLANE_MODES:
            raise ValueError(f"エラー: 未知のE_triモードです: {mode}")
        if mode == "offset" and resolution != plane_resolution:
            raise ValueError("エラー: オフセット予測では入力解像度と三平面解像度が一致する必要があります")
        decoder_channels = list(widths)[::-1]
        heads = (SFTHeads(decoder_channels, sft_channels) if mode == "sft"
                 else PlaneOffsetHeads(decoder_channels[-1], plane_channels))
        super().__init__(6, widths, resolution, heads)
        self.mode = mode

    @staticmethod
    def image_inputs(image: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
        return TextureEncoder.image_inputs(image, residual)


class LatentEncoder(nn.Module):
    """E_latent: 画像 → W+（平均潜在 w_avg からの差分を予測）"""

    def __init__(self, num_ws: int, style_dim: int, widths: Sequence[int], resolution: int,
                 w_avg: Optional[torch.Tensor] = None):
        super().__init__()
        num_down = int(round(math.log2(resolution / 4))) if resolution >= 4 else -1
        if num_down < 0 or 4 * 2 ** num_down != resolution:
            raise ValueError(f"エラー: E_latentの入力解像度は4以上の2の冪である必要があります: {resolution}")
        self.num_ws = num_ws
        self.style_dim = style_dim
        self.resolution = resolution
        channels = [widths[min(i, len(widths) - 1)] for i in range(num_down + 1)]
        self.conv_first = nn.Conv2d(3, channels[0], 1)
        self.conv_down = nn.ModuleList(
            ResBlock(channels[i], channels[i + 1], mode="down") for i in range(num_down)
        )
        self.final_conv = nn.Conv2d(channels[-1], channels[-1], 3, 1, 1)
        self.final_linear = nn.Linear(channels[-1] * 16, num_ws * style_dim)
        default_init_weights(self.final_linear, scale=0.1)
        self.register_buffer("w_avg", torch.zeros(style_dim) if w_avg is None else w_avg.detach().clone())

    def forward(self, image: torch.Tensor) -> LatentCode:
        if image.dim() != 4 or image.shape[1] != 3 or tuple(image.shape[-2:]) != (self.resolution,) * 2:
            raise ValueError(
                f"エラー: E_latentの入力は B×3×{self.resolution}×{self.resolution} である必要があります: "
                f"{tuple(image.shape)}"
            )
        feat = F.leaky_relu(self.conv_first(image), negative_slope=0.2)
        for block in self.conv_down:
            feat = block(feat)
        feat = F.leaky_relu(self.final_conv(feat), negative_slope=0.2)
        delta = self.final_linear(feat.flatten(1)).view(-1, self.num_ws, self.style_dim)
        return LatentCode(self.w_avg + delta)
