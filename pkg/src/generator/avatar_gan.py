"""アニメーション可能な三平面GAN（事前分布ジェネレータ）

ニューラルテクスチャ枝 g_tex、静的三平面枝 g_static、多スケールのラスタライズ済み
テクスチャをアルファ合成する顔合成モジュール g_face、ボリュームレンダリングからなる。
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn

from ..encoder.sft import SFTParams, TexOffsets, apply_cs_sft
from ..facemodel.toy_head import Camera, FaceParams, ToyFaceModel
from ..renderer.rasterizer import FeatureImage, plane_fragments, sample_texture
from ..renderer.volume import RenderOutput, TriPlaneDecoder, render
from ..utils.config import GeneratorConfig
from .layers import ConstantInput, MappingNetwork, StyleConv, SynthesisBlock, ToFeatures
from .types import LatentCode, NeuralTexture, TriPlane

logger = logging.getLogger(__name__)


@dataclass
class FaceFeatures:
    """顔合成モジュールの出力（正面平面の特徴と被覆率）"""

    features: torch.Tensor
    coverage: torch.Tensor


@dataclass
class SynthesisBundle:
    """合成の中間量（学習時の中間教師に使う）"""

    render: RenderOutput
    texture: NeuralTexture
    static: TriPlane
    triplane: TriPlane


class TextureGenerator(nn.Module):
    """g_tex: W+ から多スケールのニューラルテクスチャを合成"""

    def __init__(self, style_dim: int, resolutions: Sequence[int], channels: Sequence[int]):
        super().__init__()
        self.resolutions = list(resolutions)
        self.constant_input = ConstantInput(channels[0], resolutions[0])
        self.conv0 = StyleConv(channels[0], channels[0], 3, style_dim)
        self.blocks = nn.ModuleList()
        self.heads = nn.ModuleList()
        in_channels = channels[0]
        for b, out_channels in enumerate(channels):
            self.blocks.append(SynthesisBlock(in_channels, out_channels, style_dim, upsample=b > 0))
            self.heads.append(ToFeatures(out_channels, out_channels, style_dim))
            in_channels = out_channels

    def forward(self, w: LatentCode) -> NeuralTexture:
        ws = w.wplus
        x = self.conv0(self.constant_input(ws.shape[0]), ws[:, 0])
        scales = []
        for b, (block, head) in enumerate(zip(self.blocks, self.heads)):
            x = block(x, ws[:, 1 + b], ws[:, 2 + b])
            scales.append(head(x, ws[:, 3 + b]))
        return NeuralTexture(scales)


class StaticGenerator(nn.Module):
    """g_static: W+ から静的三平面を合成（CS-SFTで空間変調可能）"""

    def __init__(self, style_dim: int, resolutions: Sequence[int], channels: Sequence[int],
                 plane_channels: int, plane_resolution: int):
        super().__init__()
        if resolutions[-1] != plane_resolution:
            raise ValueError("エラー: 静的ジェネレータの最終解像度は三平面解像度と一致する必要があります")
        self.resolutions = list(resolutions)
        self.channels = list(channels)
        self.plane_channels = plane_channels
        self.constant_input = ConstantInput(channels[0], resolutions[0])
        self.conv0 = StyleConv(channels[0], channels[0], 3, style_dim)
        self.blocks = nn.ModuleList()
        in_channels = channels[0]
        for b, out_channels in enumerate(channels):
            self.blocks.append(SynthesisBlock(in_channels, out_channels, style_dim, upsample=b > 0))
            in_channels = out_channels
        self.head = ToFeatures(channels[-1], 3 * plane_channels, style_dim)

    @property
    def sft_channels(self) -> List[int]:
        """各変調点でCS-SFTがかかるチャネル数（前半）"""
        return [c // 2 for c in self.channels]

    def forward(self, w: LatentCode, sft: Optional[SFTParams] = None) -> TriPlane:
        ws = w.wplus
        if sft is not None and sft.scales and sft.resolutions != self.resolutions:
            raise ValueError(
                f"エラー: SFTの解像度 {sft.resolutions} が変調点 {self.resolutions} と一致しません"
            )
        x = self.conv0(self.constant_input(ws.shape[0]), ws[:, 0])
        for b, block in enumerate(self.blocks):
            between = None
            if sft is not None and sft.scales:
                alpha, beta = sft.scales[b]
                between = lambda f, a=alpha, c=beta: apply_cs_sft(f, a, c)
            x = block(x, ws[:, 1 + b], ws[:, 2 + b], between=between)
        last = len(self.blocks) - 1
        planes = self.head(x, ws[:, 3 + last])
        planes = planes.view(ws.shape[0], 3, self.plane_channels, *planes.shape[-2:])
        if sft is not None and sft.plane_offset is not None:
            planes = planes + sft.plane_offset
        return TriPlane(planes)


class FaceSynthesis(nn.Module):
    """g_face: ラスタライズ済みテクスチャを各スケールでアルファ合成する顔合成モジュール

    スケール s の特徴は次の層の前に mask_s·T_s + (1 - mask_s)·features に置き換わる。
    被覆外（口内・遮蔽部）は大域文脈から補完される。
    """

    def __init__(self, style_dim: int, resolutions: Sequence[int], channels: Sequence[int], plane_channels: int):
        super().__init__()
        self.resolutions = list(resolutions)
        self.channels = list(channels)
        self.constant_input = ConstantInput(channels[0], resolutions[0])
        self.conv0 = StyleConv(channels[0], channels[0], 3, style_dim)
        self.blocks = nn.ModuleList()
        in_channels = channels[0]
        for b, out_channels in enumerate(channels):
            self.blocks.append(SynthesisBlock(in_channels, out_channels, style_dim, upsample=b > 0))
            in_channels = out_channels
        self.head = ToFeatures(channels[-1], plane_channels, style_dim)

    def forward(self, rasterized: Sequence[FeatureImage], w: LatentCode,
                return_blended: bool = False):
        if [r.data.shape[-1] for r in rasterized] != self.resolutions:
            raise ValueError(
                f"エラー: ラスタライズ解像度 {[r.data.shape[-1] for r in rasterized]} が "
                f"{self.resolutions} と一致しません"
            )
        if [r.data.shape[1] for r in rasterized] != self.channels:
            raise ValueError("エラー: ラスタライズ済みテクスチャのチャネル数が一致しません")
        ws = w.wplus
        x = self.conv0(self.constant_input(ws.shape[0]), ws[:, 0])
        blended = []
        for b, (block, texture) in enumerate(zip(self.blocks, rasterized)):
            x = block(x, ws[:, 1 + b], ws[:, 2 + b])
            x = texture.mask * texture.data + (1 - texture.mask) * x
            blended.append(x)
        last = len(self.blocks) - 1
        out = FaceFeatures(self.head(x, ws[:, 3 + last]), rasterized[-1].mask)
        return (out, blended) if return_blended else out


def compose(face: FaceFeatures, static: TriPlane) -> TriPlane:
    """顔特徴を静的三平面の正面平面に被覆率で合成

    Args:
        face: 正面平面の顔特徴と被覆率
        static: 静的三平面

    Returns:
        正面平面 = coverage·face + (1 - coverage)·static_front、側面はそのまま
    """
    if face.features.shape != static.front.shape:
        raise ValueError(
            f"エラー: 顔特徴 {tuple(face.features.shape)} と正面平面 {tuple(static.front.shape)} の形状が一致しません"
        )
    front = face.coverage * face.features + (1 - face.coverage) * static.front
    return TriPlane(torch.cat([front.unsqueeze(1), static.planes[:, 1:]], dim=1))


class AvatarGenerator(nn.Module):
    """事前分布ジェネレータ全体"""

    def __init__(self, config: GeneratorConfig, face_model: ToyFaceModel):
        super().__init__()
        if config.num_ws < 3 + len(config.texture_resolutions):
            raise ValueError("エラー: num_wsがスタイル層の数に足りません")
        self.config = config
        self.face_model = face_model
        self.mapping = MappingNetwork(config.z_dim, config.style_dim, config.mapping_layers)
        self.g_tex = TextureGenerator(config.style_dim, config.texture_resolutions, config.texture_channels)
        self.g_static = StaticGenerator(config.style_dim, config.texture_resolutions, config.static_channels,
                                        config.plane_channels, config.plane_resolution)
        self.g_face = FaceSynthesis(config.style_dim, config.texture_resolutions, config.texture_channels,
                                    config.plane_channels)
        self.decoder = TriPlaneDecoder(config.plane_channels, config.raw_channels, config.decoder_hidden,
                                       config.prior_radius, config.prior_sharpness)

    @property
    def num_ws(self) -> int:
        return self.config.num_ws

    def latent_from_z(self, z: torch.Tensor) -> LatentCode:
        """z を写像して全層に同じ w を並べる"""
        w = self.mapping(z)
        return LatentCode(w.unsqueeze(1).repeat(1, self.num_ws, 1))

    def _check_latent(self, w: LatentCode) -> None:
        if w.wplus.dim() != 3 or w.num_layers != self.num_ws or w.wplus.shape[-1] != self.config.style_dim:
            raise ValueError(f"エラー: 潜在コードの形状が不正です: {tuple(w.wplus.shape)}")

    def rasterize_textures(self, texture: NeuralTexture, params: Sequence[FaceParams]) -> List[FeatureImage]:
        """各スケールのテクスチャを正面平面へラスタライズ

        Args:
            texture: バッチBのニューラルテクスチャ
            params: 長さBの係数列

        Returns:
            スケールごとのFeatureImage
        """
        if len(params) != texture.scales[0].shape[0]:
            raise ValueError("エラー: 係数の数とバッチサイズが一致しません")
        per_scale: List[List[FeatureImage]] = [[] for _ in texture.scales]
        for b, p in enumerate(params):
            mesh = self.face_model.deform(p)
            for s, tex in enumerate(texture.scales):
                frags = plane_fragments(mesh, tex.shape[-1], self.config.box_extent)
                per_scale[s].append(sample_texture(tex[b:b + 1], mesh, frags))
        return [FeatureImage(torch.cat([f.data for f in fs]), torch.cat([f.mask for f in fs]))
                for fs in per_scale]

    def render(self, triplane: TriPlane, cameras: Sequence[Camera], resolution: Optional[int] = None,
               samples_per_ray: Optional[int] = None) -> RenderOutput:
        return render(
            triplane.planes, cameras,
            resolution or self.config.render_resolution,
            samples_per_ray or self.config.samples_per_ray,
            self.decoder, self.config.box_extent,
        )

    def render_features(self, w: LatentCode, texture: NeuralTexture, static: TriPlane,
                        params: Sequence[FaceParams], cameras: Sequence[Camera],
                        resolution: Optional[int] = None) -> SynthesisBundle:
        """正準空間の特徴から画像を合成（エンコーダは通さない）"""
        face = self.g_face(self.rasterize_textures(texture, params), w)
        triplane = compose(face, static)
        return SynthesisBundle(self.render(triplane, cameras, resolution), texture, static, triplane)

    def synthesize_bundle(self, w: LatentCode, params: Sequence[FaceParams], cameras: Sequence[Camera],
                          tex_offsets: Optional[TexOffsets] = None, sft: Optional[SFTParams] = None,
                          resolution: Optional[int] = None) -> SynthesisBundle:
        """g_tex(+オフセット) → 変形 → ラスタライズ → g_face → g_static(w, sft) と合成 → レンダリング"""
        self._check_latent(w)
        texture = self.g_tex(w).with_offsets(tex_offsets)
        static = self.g_static(w, sft)
        return self.render_features(w, texture, static, params, cameras, resolution)

    def synthesize(self, w: LatentCode, params: Sequence[FaceParams], cameras: Sequence[Camera],
                   tex_offsets: Optional[TexOffsets] = None, sft: Optional[SFTParams] = None,
                   resolution: Optional[int] = None) -> RenderOutput:
        return self.synthesize_bundle(w, params, cameras, tex_offsets, sft, resolution).render
