"""ワンショット反転・逐次（少数ショット）反転・アニメーション

ワンショット反転は粗→細の2段構成:
  1. ŵ = E_latent(I) から粗い正準特徴を合成し、推定した係数・カメラで Î を描画
  2. ΔI = I − Î をUV平面へ逆投影して E_tex に、画像領域のまま E_tri に入力し、
     テクスチャオフセットとCS-SFT変調を得る

逐次反転では最初のフレームで ŵ と粗い特徴を固定し、以降のフレームの観測と残差を
ConvGRUの隠れ状態に畳み込んでいく。
"""
import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from ..encoder.one_shot import LatentEncoder, RefinementEncoder, TextureEncoder, TriPlaneEncoder
from ..encoder.recurrent import ConvFusion, RecurrentDecoder, RecurrentState
from ..encoder.sft import SFTParams, TexOffsets
from ..facemodel.toy_head import Camera, FaceParams
from ..generator.avatar_gan import AvatarGenerator, SynthesisBundle
from ..generator.types import LatentCode, NeuralTexture, TriPlane
from ..renderer.rasterizer import FeatureImage, UVImage, project_to_uv, uv_correspondence
from ..renderer.volume import RenderOutput
from ..utils.config import Config
from ..utils.errors import SessionError

logger = logging.getLogger(__name__)


@dataclass
class FrameObservation:
    """1フレーム分の観測（バッチBの独立な系列を並べたもの）

    image: B×3×R×R、params/cameras: 長さB。
    coarse (Î)、residual (ΔI)、uv_image、uv_residual は observe で埋まる派生量。
    """

    image: torch.Tensor
    params: List[FaceParams]
    cameras: List[Camera]
    coarse: Optional[torch.Tensor] = None
    residual: Optional[torch.Tensor] = None
    uv_image: Optional[UVImage] = None
    uv_residual: Optional[UVImage] = None

    def __post_init__(self):
        if self.image.dim() != 4 or self.image.shape[1] != 3:
            raise ValueError(f"エラー: 画像は B×3×H×W である必要があります: {tuple(self.image.shape)}")
        if len(self.params) != self.batch or len(self.cameras) != self.batch:
            raise ValueError("エラー: 係数・カメラの数と画像のバッチサイズが一致しません")

    @property
    def batch(self) -> int:
        return self.image.shape[0]

    @property
    def observed(self) -> bool:
        return self.residual is not None

    @property
    def visibility(self) -> Optional[torch.Tensor]:
        return None if self.uv_image is None else self.uv_image.visibility

    @classmethod
    def single(cls, image: torch.Tensor, params: FaceParams, camera: Camera) -> "FrameObservation":
        """3×R×R の画像1枚からバッチ1の観測を作る"""
        return cls(image.unsqueeze(0) if image.dim() == 3 else image, [params], [camera])


@dataclass
class Avatar:
    """反転結果のアバター

    texture は粗いテクスチャにオフセットを加えたもの。静的三平面は
    latent と sft から必要時に合成するか、static に実体化済みのものを持つ。
    """

    latent: LatentCode
    texture: NeuralTexture
    sft: Optional[SFTParams] = None
    static: Optional[TriPlane] = None

    @property
    def batch(self) -> int:
        return self.latent.wplus.shape[0]

    def detach(self) -> "Avatar":
        sft = None
        if self.sft is not None:
            sft = SFTParams([(a.detach(), b.detach()) for a, b in self.sft.scales],
                            None if self.sft.plane_offset is None else self.sft.plane_offset.detach())
        return Avatar(self.latent.detach(), self.texture.detach(), sft,
                      None if self.static is None else self.static.detach())


@dataclass
class AvatarSession:
    """逐次反転の状態

    latent と粗い特徴は最初のフレームで固定され、state だけが更新される。
    """

    latent: LatentCode
    coarse_texture: NeuralTexture
    coarse_static: TriPlane
    state: RecurrentState

    @property
    def t(self) -> int:
        return self.state.t

    @property
    def coarse_avatar(self) -> Avatar:
        return Avatar(self.latent, self.coarse_texture, None, self.coarse_static)


def residual(image: torch.Tensor, coarse: torch.Tensor) -> torch.Tensor:
    """ΔI = I − Î"""
    if image.shape != coarse.shape:
        raise ValueError(
            f"エラー: 画像 {tuple(image.shape)} と再構成 {tuple(coarse.shape)} の形状が一致しません"
        )
    return image - coarse


class AvatarInverter(nn.Module):
    """凍結した事前分布ジェネレータと各エンコーダをまとめた反転器"""

    def __init__(
        self,
        generator: AvatarGenerator,
        e_latent: LatentEncoder,
        e_tex: TextureEncoder,
        e_tri: TriPlaneEncoder,
        rec_tex: RecurrentDecoder,
        rec_tri: RecurrentDecoder,
        fusion_tex: ConvFusion,
        fusion_tri: ConvFusion,
        uv_resolution: int,
        depth_tolerance: float = 1e-3,
    ):
        super().__init__()
        if e_tex.resolutions != generator.g_tex.resolutions:
            raise ValueError(
                f"エラー: E_texの出力解像度 {e_tex.resolutions} がテクスチャ {generator.g_tex.resolutions} と一致しません"
            )
        if e_tri.mode == "sft" and e_tri.resolutions != generator.g_static.resolutions:
            raise ValueError("エラー: E_triの出力解像度が静的ジェネレータの変調点と一致しません")
        self.generator = generator
        self.e_latent = e_latent
        self.e_tex = e_tex
        self.e_tri = e_tri
        self.rec_tex = rec_tex
        self.rec_tri = rec_tri
        self.fusion_tex = fusion_tex
        self.fusion_tri = fusion_tri
        self.uv_resolution = uv_resolution
        self.depth_tolerance = depth_tolerance

    @classmethod
    def from_config(cls, config: Config, generator: AvatarGenerator, texture_domain: str = "uv",
                    triplane_mode: str = "sft") -> "AvatarInverter":
        """設定からエンコーダ一式を構築

        Args:
            config: 全体設定
            generator: 事前分布ジェネレータ（E_latentの w_avg に使う）
            texture_domain: E_texの入力領域（'uv' / 'image'）
            triplane_mode: E_triの出力（'sft' / 'offset'）

        Returns:
            AvatarInverter
        """
        g, e = config.generator, config.encoders
        e_latent = LatentEncoder(g.num_ws, g.style_dim, e.latent_widths, g.render_resolution,
                                 w_avg=generator.mapping.mean_latent(seed=config.seed))
        tex_resolution = config.rasterizer.uv_resolution if texture_domain == "uv" else g.render_resolution
        e_tex = TextureEncoder(g.texture_channels, e.widths, tex_resolution, texture_domain)
        e_tri = TriPlaneEncoder(generator.g_static.sft_channels, e.widths, g.render_resolution,
                                g.plane_channels, g.plane_resolution, triplane_mode)
        return cls(
            generator, e_latent, e_tex, e_tri,
            RecurrentDecoder(e_tex, e.gru_kernel), RecurrentDecoder(e_tri, e.gru_kernel),
            ConvFusion(e_tex, e.fusion_window), ConvFusion(e_tri, e.fusion_window),
            config.rasterizer.uv_resolution, config.rasterizer.depth_tolerance,
        )

    # ------------------------------------------------------------------
    # 粗い段
    # ------------------------------------------------------------------
    def encode_latent(self, image: torch.Tensor) -> LatentCode:
        return self.e_latent(image)

    def coarse_avatar(self, latent: LatentCode) -> Avatar:
        """ŵ だけから得られる粗いアバター（オフセット・変調なし）"""
        return Avatar(latent, self.generator.g_tex(latent), None, self.generator.g_static(latent))

    def materialize_static(self, avatar: Avatar) -> TriPlane:
        if avatar.static is not None:
            return avatar.static
        return self.generator.g_static(avatar.latent, avatar.sft)

    def render_avatar(self, avatar: Avatar, params: Sequence[FaceParams], cameras: Sequence[Camera],
                      resolution: Optional[int] = None) -> SynthesisBundle:
        return self.generator.render_features(avatar.latent, avatar.texture, self.materialize_static(avatar),
                                              params, cameras, resolution)

    def observe(self, frame: FrameObservation, coarse: Avatar) -> FrameObservation:
        """Î・ΔI とそのUV逆投影を計算した観測を返す

        Args:
            frame: 画像・係数・カメラ
            coarse: Î を描画するアバター

        Returns:
            派生量を埋めたFrameObservation
        """
        resolution = frame.image.shape[-1]
        with torch.no_grad():
            coarse_rgb = self.render_avatar(coarse, frame.params, frame.cameras, resolution).render.rgb
            delta = residual(frame.image, coarse_rgb)
            uv_images, uv_residuals = [], []
            ones = torch.ones(1, 1, resolution, resolution, dtype=frame.image.dtype, device=frame.image.device)
            for b, (params, camera) in enumerate(zip(frame.params, frame.cameras)):
                mesh = self.generator.face_model.deform(params)
                corr = uv_correspondence(mesh, camera, self.uv_resolution, resolution, self.depth_tolerance)
                uv_images.append(project_to_uv(FeatureImage(frame.image[b:b + 1], ones), mesh, camera,
                                               self.uv_resolution, correspondence=corr))
                uv_residuals.append(project_to_uv(FeatureImage(delta[b:b + 1], ones), mesh, camera,
                                                  self.uv_resolution, correspondence=corr))
        visibility = torch.cat([u.visibility for u in uv_images])
        return replace(
            frame,
            coarse=coarse_rgb,
            residual=delta,
            uv_image=UVImage(torch.cat([u.data for u in uv_images]), visibility),
            uv_residual=UVImage(torch.cat([u.data for u in uv_residuals]), visibility),
        )

    # ------------------------------------------------------------------
    # ワンショットの細かい段
    # ------------------------------------------------------------------
    def texture_inputs(self, obs: FrameObservation) -> torch.Tensor:
        if not obs.observed:
            raise ValueError("エラー: 観測の派生量が計算されていません（observeを先に呼んでください）")
        if self.e_tex.input_domain == "uv":
            return TextureEncoder.uv_inputs(obs.uv_image, obs.uv_residual)
        return TextureEncoder.image_inputs(obs.image, obs.residual)

    def triplane_inputs(self, obs: FrameObservation) -> torch.Tensor:
        if not obs.observed:
            raise ValueError("エラー: 観測の派生量が計算されていません（observeを先に呼んでください）")
        return TriPlaneEncoder.image_inputs(obs.image, obs.residual)

    def refine(self, obs: FrameObservation) -> Tuple[TexOffsets, SFTParams]:
        """e_tex と e_tri を適用"""
        return self.e_tex(self.texture_inputs(obs)), self.e_tri(self.triplane_inputs(obs))

    def assemble(self, latent: LatentCode, coarse_texture: NeuralTexture, offsets: TexOffsets,
                 sft: SFTParams) -> Avatar:
        return Avatar(latent, coarse_texture.with_offsets(offsets), sft, None)

    def invert_one_shot(self, frame: FrameObservation) -> Avatar:
        """1枚の画像からアバターを反転

        Args:
            frame: 画像と推定済みの係数・カメラ

        Returns:
            Avatar
        """
        latent = self.encode_latent(frame.image)
        coarse = self.coarse_avatar(latent)
        offsets, sft = self.refine(self.observe(frame, coarse))
        return self.assemble(latent, coarse.texture, offsets, sft)

    # ------------------------------------------------------------------
    # 逐次反転
    # ------------------------------------------------------------------
    @staticmethod
    def _backbone(encoder: RefinementEncoder, x: torch.Tensor) -> List[torch.Tensor]:
        # バックボーンは凍結
        with torch.no_grad():
            return encoder.encode_backbone(x)

    def backbone_features(self, obs: FrameObservation) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        """凍結バックボーンの特徴（E_tex用, E_tri用）"""
        return (self._backbone(self.e_tex, self.texture_inputs(obs)),
                self._backbone(self.e_tri, self.triplane_inputs(obs)))

    def frame_features(self, obs: FrameObservation) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        """再帰デコーダに入るフレームごとの特徴（隠れ状態に依存しない）"""
        tex, tri = self.backbone_features(obs)
        return self.rec_tex.frame_features(tex), self.rec_tri.frame_features(tri)

    def start_session(self, first: FrameObservation) -> AvatarSession:
        """最初のフレームから ŵ と粗い特徴を固定し、零状態のセッションを作る"""
        latent = self.encode_latent(first.image)
        coarse = self.coarse_avatar(latent)
        batch = first.batch
        ref = first.image

        def zeros(channels: Sequence[int], resolutions: Sequence[int]) -> List[torch.Tensor]:
            return [torch.zeros(batch, c, r, r, dtype=ref.dtype, device=ref.device)
                    for c, r in zip(channels, resolutions)]

        state = RecurrentState(zeros(self.rec_tex.decoder.channels, self.e_tex.resolutions),
                               zeros(self.rec_tri.decoder.channels, self.e_tri.resolutions), 0)
        return AvatarSession(latent, coarse.texture, coarse.static, state)

    def observe_session(self, session: AvatarSession, frame: FrameObservation) -> FrameObservation:
        if frame.batch != session.latent.wplus.shape[0]:
            raise SessionError("エラー: フレームのバッチサイズがセッションと一致しません")
        return self.observe(frame, session.coarse_avatar)

    def advance(self, state: RecurrentState, tex_features: Sequence[torch.Tensor],
                tri_features: Sequence[torch.Tensor]) -> RecurrentState:
        return RecurrentState(self.rec_tex.step(state.tex, tex_features),
                              self.rec_tri.step(state.tri, tri_features), state.t + 1)

    def update_session(self, session: Optional[AvatarSession], frame: FrameObservation) -> AvatarSession:
        """1フレームの観測と残差で隠れ状態を1ステップ更新

        残差は最初のフレームの ŵ から得た粗いアバターに対して計算する。

        Args:
            session: start_sessionで作ったセッション
            frame: 新しいフレーム

        Returns:
            更新後のセッション（入力のセッションは変更しない）
        """
        if session is None:
            raise SessionError("エラー: セッションが初期化されていません（start_sessionを先に呼んでください）")
        obs = self.observe_session(session, frame)
        tex, tri = self.frame_features(obs)
        return replace(session, state=self.advance(session.state, tex, tri))

    def decode_session(self, session: AvatarSession) -> Tuple[TexOffsets, SFTParams]:
        """現在の隠れ状態からオフセットとSFT変調を読み出す"""
        if session is None or session.t < 1:
            raise SessionError("エラー: セッションがまだ1フレームも更新されていません")
        return self.rec_tex.emit(session.state.tex), self.rec_tri.emit(session.state.tri)

    def session_avatar(self, session: AvatarSession) -> Avatar:
        offsets, sft = self.decode_session(session)
        return self.assemble(session.latent, session.coarse_texture, offsets, sft)

    def invert_recurrent(self, frames: Sequence[FrameObservation]) -> Avatar:
        """フレーム列を逐次反転（最初のフレームが ŵ を決める）"""
        if not frames:
            raise ValueError("エラー: フレームが1枚もありません")
        session = self.start_session(frames[0])
        for frame in frames:
            session = self.update_session(session, frame)
        return self.session_avatar(session)

    # ------------------------------------------------------------------
    # アニメーション
    # ------------------------------------------------------------------
    def animate(self, avatar: Avatar, params: Sequence[FaceParams], cameras: Sequence[Camera],
                resolution: Optional[int] = None) -> RenderOutput:
        """保存された潜在・オフセット・変調で新しい係数・カメラを描画（エンコーダは使わない）"""
        return self.render_avatar(avatar, params, cameras, resolution).render
