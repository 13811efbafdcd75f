"""合成データの生成

凍結した事前分布ジェネレータから、潜在空間でランダムに選んだ人物の動画
（係数・カメラ・画像と中間特徴の正解）を作る。事前分布の学習に使う
「実画像」は、滑らかなランダム色テクスチャを貼ったトイ頭部を白背景に
合成した手続き的な画像で代用する。
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.nn import functional as F

from ..facemodel.landmarks import landmark_contour_map
from ..facemodel.toy_head import Camera, FaceParams, ToyFaceModel, camera_from_pose
from ..generator.avatar_gan import AvatarGenerator
from ..generator.types import LatentCode, NeuralTexture, TriPlane
from ..pipeline.inversion import FrameObservation
from ..renderer.rasterizer import UVImage, rasterize
from ..utils.config import CameraConfig, Config

logger = logging.getLogger(__name__)

RENDER_CHUNK = 8


@dataclass
class SyntheticFrame:
    """1フレーム分の正解（画像 3×R×R、ニューラル描画 C_r×R×R、合成済み三平面）"""

    params: FaceParams
    camera: Camera
    image: torch.Tensor
    raw: torch.Tensor
    triplane: TriPlane


@dataclass
class SyntheticSample:
    """合成人物1人分の動画

    texture はフレームによらない g_tex(w) の正解（バッチ1）。
    """

    seed: int
    latent: LatentCode
    texture: NeuralTexture
    frames: List[SyntheticFrame]

    def __len__(self) -> int:
        return len(self.frames)

    def observation(self, index: int) -> FrameObservation:
        frame = self.frames[index]
        return FrameObservation.single(frame.image, frame.params, frame.camera)


def sample_camera(rng: np.random.Generator, config: CameraConfig, resolution: int) -> Camera:
    """設定範囲の一様分布から姿勢をサンプリング"""
    yaw = rng.uniform(*config.yaw_range)
    pitch = rng.uniform(*config.pitch_range)
    return camera_from_pose(yaw, pitch, config.radius, resolution=resolution, focal_scale=config.focal_scale)


def sample_latent(generator: AvatarGenerator, seed: int, batch: int = 1) -> LatentCode:
    """単位ガウスの z を写像した w（全層で共通）"""
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(batch, generator.config.z_dim, generator=gen)
    device = next(generator.parameters()).device
    return generator.latent_from_z(z.to(device))


@torch.no_grad()
def render_frames(generator: AvatarGenerator, latent: LatentCode, params: Sequence[FaceParams],
                  cameras: Sequence[Camera], resolution: Optional[int] = None) -> List[SyntheticFrame]:
    """同じ人物の複数フレームをまとめて描画"""
    frames = []
    for start in range(0, len(params), RENDER_CHUNK):
        p = list(params[start:start + RENDER_CHUNK])
        c = list(cameras[start:start + RENDER_CHUNK])
        w = LatentCode(latent.wplus.expand(len(p), -1, -1))
        bundle = generator.synthesize_bundle(w, p, c, resolution=resolution)
        for k in range(len(p)):
            frames.append(SyntheticFrame(
                p[k], c[k], bundle.render.rgb[k], bundle.render.raw[k],
                TriPlane(bundle.triplane.planes[k:k + 1]),
            ))
    return frames


@torch.no_grad()
def sample_synthetic_identity(generator: AvatarGenerator, config: Config, seed: int,
                              n_frames: int) -> SyntheticSample:
    """潜在空間からランダムな人物を選び、n_frames フレームの動画を合成

    形状係数は人物ごとに固定し、表情とカメラをフレームごとにサンプリングする。

    Args:
        generator: 凍結した事前分布ジェネレータ
        config: 全体設定（カメラ範囲・解像度）
        seed: 人物のシード
        n_frames: フレーム数

    Returns:
        SyntheticSample
    """
    if n_frames < 1:
        raise ValueError(f"エラー: フレーム数は1以上である必要があります: {n_frames}")
    rng = np.random.default_rng(seed)
    face_model = generator.face_model
    latent = sample_latent(generator, seed)
    shape = rng.uniform(-1.0, 1.0, face_model.num_shape)
    resolution = generator.config.render_resolution
    params = [face_model.sample_params(rng, shape=shape) for _ in range(n_frames)]
    cameras = [sample_camera(rng, config.camera, resolution) for _ in range(n_frames)]
    frames = render_frames(generator, latent, params, cameras)
    return SyntheticSample(int(seed), latent, generator.g_tex(latent), frames)


def stack_observations(observations: Sequence[FrameObservation]) -> FrameObservation:
    """バッチ1の観測を並べて1つのバッチにする（派生量も結合）"""
    if not observations:
        raise ValueError("エラー: 観測が1つもありません")

    def cat(name):
        values = [getattr(o, name) for o in observations]
        if any(v is None for v in values):
            return None
        return torch.cat(values)

    def cat_uv(name):
        values = [getattr(o, name) for o in observations]
        if any(v is None for v in values):
            return None
        return UVImage(torch.cat([v.data for v in values]), torch.cat([v.visibility for v in values]))

    return FrameObservation(
        torch.cat([o.image for o in observations]),
        [p for o in observations for p in o.params],
        [c for o in observations for c in o.cameras],
        cat("coarse"), cat("residual"), cat_uv("uv_image"), cat_uv("uv_residual"),
    )


# ----------------------------------------------------------------------
# 事前分布の学習用の手続き的な実画像
# ----------------------------------------------------------------------
def gaussian_blur(images: torch.Tensor, sigma: float) -> torch.Tensor:
    """分離可能なガウスぼかし（sigma ≤ 0 ならそのまま）"""
    if sigma <= 0:
        return images
    radius = max(1, int(math.ceil(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=images.dtype, device=images.device)
    kernel = torch.exp(-x ** 2 / (2 * sigma ** 2))
    kernel = kernel / kernel.sum()
    c = images.shape[1]
    out = F.pad(images, (radius, radius, 0, 0), mode="replicate")
    out = F.conv2d(out, kernel.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    out = F.pad(out, (0, 0, radius, radius), mode="replicate")
    return F.conv2d(out, kernel.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def landmark_maps(face_model: ToyFaceModel, params: Sequence[FaceParams], cameras: Sequence[Camera],
                  resolution: int) -> torch.Tensor:
    """係数・カメラに対応するランドマーク輪郭マップ (B×1×R×R)"""
    maps = []
    for p, c in zip(params, cameras):
        points, valid = face_model.landmarks2d(p, c.scaled(resolution))
        maps.append(landmark_contour_map(points, valid, resolution))
    return torch.stack(maps)


def procedural_real_batch(face_model: ToyFaceModel, config: Config, rng: np.random.Generator,
                          batch: int, resolution: int) -> Tuple[torch.Tensor, torch.Tensor,
                                                                List[FaceParams], List[Camera]]:
    """滑らかなランダム色テクスチャを貼った頭部の画像（白背景）

    Returns:
        (B×3×R×R 画像, B×1×R×R ランドマークマップ, 係数, カメラ)
    """
    images, params, cameras = [], [], []
    uv_resolution = config.rasterizer.uv_resolution
    for _ in range(batch):
        p = face_model.sample_params(rng)
        c = sample_camera(rng, config.camera, resolution)
        coarse = torch.as_tensor(rng.uniform(0.15, 0.9, size=(1, 3, 4, 4)), dtype=torch.float32)
        texture = F.interpolate(coarse, size=(uv_resolution, uv_resolution), mode="bilinear",
                                align_corners=False)
        image = rasterize(face_model.deform(p), texture, c, resolution)
        images.append(image.data[0] + (1.0 - image.mask[0]))
        params.append(p)
        cameras.append(c)
    maps = landmark_maps(face_model, params, cameras, resolution)
    return torch.stack(images), maps, params, cameras
