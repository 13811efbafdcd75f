"""三平面特徴のボリュームレンダリング"""
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..facemodel.toy_head import Camera

# (features B×N×C, points B×N×3) -> (sigma B×N, color B×N×C_r)
Decoder = Callable[[torch.Tensor, torch.Tensor], Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class RenderOutput:
    """レンダリング結果

    raw: B×C_r×H×W（先頭3チャネルが色）、rgb: B×3×H×W、alpha: B×1×H×W、depth: B×1×H×W
    """

    raw: torch.Tensor
    rgb: torch.Tensor
    alpha: torch.Tensor
    depth: torch.Tensor


def camera_rays(camera: Camera, resolution: int) -> Tuple[np.ndarray, np.ndarray]:
    """画素中心を通るレイ

    Returns:
        (H·W×3 原点, H·W×3 単位方向)
    """
    cam = camera.scaled(resolution)
    coords = np.arange(resolution, dtype=np.float64) + 0.5
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    local = np.stack([(xs - cam.cx) / cam.focal, (ys - cam.cy) / cam.focal, np.ones_like(xs)], axis=-1)
    directions = local.reshape(-1, 3) @ cam.rotation
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.position, directions.shape).copy()
    return origins, directions


def box_intersect(origins: torch.Tensor, directions: torch.Tensor, extent: float
                  ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """軸平行ボックス [-extent, extent]³ とのスラブ交差

    Returns:
        (t_near, t_far, hit)。交差しないレイは t_near = t_far = 0
    """
    safe = torch.where(directions.abs() < 1e-12, torch.full_like(directions, 1e-12), directions)
    t0 = (-extent - origins) / safe
    t1 = (extent - origins) / safe
    t_near = torch.minimum(t0, t1).amax(dim=-1).clamp_min(0.0)
    t_far = torch.maximum(t0, t1).amin(dim=-1)
    hit = t_far > t_near
    zero = torch.zeros_like(t_near)
    return torch.where(hit, t_near, zero), torch.where(hit, t_far, zero), hit


def sample_triplane(planes: torch.Tensor, points: torch.Tensor, extent: float) -> torch.Tensor:
    """三平面 (xy, xz, yz) の双線形サンプルの和

    Args:
        planes: B×3×C×R×R
        points: B×N×3 ワールド座標
        extent: ボックスの半幅

    Returns:
        B×N×C
    """
    coords = points / extent
    projections = [coords[..., [0, 1]], coords[..., [0, 2]], coords[..., [1, 2]]]
    out = 0
    for k, grid in enumerate(projections):
        sampled = F.grid_sample(planes[:, k], grid.unsqueeze(1), mode="bilinear",
                                padding_mode="border", align_corners=False)
        out = out + sampled.squeeze(2).permute(0, 2, 1)
    return out


class TriPlaneDecoder(nn.Module):
    """点特徴 → (密度, 特徴色) の小さなMLP

    密度には中心球の事前分布を加え、未学習でも頭部状の体積になる。
    """

    def __init__(self, in_channels: int, out_channels: int, hidden: int = 64,
                 prior_radius: float = 0.95, prior_sharpness: float = 10.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_channels, hidden),
            nn.Softplus(),
            nn.Linear(hidden, 1 + out_channels),
        )
        self.prior_radius = prior_radius
        self.prior_sharpness = prior_sharpness

    def forward(self, features: torch.Tensor, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = self.net(features)
        prior = self.prior_sharpness * (self.prior_radius - points.norm(dim=-1))
        sigma = F.softplus(x[..., 0] + prior)
        color = torch.sigmoid(x[..., 1:]) * (1 + 2 * 0.001) - 0.001
        return sigma, color


def render(
    planes: torch.Tensor,
    cameras: Sequence[Camera],
    resolution: int,
    samples_per_ray: int,
    decoder: Decoder,
    extent: float = 1.2,
) -> RenderOutput:
    """三平面をアルファ合成でレンダリング

    サンプルは各区間の中点（決定的）で、δは区間幅。背景は特徴0・rgbは白。

    Args:
        planes: B×3×C×R×R
        cameras: 長さBのカメラ列
        resolution: 出力解像度
        samples_per_ray: レイあたりのサンプル数（2以上）
        decoder: 点特徴のデコーダ
        extent: ボックスの半幅

    Returns:
        RenderOutput
    """
    if samples_per_ray < 2:
        raise ValueError(f"エラー: samples_per_rayは2以上である必要があります: {samples_per_ray}")
    if len(cameras) != planes.shape[0]:
        raise ValueError("エラー: カメラ数とバッチサイズが一致しません")
    dtype, device = planes.dtype, planes.device
    batch = planes.shape[0]

    rays = [camera_rays(camera, resolution) for camera in cameras]
    origins = torch.as_tensor(np.stack([o for o, _ in rays]), dtype=dtype, device=device)
    directions = torch.as_tensor(np.stack([d for _, d in rays]), dtype=dtype, device=device)
    t_near, t_far, _ = box_intersect(origins, directions, extent)

    delta = (t_far - t_near) / samples_per_ray
    steps = torch.arange(samples_per_ray, dtype=dtype, device=device) + 0.5
    t = t_near.unsqueeze(-1) + steps * delta.unsqueeze(-1)
    points = origins.unsqueeze(2) + t.unsqueeze(-1) * directions.unsqueeze(2)

    num_rays = points.shape[1]
    flat = points.reshape(batch, num_rays * samples_per_ray, 3)
    sigma, color = decoder(sample_triplane(planes, flat, extent), flat)
    sigma = sigma.reshape(batch, num_rays, samples_per_ray)
    color = color.reshape(batch, num_rays, samples_per_ray, -1)

    optical = sigma * delta.unsqueeze(-1)
    alpha_i = 1.0 - torch.exp(-optical)
    transmittance = torch.exp(-(torch.cumsum(optical, dim=-1) - optical))
    weights = transmittance * alpha_i

    raw = (weights.unsqueeze(-1) * color).sum(dim=2)
    alpha = weights.sum(dim=-1)
    depth = (weights * t).sum(dim=-1) / alpha.clamp_min(1e-8)
    rgb = (raw[..., :3] + (1.0 - alpha).unsqueeze(-1)).clamp(0.0, 1.0)

    def to_image(x: torch.Tensor) -> torch.Tensor:
        return x.reshape(batch, resolution, resolution, -1).permute(0, 3, 1, 2).contiguous()

    return RenderOutput(to_image(raw), to_image(rgb), to_image(alpha.unsqueeze(-1)),
                        to_image(depth.unsqueeze(-1)))
