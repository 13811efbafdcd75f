"""学習の損失関数

非飽和ロジスティック損失、R1正則化、密度正則化、ステージ1/2の重み付き損失。
LossReportの total は有効な項の λ 重み付き和（float64で合計）。
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import torch
from torch.nn import functional as F

from ..generator.types import NeuralTexture, TriPlane
from ..renderer.volume import Decoder, sample_triplane
from ..utils.config import Stage1Config, Stage2Config
from .proxies import ProxyNetwork


@dataclass
class LossReport:
    """損失の内訳

    terms: 項の名前 → スカラー、weights: total に含める項の λ。
    weights に無い項は記録用（例: 識別器側の損失）。
    """

    total: torch.Tensor
    terms: Dict[str, torch.Tensor]
    weights: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def weighted(cls, terms: Dict[str, torch.Tensor], weights: Dict[str, float],
                 monitors: Optional[Dict[str, torch.Tensor]] = None) -> "LossReport":
        missing = set(weights) - set(terms)
        if missing:
            raise ValueError(f"エラー: 重みに対応する項がありません: {sorted(missing)}")
        total = sum(float(w) * terms[name].double() for name, w in weights.items())
        all_terms = dict(terms)
        all_terms.update(monitors or {})
        return cls(total, all_terms, dict(weights))

    def as_floats(self) -> Dict[str, float]:
        out = {name: float(value.detach()) for name, value in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


# ----------------------------------------------------------------------
# 敵対的損失
# ----------------------------------------------------------------------
def nonsaturating_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """mean(concat[softplus(−D(real)), softplus(D(fake))])"""
    return torch.cat([F.softplus(-real_logits).flatten(), F.softplus(fake_logits).flatten()]).mean()


def nonsaturating_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """mean(softplus(−D(fake)))"""
    return F.softplus(-fake_logits).mean()


def latent_adv(discriminator: Callable[[torch.Tensor], torch.Tensor], real_w: torch.Tensor,
               fake_w: torch.Tensor):
    """潜在識別器の (d_loss, g_loss)

    Args:
        discriminator: w ベクトル → ロジット
        real_w: 写像ネットワークからの実サンプル（B×L×D）
        fake_w: エンコーダの予測（B×L×D）

    Returns:
        (識別器の損失, エンコーダ側の損失)
    """
    if real_w.shape != fake_w.shape:
        raise ValueError(
            f"エラー: 実潜在 {tuple(real_w.shape)} と予測潜在 {tuple(fake_w.shape)} の形状が一致しません"
        )
    d_loss = nonsaturating_d_loss(discriminator(real_w.detach()), discriminator(fake_w.detach()))
    g_loss = nonsaturating_g_loss(discriminator(fake_w))
    return d_loss, g_loss


def dual_inputs(raw: torch.Tensor, rgb: torch.Tensor) -> torch.Tensor:
    """二重識別器の入力: (ニューラル描画の先頭3ch, 最終画像) をチャネル方向に結合

    超解像を持たないので2つは同じ解像度で、姿勢の条件付けは行わない。
    """
    raw_rgb = raw[:, :3]
    if raw_rgb.shape[-2:] != rgb.shape[-2:]:
        raw_rgb = F.interpolate(raw_rgb, size=rgb.shape[-2:], mode="bilinear", align_corners=False)
    return torch.cat([raw_rgb, rgb], dim=1)


def dual_disc_loss(discriminator: Callable[[torch.Tensor], torch.Tensor], real_pair: torch.Tensor,
                   fake_pair: torch.Tensor):
    """二重識別器の (d_loss, g_loss)。入力は dual_inputs で作った6chの画像"""
    d_loss = nonsaturating_d_loss(discriminator(real_pair.detach()), discriminator(fake_pair.detach()))
    g_loss = nonsaturating_g_loss(discriminator(fake_pair))
    return d_loss, g_loss


def r1_penalty(discriminator: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor,
               gamma: float) -> torch.Tensor:
    """R1勾配ペナルティ (γ/2)·mean_b ‖∇_x D(x_b)‖²"""
    real = real.detach().requires_grad_(True)
    logits = discriminator(real)
    if not logits.requires_grad:
        return torch.zeros((), dtype=real.dtype, device=real.device)
    grads = torch.autograd.grad(outputs=[logits.sum()], inputs=[real], create_graph=True,
                                allow_unused=True)[0]
    if grads is None:
        return torch.zeros((), dtype=real.dtype, device=real.device)
    return grads.square().flatten(1).sum(dim=1).mean() * (gamma / 2)


def density_regularization(decoder: Decoder, planes: torch.Tensor, extent: float, num_points: int,
                           std: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """mean |σ(x) − σ(x + δ)|（xはボックス内一様、δはガウス）

    Args:
        decoder: 三平面デコーダ
        planes: B×3×C×R×R
        extent: ボックスの半幅
        num_points: サンプルごとの点数
        std: δ の標準偏差（ボックス全幅に対する比）
        generator: 乱数生成器

    Returns:
        スカラー
    """
    batch = planes.shape[0]
    points = (torch.rand(batch, num_points, 3, generator=generator) * 2 - 1) * extent
    delta = torch.randn(batch, num_points, 3, generator=generator) * (std * 2 * extent)
    points = points.to(planes.dtype).to(planes.device)
    perturbed = points + delta.to(planes.dtype).to(planes.device)
    sigma, _ = decoder(sample_triplane(planes, points, extent), points)
    sigma_perturbed, _ = decoder(sample_triplane(planes, perturbed, extent), perturbed)
    return (sigma - sigma_perturbed).abs().mean()


# ----------------------------------------------------------------------
# ステージ損失
# ----------------------------------------------------------------------
@dataclass
class StageTargets:
    """ステージ2の予測・正解の組

    texture / triplane / raw は中間教師。正解側がNoneなら対応する項は無効。
    """

    image: torch.Tensor
    texture: Optional[NeuralTexture] = None
    triplane: Optional[TriPlane] = None
    raw: Optional[torch.Tensor] = None


def texture_distance(pred: NeuralTexture, target: NeuralTexture) -> torch.Tensor:
    """スケールごとの平均絶対差の平均"""
    if [tuple(s.shape) for s in pred.scales] != [tuple(s.shape) for s in target.scales]:
        raise ValueError("エラー: ニューラルテクスチャの形状が一致しません")
    return torch.stack([(p - t).abs().mean() for p, t in zip(pred.scales, target.scales)]).mean()


def _l1(pred: torch.Tensor, target: torch.Tensor, name: str) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"エラー: {name} の形状が一致しません: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def loss_stage1(pred: torch.Tensor, target: torch.Tensor, proxies: ProxyNetwork, config: Stage1Config,
                adv: Optional[torch.Tensor] = None) -> LossReport:
    """L1 + λ_lpips·LPIPS + λ_id·ID + λ_adv·L_adv（潜在識別器のエンコーダ側損失）

    Args:
        pred: 再構成 Î (B×3×H×W)
        target: 入力 I
        proxies: 代理ネットワーク
        config: 重み
        adv: latent_adv の g_loss（Noneなら敵対項なし）

    Returns:
        LossReport
    """
    terms = {
        "l1": _l1(pred, target, "画像"),
        "lpips": proxies.lpips(pred, target).mean(),
        "id": proxies.identity_distance(pred, target).mean(),
    }
    weights = {"l1": 1.0, "lpips": config.lambda_lpips, "id": config.lambda_id}
    if adv is not None:
        terms["adv_e"] = adv
        weights["adv_e"] = config.lambda_adv
    return LossReport.weighted(terms, weights)


def loss_stage2(pred: StageTargets, target: StageTargets, proxies: ProxyNetwork, config: Stage2Config,
                adv: Optional[torch.Tensor] = None) -> LossReport:
    """L1 + λ_lpips·LPIPS + λ_tri·L_tri + λ_tex·L_tex + λ_raw·L_raw + λ_adv·L_adv

    Args:
        pred: 予測（画像と中間量）
        target: 正解（中間量が無ければ画像のみ）
        proxies: 代理ネットワーク
        config: 重み
        adv: 二重識別器の g_loss（Noneなら敵対項なし）

    Returns:
        LossReport
    """
    terms = {
        "l1": _l1(pred.image, target.image, "画像"),
        "lpips": proxies.lpips(pred.image, target.image).mean(),
    }
    weights = {"l1": 1.0, "lpips": config.lambda_lpips}
    if target.triplane is not None and pred.triplane is not None:
        terms["l_tri"] = _l1(pred.triplane.planes, target.triplane.planes, "三平面")
        weights["l_tri"] = config.lambda_tri
    if target.texture is not None and pred.texture is not None:
        terms["l_tex"] = texture_distance(pred.texture, target.texture)
        weights["l_tex"] = config.lambda_tex
    if target.raw is not None and pred.raw is not None:
        terms["l_raw"] = _l1(pred.raw, target.raw, "ニューラル描画")
        weights["l_raw"] = config.lambda_raw
    if adv is not None:
        terms["adv_e"] = adv
        weights["adv_e"] = config.lambda_adv
    return LossReport.weighted(terms, weights)
