"""再構成・再演の評価指標

PSNR・L1・知覚距離（代理）・同一性類似度（代理）・AKD・フレシェ距離（代理埋め込み）。
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy import linalg

from ..facemodel.toy_head import Camera, FaceParams, ToyFaceModel
from ..training.proxies import ProxyNetwork

PSNR_CAP = 99.0
METRIC_COLUMNS = ["psnr", "l1", "lpips", "csim", "akd", "akd_norm"]

Images = Union[torch.Tensor, Sequence[torch.Tensor]]
Stats = Tuple[np.ndarray, np.ndarray]


@dataclass
class MetricsReport:
    """フレームごとの指標と集計

    frames: 1行1フレームのDataFrame（列は METRIC_COLUMNS）。集計値は各列の平均。
    fid: 予測と正解の埋め込み統計のフレシェ距離（フレームが2枚未満ならNone）。
    """

    frames: pd.DataFrame
    fid: Optional[float] = None
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def aggregate(self) -> Dict[str, float]:
        out = {name: float(self.frames[name].mean()) for name in METRIC_COLUMNS}
        out["fid"] = float("nan") if self.fid is None else float(self.fid)
        return out

    def __getitem__(self, name: str) -> float:
        return self.aggregate[name]

    @staticmethod
    def concat(reports: Sequence["MetricsReport"]) -> "MetricsReport":
        """複数のレポートのフレームを結合（fidは結合後に再計算しないのでNone）"""
        return MetricsReport(pd.concat([r.frames for r in reports], ignore_index=True))


def _as_batch(images: Images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.unsqueeze(0) if images.dim() == 3 else images
    return torch.stack([im.squeeze(0) if im.dim() == 4 else im for im in images])


def psnr(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """[0,1]画像のサンプルごとのPSNR（上限 99 dB）"""
    if pred.shape != target.shape:
        raise ValueError(f"エラー: PSNRの入力形状が一致しません: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mse = (pred.double() - target.double()).square().flatten(1).mean(dim=1)
    value = 10.0 * torch.log10(1.0 / mse.clamp_min(1e-300))
    return torch.where(mse > 0, value.clamp(max=PSNR_CAP), torch.full_like(value, PSNR_CAP))


def keypoint_distance(pred_points: np.ndarray, target_points: np.ndarray) -> np.ndarray:
    """フレームごとの平均ユークリッド距離（画素）

    Args:
        pred_points: N×L×2
        target_points: N×L×2

    Returns:
        長さNの配列
    """
    pred_points = np.asarray(pred_points, dtype=np.float64)
    target_points = np.asarray(target_points, dtype=np.float64)
    if pred_points.shape != target_points.shape:
        raise ValueError(
            f"エラー: ランドマークの形状が一致しません: {pred_points.shape} vs {target_points.shape}"
        )
    return np.linalg.norm(pred_points - target_points, axis=-1).mean(axis=-1)


def landmark_points(face_model: ToyFaceModel, params: Sequence[FaceParams], cameras: Sequence[Camera],
                    resolution: int) -> np.ndarray:
    """係数・カメラからランドマークの画素座標 (N×L×2)"""
    return np.stack([face_model.landmarks2d(p, c.scaled(resolution))[0] for p, c in zip(params, cameras)])


def track_keypoints(pred: Images, target: Images, points: np.ndarray, radius: int = 3,
                    patch: int = 2) -> np.ndarray:
    """正解画像の各ランドマーク周りのパッチを予測画像の近傍で探し、予測側のランドマークを推定

    ずれ (dx, dy) は |d| の小さい順に調べ、二乗誤差が真に小さいときだけ更新する。

    Args:
        pred: 予測画像列
        target: 正解画像列
        points: 正解側のランドマーク N×L×2（画素座標 x, y）
        radius: 探索半径（画素）
        patch: パッチの半径（画素）

    Returns:
        予測側のランドマーク N×L×2
    """
    pred, target = _as_batch(pred), _as_batch(target)
    points = np.asarray(points, dtype=np.float64)
    if pred.shape != target.shape or points.shape[0] != pred.shape[0]:
        raise ValueError("エラー: ランドマーク追跡の入力形状が一致しません")
    margin = radius + patch
    widths = ((0, 0), (0, 0), (margin, margin), (margin, margin))
    pred_np = np.pad(pred.double().cpu().numpy(), widths, mode="edge")
    target_np = np.pad(target.double().cpu().numpy(), widths, mode="edge")
    height, width = pred.shape[-2:]
    offsets = sorted(((dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
                     key=lambda d: d[0] ** 2 + d[1] ** 2)
    size = 2 * patch + 1
    tracked = points.copy()
    for n in range(points.shape[0]):
        for l in range(points.shape[1]):
            cx = int(np.clip(round(points[n, l, 0]), 0, width - 1)) + radius
            cy = int(np.clip(round(points[n, l, 1]), 0, height - 1)) + radius
            template = target_np[n, :, cy:cy + size, cx:cx + size]
            best, move = np.inf, (0, 0)
            for dx, dy in offsets:
                window = pred_np[n, :, cy + dy:cy + dy + size, cx + dx:cx + dx + size]
                ssd = float(np.square(window - template).sum())
                if ssd < best - 1e-12:
                    best, move = ssd, (dx, dy)
            tracked[n, l] += move
    return tracked


@torch.no_grad()
def embedding_statistics(proxies: ProxyNetwork, images: Images) -> Stats:
    """代理埋め込みの (平均, 共分散)"""
    batch = _as_batch(images)
    if batch.shape[0] < 2:
        raise ValueError("エラー: 共分散の推定には2枚以上の画像が必要です")
    emb = proxies.embed(batch).double().cpu().numpy()
    return emb.mean(axis=0), np.atleast_2d(np.cov(emb, rowvar=False))


def _psd_sqrt(matrix: np.ndarray, name: str) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    tol = 1e-8 * max(1.0, float(np.abs(values).max(initial=0.0)))
    if values.min(initial=0.0) < -tol:
        raise ValueError(f"エラー: {name} の共分散が半正定値ではありません（最小固有値 {values.min():.3e}）")
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(stats_a: Stats, stats_b: Stats) -> float:
    """‖μA−μB‖² + tr(ΣA + ΣB − 2(ΣA ΣB)^½)

    (ΣA ΣB)^½ のトレースは対称行列 ΣA^½ ΣB ΣA^½ の固有値の平方根の和で求める。

    Args:
        stats_a: (平均, 共分散)
        stats_b: (平均, 共分散)

    Returns:
        フレシェ距離
    """
    mu_a, sigma_a = (np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in stats_a)
    mu_b, sigma_b = (np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in stats_b)
    sigma_a, sigma_b = np.atleast_2d(sigma_a), np.atleast_2d(sigma_b)
    if mu_a.shape != mu_b.shape or sigma_a.shape != sigma_b.shape or sigma_a.shape != (mu_a.size,) * 2:
        raise ValueError("エラー: 統計量の次元が一致しません")
    sigma_a = (sigma_a + sigma_a.T) / 2
    sigma_b = (sigma_b + sigma_b.T) / 2
    root_a = _psd_sqrt(sigma_a, "A")
    _psd_sqrt(sigma_b, "B")
    middle = root_a @ sigma_b @ root_a
    eig = linalg.eigh((middle + middle.T) / 2, eigvals_only=True)
    trace_sqrt = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt)
    return max(value, 0.0)


@torch.no_grad()
def compute_metrics(
    pred: Images,
    target: Images,
    proxies: ProxyNetwork,
    landmarks: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    with_fid: bool = True,
) -> MetricsReport:
    """予測列と正解列の指標を計算

    Args:
        pred: 予測画像列（N×3×R×R またはその列）
        target: 正解画像列
        proxies: 代理ネットワーク
        landmarks: (予測側, 正解側) のランドマーク N×L×2（Noneならakdは0）
        with_fid: フレームが2枚以上ならフレシェ距離も計算する

    Returns:
        MetricsReport
    """
    pred, target = _as_batch(pred), _as_batch(target)
    if pred.shape[0] != target.shape[0]:
        raise ValueError(f"エラー: 予測 {pred.shape[0]} 枚と正解 {target.shape[0]} 枚の長さが一致しません")
    if pred.shape != target.shape:
        raise ValueError(f"エラー: 画像の形状が一致しません: {tuple(pred.shape)} vs {tuple(target.shape)}")
    n, resolution = pred.shape[0], pred.shape[-1]
    if landmarks is None:
        akd = np.zeros(n)
    else:
        akd = keypoint_distance(*landmarks)
        if akd.shape[0] != n:
            raise ValueError("エラー: ランドマークの枚数が画像と一致しません")

    frames = pd.DataFrame({
        "psnr": psnr(pred, target).cpu().numpy(),
        "l1": (pred - target).abs().flatten(1).mean(dim=1).double().cpu().numpy(),
        "lpips": proxies.lpips(pred, target).double().cpu().numpy(),
        "csim": proxies.similarity(pred, target).double().cpu().numpy(),
        "akd": akd,
        "akd_norm": akd / (math.sqrt(2.0) * resolution),
    }, columns=METRIC_COLUMNS)
    fid = None
    if with_fid and n >= 2:
        fid = frechet_distance(embedding_statistics(proxies, pred), embedding_statistics(proxies, target))
    return MetricsReport(frames, fid)
