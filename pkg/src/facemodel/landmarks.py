"""ランドマーク定義と輪郭マップの描画"""
from typing import List, Tuple

import numpy as np
import torch

# 正準空間での特徴点方向（単位球上、+zが顔の正面）
LANDMARK_NAMES: List[str] = [
    "nose_tip", "nose_bridge", "eye_left", "eye_right",
    "eye_outer_left", "eye_outer_right", "brow_left", "brow_right",
    "mouth_left", "mouth_right", "lip_upper", "lip_lower",
    "chin", "cheek_left", "cheek_right", "forehead",
]

LANDMARK_DIRECTIONS: List[Tuple[float, float, float]] = [
    (0.0, -0.05, 1.0), (0.0, 0.2, 1.0), (-0.35, 0.25, 0.9), (0.35, 0.25, 0.9),
    (-0.55, 0.25, 0.8), (0.55, 0.25, 0.8), (-0.35, 0.45, 0.85), (0.35, 0.45, 0.85),
    (-0.3, -0.45, 0.85), (0.3, -0.45, 0.85), (0.0, -0.35, 0.95), (0.0, -0.55, 0.85),
    (0.0, -0.85, 0.55), (-0.7, -0.1, 0.7), (0.7, -0.1, 0.7), (0.0, 0.7, 0.7),
]

# 輪郭線（目・眉・鼻・口・顎）
CONTOUR_POLYLINES: List[List[int]] = [
    [4, 2], [5, 3],
    [6, 7],
    [1, 0],
    [8, 10, 9, 11, 8],
    [13, 12, 14],
]


def _segments() -> np.ndarray:
    return np.array([(a, b) for line in CONTOUR_POLYLINES for a, b in zip(line[:-1], line[1:])])


def landmark_contour_map(
    points: np.ndarray,
    valid: np.ndarray,
    resolution: int,
    sigma: float = 0.75,
) -> torch.Tensor:
    """ランドマークを結ぶ折れ線をガウス断面で描画

    Args:
        points: L×2 の画素座標
        valid: L 有効フラグ
        resolution: 出力画像の一辺
        sigma: 線の太さ（画素）

    Returns:
        1×H×W の輪郭マップ（値域[0,1]）
    """
    segments = _segments()
    keep = valid[segments[:, 0]] & valid[segments[:, 1]]
    segments = segments[keep]
    canvas = torch.zeros(1, resolution, resolution)
    if len(segments) == 0:
        return canvas

    p = torch.as_tensor(points, dtype=torch.float32)
    a = p[segments[:, 0]]
    b = p[segments[:, 1]]
    coords = torch.arange(resolution, dtype=torch.float32) + 0.5
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    pix = torch.stack([xx, yy], dim=-1).reshape(-1, 1, 2)

    ab = b - a
    t = ((pix - a) * ab).sum(-1) / (ab * ab).sum(-1).clamp_min(1e-8)
    closest = a + t.clamp(0.0, 1.0).unsqueeze(-1) * ab
    dist2 = ((pix - closest) ** 2).sum(-1).min(dim=1).values
    canvas[0] = torch.exp(-dist2 / (2 * sigma ** 2)).reshape(resolution, resolution)
    return canvas
