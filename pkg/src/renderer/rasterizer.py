"""テクスチャ空間・スクリーン空間・UV逆投影の間の幾何変換

ラスタライズは全画素×全三角形の総当たり（面をチャンクに分けて処理）。
幾何はfloat64で扱い、勾配はテクスチャ値にのみ流れる。
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from ..facemodel.toy_head import Camera, Mesh, project_points

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-6
FACE_CHUNK = 256


@dataclass
class FeatureImage:
    """ラスタライズ結果 (data: B×C×H×W, mask: B×1×H×W)"""

    data: torch.Tensor
    mask: torch.Tensor

    @property
    def resolution(self) -> int:
        return self.data.shape[-1]


@dataclass
class UVImage:
    """UV平面上の画像 (data: B×C×Hu×Wu, visibility: B×1×Hu×Wu)"""

    data: torch.Tensor
    visibility: torch.Tensor


@dataclass
class Fragments:
    """画素ごとの最前面の三角形

    face_index: H×W（-1は被覆なし）、bary: H×W×3、depth: H×W（被覆なしはinf）
    """

    face_index: torch.Tensor
    bary: torch.Tensor
    depth: torch.Tensor

    @property
    def mask(self) -> torch.Tensor:
        return self.face_index >= 0


@dataclass
class UVCorrespondence:
    """テクセルから画像への対応（フレームごとにキャッシュする）

    grid: Hu×Wu×2（grid_sample座標）、visible: Hu×Wu（幾何的に可視なテクセル）
    """

    grid: torch.Tensor
    visible: torch.Tensor
    image_resolution: int


def rasterize_triangles(
    screen: Union[np.ndarray, torch.Tensor],
    depth: Union[np.ndarray, torch.Tensor],
    faces: Union[np.ndarray, torch.Tensor],
    resolution: Union[int, Tuple[int, int]],
    perspective: bool = True,
    face_mask: Optional[np.ndarray] = None,
    chunk: int = FACE_CHUNK,
) -> Fragments:
    """三角形を画素格子にラスタライズしzバッファで遮蔽を解決

    Args:
        screen: V×2 の画素座標 (x=列, y=行)
        depth: V 奥行き
        faces: F×3 頂点インデックス
        resolution: 出力解像度（int または (H, W)）
        perspective: Trueなら逆数奥行きで補間し、近平面の背後にかかる三角形を捨てる
        face_mask: 対象とする面のブールマスク
        chunk: 一度に処理する面数

    Returns:
        Fragments
    """
    height, width = (resolution, resolution) if isinstance(resolution, int) else resolution
    screen = torch.as_tensor(screen, dtype=torch.float64)
    depth = torch.as_tensor(depth, dtype=torch.float64)
    faces = torch.as_tensor(faces, dtype=torch.long)

    keep = torch.ones(len(faces), dtype=torch.bool)
    if face_mask is not None:
        keep &= torch.as_tensor(face_mask, dtype=torch.bool)
    if perspective:
        keep &= (depth[faces] > NEAR_PLANE).all(dim=1)
    face_ids = torch.nonzero(keep).reshape(-1)

    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=torch.float64) + 0.5,
        torch.arange(width, dtype=torch.float64) + 0.5,
        indexing="ij",
    )
    px = xs.reshape(-1, 1)
    py = ys.reshape(-1, 1)

    num_pixels = height * width
    best_depth = torch.full((num_pixels,), float("inf"), dtype=torch.float64)
    best_face = torch.full((num_pixels,), -1, dtype=torch.long)
    best_bary = torch.zeros(num_pixels, 3, dtype=torch.float64)

    for start in range(0, len(face_ids), chunk):
        ids = face_ids[start:start + chunk]
        tri = screen[faces[ids]]
        z = depth[faces[ids]]
        x0, y0 = tri[:, 0, 0], tri[:, 0, 1]
        x1, y1 = tri[:, 1, 0], tri[:, 1, 1]
        x2, y2 = tri[:, 2, 0], tri[:, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        nondegenerate = area.abs() > 1e-12
        area = torch.where(nondegenerate, area, torch.ones_like(area))

        # 辺関数による重心座標（向きはareaの符号で正規化）
        w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        w2 = ((x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)) / area
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12) & nondegenerate

        if perspective:
            q0, q1, q2 = w0 / z[:, 0], w1 / z[:, 1], w2 / z[:, 2]
            inv_depth = q0 + q1 + q2
            pix_depth = 1.0 / inv_depth.clamp_min(1e-12)
            bary = torch.stack([q0, q1, q2], dim=-1) / inv_depth.clamp_min(1e-12).unsqueeze(-1)
        else:
            pix_depth = w0 * z[:, 0] + w1 * z[:, 1] + w2 * z[:, 2]
            bary = torch.stack([w0, w1, w2], dim=-1)

        pix_depth = torch.where(inside, pix_depth, torch.full_like(pix_depth, float("inf")))
        chunk_depth, chunk_arg = pix_depth.min(dim=1)
        closer = chunk_depth < best_depth
        best_depth = torch.where(closer, chunk_depth, best_depth)
        best_face = torch.where(closer, ids[chunk_arg], best_face)
        chosen = bary[torch.arange(num_pixels), chunk_arg]
        best_bary = torch.where(closer.unsqueeze(-1), chosen, best_bary)

    return Fragments(
        best_face.reshape(height, width),
        best_bary.reshape(height, width, 3),
        best_depth.reshape(height, width),
    )


def sample_texture(texture: torch.Tensor, mesh: Mesh, fragments: Fragments) -> FeatureImage:
    """フラグメントのUVでテクスチャを双線形サンプリング

    Args:
        texture: B×C×Ht×Wt（またはC×Ht×Wt）
        mesh: UVを持つメッシュ
        fragments: rasterize_trianglesの結果

    Returns:
        FeatureImage（被覆外は0）
    """
    if texture.dim() == 3:
        texture = texture.unsqueeze(0)
    batch = texture.shape[0]
    uv = torch.as_tensor(mesh.uv, dtype=torch.float64)
    faces = torch.as_tensor(mesh.faces, dtype=torch.long)
    mask = fragments.mask
    tri_uv = uv[faces[fragments.face_index.clamp_min(0)]]
    pix_uv = (fragments.bary.unsqueeze(-1) * tri_uv).sum(dim=-2)

    grid = (2.0 * pix_uv - 1.0).to(texture.dtype).to(texture.device)
    grid = grid.unsqueeze(0).expand(batch, -1, -1, -1)
    sampled = F.grid_sample(texture, grid, mode="bilinear", padding_mode="border", align_corners=False)
    mask = mask.to(texture.dtype).to(texture.device).expand(batch, 1, -1, -1)
    return FeatureImage(sampled * mask, mask)


def rasterize_fragments(mesh: Mesh, camera: Camera, resolution: int) -> Fragments:
    """透視カメラでのフラグメント（幾何のみ）"""
    cam = camera.scaled(resolution)
    screen, depth = project_points(mesh.vertices, cam)
    return rasterize_triangles(np.nan_to_num(screen), depth, mesh.faces, resolution, perspective=True)


def rasterize(mesh: Mesh, texture: torch.Tensor, camera: Camera, out_resolution: int) -> FeatureImage:
    """UVテクスチャを透視カメラの画像へラスタライズ

    Args:
        mesh: 変形済みメッシュ
        texture: 単一スケールのUV特徴グリッド (B×C×Ht×Wt)
        camera: カメラ
        out_resolution: 出力解像度

    Returns:
        FeatureImage
    """
    return sample_texture(texture, mesh, rasterize_fragments(mesh, camera, out_resolution))


def plane_fragments(mesh: Mesh, resolution: int, extent: float) -> Fragments:
    """正面(xy)平面への正射影フラグメント

    平面の列は x、行は y に対応し [-extent, extent] を覆う。奥行きは extent - z。
    """
    v = mesh.vertices
    screen = np.stack([(v[:, 0] / extent + 1.0) / 2.0 * resolution,
                       (v[:, 1] / extent + 1.0) / 2.0 * resolution], axis=1)
    return rasterize_triangles(screen, extent - v[:, 2], mesh.faces, resolution, perspective=False)


def rasterize_plane(mesh: Mesh, texture: torch.Tensor, resolution: int, extent: float) -> FeatureImage:
    """UVテクスチャを三平面の正面平面へラスタライズ"""
    return sample_texture(texture, mesh, plane_fragments(mesh, resolution, extent))


def _first_hit(origin: torch.Tensor, directions: torch.Tensor, triangles: torch.Tensor,
               chunk: int = FACE_CHUNK) -> torch.Tensor:
    # Möller–Trumbore。各レイの最初の交点までの距離（交差なしはinf）
    t_hit = torch.full((len(directions),), float("inf"), dtype=torch.float64)
    eps = 1e-9
    for start in range(0, len(triangles), chunk):
        tri = triangles[start:start + chunk]
        v0 = tri[:, 0]
        e1 = tri[:, 1] - v0
        e2 = tri[:, 2] - v0
        pvec = torch.cross(directions.unsqueeze(1).expand(-1, len(tri), -1),
                           e2.unsqueeze(0).expand(len(directions), -1, -1), dim=-1)
        det = (e1.unsqueeze(0) * pvec).sum(-1)
        valid = det.abs() > 1e-12
        inv = 1.0 / torch.where(valid, det, torch.ones_like(det))
        tvec = origin.unsqueeze(0) - v0
        u = (tvec.unsqueeze(0) * pvec).sum(-1) * inv
        qvec = torch.cross(tvec, e1, dim=-1)
        v = (directions @ qvec.T) * inv
        t = (e2 * qvec).sum(-1).unsqueeze(0) * inv
        hit = valid & (u >= -eps) & (v >= -eps) & (u + v <= 1.0 + eps) & (t > eps)
        t = torch.where(hit, t, torch.full_like(t, float("inf")))
        t_hit = torch.minimum(t_hit, t.min(dim=1).values)
    return t_hit


def uv_correspondence(
    mesh: Mesh,
    camera: Camera,
    uv_resolution: int,
    image_resolution: int,
    depth_tolerance: float = 1e-3,
) -> UVCorrespondence:
    """各テクセルの表面点を画像へ対応付ける

    テクセルが可視であるのは、表面点がカメラを向き、画像内に投影され、
    カメラからのレイの最初の交点との距離差が ε_z 以下の場合。
    ε_z = depth_tolerance × シーン半径（メッシュの外接半径）。

    Args:
        mesh: 変形済みメッシュ
        camera: カメラ
        uv_resolution: UVグリッドの解像度
        image_resolution: 対応先画像の解像度
        depth_tolerance: シーン半径に対する相対許容差

    Returns:
        UVCorrespondence
    """
    uv_screen = mesh.uv * uv_resolution
    frags = rasterize_triangles(uv_screen, np.zeros(len(mesh.uv)), mesh.faces, uv_resolution,
                                perspective=False, face_mask=mesh.uv_valid)
    covered = frags.mask.reshape(-1)
    face_index = frags.face_index.reshape(-1)[covered]
    bary = frags.bary.reshape(-1, 3)[covered]

    vertices = torch.as_tensor(mesh.vertices, dtype=torch.float64)
    faces = torch.as_tensor(mesh.faces, dtype=torch.long)
    triangles = vertices[faces]
    points = (bary.unsqueeze(-1) * triangles[face_index]).sum(dim=1)
    normals = torch.as_tensor(mesh.face_normals(), dtype=torch.float64)[face_index]

    cam = camera.scaled(image_resolution)
    origin = torch.as_tensor(cam.position, dtype=torch.float64)
    to_point = points - origin
    front = (normals * to_point).sum(-1) < 0

    pixels, depth = project_points(points.numpy(), cam)
    pixels = torch.as_tensor(np.nan_to_num(pixels, nan=-1.0), dtype=torch.float64)
    in_bounds = (
        (torch.as_tensor(depth) > NEAR_PLANE)
        & (pixels[:, 0] >= 0) & (pixels[:, 0] <= image_resolution)
        & (pixels[:, 1] >= 0) & (pixels[:, 1] <= image_resolution)
    )

    distance = to_point.norm(dim=-1)
    candidates = front & in_bounds
    unoccluded = torch.zeros_like(candidates)
    if candidates.any():
        scene_radius = float(np.linalg.norm(mesh.vertices, axis=1).max())
        directions = to_point[candidates] / distance[candidates].unsqueeze(-1)
        t_hit = _first_hit(origin, directions, triangles)
        unoccluded[candidates] = distance[candidates] - t_hit <= depth_tolerance * scene_radius

    grid = torch.zeros(uv_resolution * uv_resolution, 2, dtype=torch.float64)
    visible = torch.zeros(uv_resolution * uv_resolution, dtype=torch.bool)
    grid[covered] = 2.0 * pixels / image_resolution - 1.0
    visible[covered] = candidates & unoccluded
    return UVCorrespondence(
        grid.reshape(uv_resolution, uv_resolution, 2),
        visible.reshape(uv_resolution, uv_resolution),
        image_resolution,
    )


def project_to_uv(
    image: FeatureImage,
    mesh: Mesh,
    camera: Camera,
    uv_resolution: int,
    depth_tolerance: float = 1e-3,
    correspondence: Optional[UVCorrespondence] = None,
) -> UVImage:
    """画像をUV平面へ逆投影

    可視テクセルの値はマスクで正規化した双線形サンプル bilinear(I·m) / bilinear(m)。

    Args:
        image: 同じカメラモデルで得た画像
        mesh: 変形済みメッシュ
        camera: カメラ
        uv_resolution: UVグリッドの解像度
        depth_tolerance: zテストの相対許容差
        correspondence: 計算済みの対応（省略時は計算する）

    Returns:
        UVImage（不可視テクセルは0）
    """
    data = image.data if image.data.dim() == 4 else image.data.unsqueeze(0)
    mask = image.mask if image.mask.dim() == 4 else image.mask.reshape(1, 1, *image.mask.shape[-2:])
    resolution = data.shape[-1]
    if correspondence is None:
        correspondence = uv_correspondence(mesh, camera, uv_resolution, resolution, depth_tolerance)
    elif correspondence.image_resolution != resolution:
        raise ValueError("エラー: 対応の画像解像度が入力画像と一致しません")

    batch = data.shape[0]
    mask = mask.to(data.dtype).expand(batch, 1, -1, -1)
    grid = correspondence.grid.to(data.dtype).to(data.device).unsqueeze(0).expand(batch, -1, -1, -1)
    num = F.grid_sample(data * mask, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    den = F.grid_sample(mask, grid, mode="bilinear", padding_mode="zeros", align_corners=False)

    visible = correspondence.visible.to(data.device).reshape(1, 1, uv_resolution, uv_resolution) & (den > 1e-6)
    values = num / den.clamp_min(1e-6)
    out = torch.where(visible, values, torch.zeros_like(values))
    return UVImage(out, visible.to(data.dtype))
