"""手続き生成のブレンドシェイプ頭部モデルとピンホールカメラ"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .landmarks import LANDMARK_DIRECTIONS

logger = logging.getLogger(__name__)

# 係数の許容範囲（名目上は[-1, 1]）
COEFF_LIMIT = 3.0

# 楕円体の半径と鼻の隆起
HEAD_SCALE = np.array([0.85, 1.0, 0.88])
NOSE_DIRECTION = np.array([0.0, -0.1, 1.0]) / np.linalg.norm([0.0, -0.1, 1.0])
NOSE_HEIGHT = 0.12
NOSE_WIDTH = 0.18

# 基底の大きさの上限（頭部半径に対する割合）
MAX_DISPLACEMENT = 0.15
# 全基底のエッジ伸縮率の合計上限。これ以下なら係数[-1,1]で三角形は反転しない
MAX_EDGE_STRAIN = 0.25

# UV展開: 正面から FRONT_ANGLE までを半径 FRONT_RADIUS の円に割り当てる
FRONT_ANGLE = math.radians(70.0)
FRONT_RADIUS = 0.9
# UV空間で折り返す三角形の判定しきい値
MAX_UV_EXTENT = 0.25


@dataclass
class FaceParams:
    """形状・表情係数"""

    shape: np.ndarray
    expression: np.ndarray

    def __post_init__(self):
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(-1)
        self.expression = np.asarray(self.expression, dtype=np.float64).reshape(-1)
        for name, coeffs in (("shape", self.shape), ("expression", self.expression)):
            if not np.all(np.isfinite(coeffs)):
                raise ValueError(f"エラー: {name}係数に有限でない値が含まれています")
            if np.any(np.abs(coeffs) > COEFF_LIMIT):
                raise ValueError(
                    f"エラー: {name}係数が許容範囲[-{COEFF_LIMIT}, {COEFF_LIMIT}]を超えています"
                )

    @classmethod
    def zeros(cls, num_shape: int, num_expression: int) -> "FaceParams":
        return cls(np.zeros(num_shape), np.zeros(num_expression))

    def with_expression(self, expression: np.ndarray) -> "FaceParams":
        """形状はそのまま表情だけ差し替える"""
        return FaceParams(self.shape.copy(), expression)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"shape": self.shape.tolist(), "expression": self.expression.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "FaceParams":
        return cls(data["shape"], data["expression"])


@dataclass
class Camera:
    """原点を注視するピンホールカメラ

    カメラ座標系はOpenCV流（右 +x、下 +y、前方 +z）。画素中心は (j + 0.5, i + 0.5)。
    """

    yaw: float
    pitch: float
    radius: float
    focal: float
    cx: float
    cy: float
    resolution: int

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"エラー: カメラ半径は正である必要があります: {self.radius}")
        if abs(self.pitch) >= math.pi / 2:
            raise ValueError(f"エラー: |pitch| は π/2 未満である必要があります: {self.pitch}")

    @property
    def position(self) -> np.ndarray:
        cp = math.cos(self.pitch)
        return self.radius * np.array(
            [cp * math.sin(self.yaw), math.sin(self.pitch), cp * math.cos(self.yaw)]
        )

    @property
    def rotation(self) -> np.ndarray:
        """ワールド→カメラの回転（行が right, down, forward）"""
        forward = -self.position / np.linalg.norm(self.position)
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        return np.stack([right, down, forward])

    def scaled(self, resolution: int) -> "Camera":
        """解像度に合わせて内部パラメータを拡縮したカメラ"""
        s = resolution / self.resolution
        return Camera(self.yaw, self.pitch, self.radius,
                      self.focal * s, self.cx * s, self.cy * s, int(resolution))

    def to_dict(self) -> Dict[str, float]:
        return {
            "yaw": self.yaw, "pitch": self.pitch, "radius": self.radius,
            "focal": self.focal, "cx": self.cx, "cy": self.cy,
            "resolution": self.resolution,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "Camera":
        return cls(float(data["yaw"]), float(data["pitch"]), float(data["radius"]),
                   float(data["focal"]), float(data["cx"]), float(data["cy"]),
                   int(data["resolution"]))


def camera_from_pose(
    yaw: float,
    pitch: float,
    radius: float,
    intrinsics: Optional[Tuple[float, float, float]] = None,
    resolution: int = 32,
    focal_scale: float = 0.9,
) -> Camera:
    """球面上の姿勢からカメラを作成

    Args:
        yaw: 方位角（ラジアン、+xへ向かう向きが正）
        pitch: 仰角（ラジアン）
        radius: 原点からの距離
        intrinsics: (焦点距離, cx, cy) 画素単位。Noneなら解像度から決める
        resolution: 画像の一辺の画素数
        focal_scale: intrinsics省略時の焦点距離/解像度

    Returns:
        Cameraオブジェクト
    """
    if intrinsics is None:
        intrinsics = (focal_scale * resolution, resolution / 2.0, resolution / 2.0)
    focal, cx, cy = intrinsics
    return Camera(float(yaw), float(pitch), float(radius),
                  float(focal), float(cx), float(cy), int(resolution))


def project_points(points: np.ndarray, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """ワールド座標の点を画素座標へ投影

    Args:
        points: N×3 のワールド座標
        camera: カメラ

    Returns:
        (N×2 画素座標, N 奥行き)。奥行き0以下の点の座標はnan
    """
    cam = (np.asarray(points, dtype=np.float64) - camera.position) @ camera.rotation.T
    depth = cam[:, 2]
    safe = np.where(depth > 1e-9, depth, np.nan)
    u = camera.focal * cam[:, 0] / safe + camera.cx
    v = camera.focal * cam[:, 1] / safe + camera.cy
    return np.stack([u, v], axis=1), depth


@dataclass
class Mesh:
    """UV座標とランドマークを持つ三角形メッシュ"""

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    landmark_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    # UV空間でのラスタライズに使う面（後頭部で折り返す面を除く）
    uv_valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.landmark_indices = np.asarray(self.landmark_indices, dtype=np.int64)
        num_vertices = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= num_vertices):
            raise ValueError("エラー: 面のインデックスが頂点数を超えています")
        if self.uv.shape != (num_vertices, 2):
            raise ValueError("エラー: UV座標は頂点ごとに2次元である必要があります")
        if np.any(self.uv < 0.0) or np.any(self.uv > 1.0):
            raise ValueError("エラー: UV座標は[0,1]²の範囲である必要があります")
        if self.uv_valid is None:
            self.uv_valid = np.ones(len(self.faces), dtype=bool)

    def face_normals(self) -> np.ndarray:
        """正規化していない面法線 (F×3)"""
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces, self.uv, self.landmark_indices, self.uv_valid)


def icosphere(level: int) -> Tuple[np.ndarray, np.ndarray]:
    """単位球の正二十面体分割

    Args:
        level: 分割回数

    Returns:
        (V×3 頂点, F×3 面)。面は外向き法線になるよう向きを揃える
    """
    t = (1.0 + math.sqrt(5.0)) / 2.0
    vertices = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in vertices]

    for _ in range(level):
        cache: Dict[Tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        subdivided = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            subdivided += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = subdivided

    v = np.stack(verts)
    f = np.asarray(faces, dtype=np.int64)
    tri = v[f]
    outward = np.einsum("fi,fi->f", np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]),
                        tri.mean(axis=1)) > 0
    f[~outward] = f[~outward][:, [0, 2, 1]]
    return v, f


def _concentric_disk_to_square(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # 同心円写像（円盤→正方形）の逆写像。面積比を保つ
    r = np.sqrt(x ** 2 + y ** 2)
    a = np.zeros_like(r)
    b = np.zeros_like(r)
    horizontal = (np.abs(x) >= np.abs(y)) & (r > 0)
    vertical = (np.abs(x) < np.abs(y)) & (r > 0)
    a[horizontal] = np.sign(x[horizontal]) * r[horizontal]
    b[horizontal] = a[horizontal] * (4.0 / math.pi) * np.arctan(y[horizontal] / x[horizontal])
    b[vertical] = np.sign(y[vertical]) * r[vertical]
    a[vertical] = b[vertical] * (4.0 / math.pi) * np.arctan(x[vertical] / y[vertical])
    return a, b


def spherical_uv(directions: np.ndarray) -> np.ndarray:
    """正面(+z)中心の球面UV展開

    Args:
        directions: V×3 単位ベクトル

    Returns:
        V×2 のUV座標（[0,1]²、vは下向き）
    """
    theta = np.arccos(np.clip(directions[:, 2], -1.0, 1.0))
    phi = np.arctan2(directions[:, 1], directions[:, 0])
    rho = np.where(
        theta <= FRONT_ANGLE,
        FRONT_RADIUS * theta / FRONT_ANGLE,
        FRONT_RADIUS + (1.0 - FRONT_RADIUS) * (theta - FRONT_ANGLE) / (math.pi - FRONT_ANGLE),
    )
    a, b = _concentric_disk_to_square(rho * np.cos(phi), rho * np.sin(phi))
    uv = np.stack([(a + 1.0) / 2.0, (1.0 - b) / 2.0], axis=1)
    return np.clip(uv, 0.0, 1.0)


def _uv_valid_faces(uv: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = uv[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    signed = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    majority = np.sign(np.sum(np.sign(signed)))
    extent = tri.max(axis=1) - tri.min(axis=1)
    return (np.sign(signed) == majority) & (extent.max(axis=1) <= MAX_UV_EXTENT)


def _polynomial_features(u: np.ndarray) -> np.ndarray:
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    return np.stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, y * z, x * z], axis=1)


def _edge_strain(field_: np.ndarray, vertices: np.ndarray, edges: np.ndarray) -> float:
    delta = np.linalg.norm(field_[edges[:, 0]] - field_[edges[:, 1]], axis=1)
    length = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
    return float(np.max(delta / length))


@dataclass
class ToyFaceModel:
    """線形ブレンドシェイプ頭部モデル V = V̄ + S·s + E·e"""

    base: Mesh
    shape_basis: np.ndarray
    expression_basis: np.ndarray

    @property
    def num_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def num_expression(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def num_landmarks(self) -> int:
        return len(self.base.landmark_indices)

    def deform(self, params: FaceParams) -> Mesh:
        """係数からメッシュを変形

        Args:
            params: 形状・表情係数

        Returns:
            変形後のMesh（面・UV・ランドマークは共通）
        """
        if len(params.shape) != self.num_shape or len(params.expression) != self.num_expression:
            raise ValueError(
                f"エラー: 係数の次元が一致しません "
                f"(shape {len(params.shape)}/{self.num_shape}, "
                f"expression {len(params.expression)}/{self.num_expression})"
            )
        vertices = (
            self.base.vertices
            + self.shape_basis @ params.shape
            + self.expression_basis @ params.expression
        )
        return self.base.with_vertices(vertices)

    def landmarks2d(self, params: FaceParams, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
        """ランドマークの画素座標

        Args:
            params: 形状・表情係数
            camera: カメラ

        Returns:
            (L×2 画素座標, L 有効フラグ)。カメラ背後の点は無効
        """
        mesh = self.deform(params)
        points, depth = project_points(mesh.vertices[mesh.landmark_indices], camera)
        return points, depth > 1e-9

    def zero_params(self) -> FaceParams:
        return FaceParams.zeros(self.num_shape, self.num_expression)

    def sample_params(self, rng: np.random.Generator, shape: Optional[np.ndarray] = None) -> FaceParams:
        """[-1,1]の一様分布から係数をサンプリング（shape指定時は表情のみ）"""
        if shape is None:
            shape = rng.uniform(-1.0, 1.0, self.num_shape)
        return FaceParams(shape, rng.uniform(-1.0, 1.0, self.num_expression))

    def to_dict(self) -> Dict[str, torch.Tensor]:
        return {
            "vertices": torch.from_numpy(self.base.vertices.copy()),
            "faces": torch.from_numpy(self.base.faces.copy()),
            "uv": torch.from_numpy(self.base.uv.copy()),
            "landmark_indices": torch.from_numpy(self.base.landmark_indices.copy()),
            "uv_valid": torch.from_numpy(self.base.uv_valid.copy()),
            "shape_basis": torch.from_numpy(self.shape_basis.copy()),
            "expression_basis": torch.from_numpy(self.expression_basis.copy()),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, torch.Tensor]) -> "ToyFaceModel":
        base = Mesh(
            data["vertices"].numpy(), data["faces"].numpy(), data["uv"].numpy(),
            data["landmark_indices"].numpy(), data["uv_valid"].numpy().astype(bool),
        )
        return cls(base, data["shape_basis"].numpy(), data["expression_basis"].numpy())


def build_toy_model(seed: int, num_shape: int, num_expression: int, level: int = 3) -> ToyFaceModel:
    """乱数シードから頭部モデルを生成

    Args:
        seed: 乱数シード
        num_shape: 形状基底の数 K_s
        num_expression: 表情基底の数 K_e
        level: 二十面体の分割回数

    Returns:
        ToyFaceModel
    """
    if num_shape < 1 or num_expression < 1:
        raise ValueError("エラー: 基底数は1以上である必要があります")
    rng = np.random.default_rng(seed)

    directions, faces = icosphere(level)
    ellipsoid = directions * HEAD_SCALE
    bump = NOSE_HEIGHT * np.exp(-np.sum((directions - NOSE_DIRECTION) ** 2, axis=1) / (2 * NOSE_WIDTH ** 2))
    radial = np.linalg.norm(ellipsoid, axis=1, keepdims=True)
    vertices = ellipsoid * (1.0 + bump[:, None] / radial)

    # 低周波の多項式場。表情は顔の正面に重みを置く
    features = _polynomial_features(directions)
    front_weight = 1.0 / (1.0 + np.exp(-4.0 * directions[:, 2]))

    def random_fields(count: int, weight: Optional[np.ndarray]) -> np.ndarray:
        fields = []
        for _ in range(count):
            coeffs = rng.normal(size=(10, 3))
            f = features @ coeffs
            if weight is not None:
                f = f * weight[:, None]
            f = f / np.max(np.linalg.norm(f, axis=1))
            fields.append(f)
        return np.stack(fields, axis=2)

    shape_basis = random_fields(num_shape, None)
    expression_basis = random_fields(num_expression, front_weight)

    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    strain = sum(_edge_strain(b[:, :, k], vertices, edges)
                 for b in (shape_basis, expression_basis) for k in range(b.shape[2]))
    scale = min(MAX_DISPLACEMENT, MAX_EDGE_STRAIN / strain)
    shape_basis *= scale
    expression_basis *= scale
    logger.debug("基底のスケール: %.4f (エッジ伸縮率合計 %.3f)", scale, strain * scale)

    landmarks: List[int] = []
    for direction in LANDMARK_DIRECTIONS:
        d = np.asarray(direction, dtype=np.float64)
        order = np.argsort(-(directions @ (d / np.linalg.norm(d))))
        landmarks.append(int(next(i for i in order if i not in landmarks)))

    uv = spherical_uv(directions)
    base = Mesh(vertices, faces, uv, np.asarray(landmarks), _uv_valid_faces(uv, faces))
    return ToyFaceModel(base, shape_basis, expression_basis)


if __name__ == "__main__":
    # テスト用
    model = build_toy_model(7, 4, 4)
    print(f"頂点数: {len(model.base.vertices)}, 面数: {len(model.base.faces)}")
    print(f"UVラスタライズ対象の面: {int(model.base.uv_valid.sum())}")
    camera = camera_from_pose(0.0, 0.0, 2.7)
    points, valid = model.landmarks2d(model.zero_params(), camera)
    print(f"ランドマーク: {points.shape}, 有効 {int(valid.sum())}")
