"""頭部モデルモジュール"""
from .landmarks import LANDMARK_NAMES, landmark_contour_map
from .toy_head import (
    Camera,
    FaceParams,
    Mesh,
    ToyFaceModel,
    build_toy_model,
    camera_from_pose,
    icosphere,
    project_points,
)

__all__ = [
    "Camera",
    "FaceParams",
    "LANDMARK_NAMES",
    "Mesh",
    "ToyFaceModel",
    "build_toy_model",
    "camera_from_pose",
    "icosphere",
    "landmark_contour_map",
    "project_points",
]
