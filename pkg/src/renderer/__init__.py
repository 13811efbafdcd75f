"""ラスタライズとボリュームレンダリング"""
from .rasterizer import (
    FeatureImage,
    Fragments,
    UVCorrespondence,
    UVImage,
    project_to_uv,
    rasterize,
    rasterize_plane,
    rasterize_triangles,
    uv_correspondence,
)
from .volume import RenderOutput, TriPlaneDecoder, render, sample_triplane

__all__ = [
    "FeatureImage",
    "Fragments",
    "RenderOutput",
    "TriPlaneDecoder",
    "UVCorrespondence",
    "UVImage",
    "project_to_uv",
    "rasterize",
    "rasterize_plane",
    "rasterize_triangles",
    "render",
    "sample_triplane",
    "uv_correspondence",
]
