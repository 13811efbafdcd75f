"""アニメーション可能な三平面GANモジュール"""
from .types import LatentCode, NeuralTexture, TriPlane
from .avatar_gan import (
    AvatarGenerator,
    FaceFeatures,
    FaceSynthesis,
    StaticGenerator,
    SynthesisBundle,
    TextureGenerator,
    compose,
)
from .layers import MappingNetwork, ModulatedConv2d, StyleConv

__all__ = [
    "AvatarGenerator",
    "FaceFeatures",
    "FaceSynthesis",
    "LatentCode",
    "MappingNetwork",
    "ModulatedConv2d",
    "NeuralTexture",
    "StaticGenerator",
    "StyleConv",
    "SynthesisBundle",
    "TextureGenerator",
    "TriPlane",
    "compose",
]
