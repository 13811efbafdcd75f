"""反転・アニメーションのパイプラインモジュール"""
from .inversion import Avatar, AvatarInverter, AvatarSession, FrameObservation, residual

__all__ = ["Avatar", "AvatarInverter", "AvatarSession", "FrameObservation", "residual"]
