"""ワンショット・再帰エンコーダモジュール"""
from .sft import SFTParams, TexOffsets, apply_cs_sft
from .one_shot import LatentEncoder, RefinementEncoder, TextureEncoder, TriPlaneEncoder
from .recurrent import (
    ConvFusion,
    ConvGRU,
    GRUWeights,
    RecurrentDecoder,
    RecurrentState,
    conv_gru_step,
    fold_sequence,
    fusion_windows,
    warm_start,
    warm_start_state,
)

__all__ = [
    "ConvFusion",
    "ConvGRU",
    "GRUWeights",
    "LatentEncoder",
    "RecurrentDecoder",
    "RecurrentState",
    "RefinementEncoder",
    "SFTParams",
    "TexOffsets",
    "TextureEncoder",
    "TriPlaneEncoder",
    "apply_cs_sft",
    "conv_gru_step",
    "fold_sequence",
    "fusion_windows",
    "warm_start",
    "warm_start_state",
]
