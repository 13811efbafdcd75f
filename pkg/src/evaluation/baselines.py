"""複数フレームの集約方式

  recurrent:   ConvGRUで逐次に畳み込む（本方式）
  average:     フレームごとにワンショット反転し、正準空間の特徴を平均
  convfusion:  固定窓の畳み込み融合。窓より長い列は窓ごとの出力を平均
"""
import logging
from typing import Callable, Dict, List, Sequence

import torch

from ..encoder.recurrent import fusion_windows
from ..encoder.sft import TexOffsets
from ..generator.types import TriPlane
from ..pipeline.inversion import Avatar, AvatarInverter, FrameObservation

logger = logging.getLogger(__name__)


def _check_frames(frames: Sequence[FrameObservation]) -> None:
    if not frames:
        raise ValueError("エラー: フレームが1枚もありません")


@torch.no_grad()
def baseline_feature_average(inverter: AvatarInverter, frames: Sequence[FrameObservation]) -> Avatar:
    """フレームごとのワンショット反転の特徴平均

    テクスチャオフセットと、変調を適用して実体化した静的三平面を算術平均する。
    ŵ と粗いテクスチャは最初のフレームのものを使う。

    Args:
        inverter: 学習済みの反転器
        frames: 観測列

    Returns:
        静的三平面を実体化したAvatar
    """
    _check_frames(frames)
    offsets: List[TexOffsets] = []
    statics: List[TriPlane] = []
    first = None
    for frame in frames:
        latent = inverter.encode_latent(frame.image)
        coarse = inverter.coarse_avatar(latent)
        tex_offsets, sft = inverter.refine(inverter.observe(frame, coarse))
        offsets.append(tex_offsets)
        statics.append(inverter.generator.g_static(latent, sft))
        if first is None:
            first = coarse
    return Avatar(first.latent, first.texture.with_offsets(TexOffsets.mean(offsets)), None, TriPlane.mean(statics))


@torch.no_grad()
def baseline_convfusion(inverter: AvatarInverter, frames: Sequence[FrameObservation]) -> Avatar:
    """固定窓の畳み込み融合

    N ≤ W なら1回の融合で変調まで含めたアバターを返す。N > W なら窓ごとの
    オフセットと実体化した静的三平面を平均する。残差は最初のフレームの ŵ に対して計算する。
    """
    _check_frames(frames)
    latent = inverter.encode_latent(frames[0].image)
    coarse = inverter.coarse_avatar(latent)
    features = [inverter.backbone_features(inverter.observe(f, coarse)) for f in frames]
    fusion_tex, fusion_tri = inverter.fusion_tex, inverter.fusion_tri

    outputs = []
    for window in fusion_windows(len(frames), fusion_tex.window):
        tex = [fusion_tex.frame_features(features[k][0]) for k in window]
        tri = [fusion_tri.frame_features(features[k][1]) for k in window]
        outputs.append((fusion_tex.emit_window(tex), fusion_tri.emit_window(tri)))

    if len(outputs) == 1:
        offsets, sft = outputs[0]
        return inverter.assemble(latent, coarse.texture, offsets, sft)
    offsets = TexOffsets.mean([o for o, _ in outputs])
    static = TriPlane.mean([inverter.generator.g_static(latent, sft) for _, sft in outputs])
    return Avatar(latent, coarse.texture.with_offsets(offsets), None, static)


@torch.no_grad()
def baseline_recurrent(inverter: AvatarInverter, frames: Sequence[FrameObservation]) -> Avatar:
    _check_frames(frames)
    return inverter.invert_recurrent(frames)


AGGREGATORS: Dict[str, Callable[[AvatarInverter, Sequence[FrameObservation]], Avatar]] = {
    "recurrent": baseline_recurrent,
    "convfusion": baseline_convfusion,
    "average": baseline_feature_average,
}


def aggregate(method: str, inverter: AvatarInverter, frames: Sequence[FrameObservation]) -> Avatar:
    """名前で集約方式を選んでアバターを作る"""
    if method not in AGGREGATORS:
        raise ValueError(f"エラー: 未知の集約方式です: {method}（{', '.join(AGGREGATORS)}）")
    return AGGREGATORS[method](inverter, frames)
