"""ConvGRUによる時系列集約（seq2one）

各フレームの観測をワンショットエンコーダの凍結バックボーンに通し、
デコーダの各スケールに置いたConvGRUで隠れ状態を更新する。ヘッドは
最終的な隠れ状態だけを読むので、状態のメモリはフレーム数に依存しない。

    z, r = σ(Conv(f_t, h_{t-1}))
    o    = tanh(Conv(f_t, r ⊙ h_{t-1}))
    h_t  = z ⊙ h_{t-1} + (1 - z) ⊙ o
"""
import copy
import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .one_shot import RefinementEncoder, bounded

logger = logging.getLogger(__name__)

# 更新ゲートを閉じるバイアス（float32で 1 − σ(b) が1に丸まる）
CLOSED_GATE_BIAS = -20.0

FeatureList = List[torch.Tensor]


@dataclass
class GRUWeights:
    """ゲート畳み込み（出力 2S: z, r）と候補畳み込み（出力 S）の重み"""

    gate_weight: torch.Tensor
    gate_bias: torch.Tensor
    candidate_weight: torch.Tensor
    candidate_bias: torch.Tensor

    def __post_init__(self):
        state = self.candidate_weight.shape[0]
        if self.gate_weight.shape[0] != 2 * state or self.gate_bias.shape[0] != 2 * state:
            raise ValueError("エラー: ゲート畳み込みの出力は状態チャネルの2倍である必要があります")
        if self.gate_weight.shape[1:] != self.candidate_weight.shape[1:]:
            raise ValueError("エラー: ゲートと候補の畳み込みの入力形状が一致しません")

    @property
    def state_channels(self) -> int:
        return self.candidate_weight.shape[0]

    @property
    def input_channels(self) -> int:
        return self.candidate_weight.shape[1] - self.state_channels


def conv_gru_step(f_t: torch.Tensor, h_prev: torch.Tensor, weights: GRUWeights) -> torch.Tensor:
    """ConvGRUを1ステップ進める

    Args:
        f_t: B×C_in×H×W の入力特徴
        h_prev: B×S×H×W の前の隠れ状態
        weights: 畳み込みの重み

    Returns:
        B×S×H×W の新しい隠れ状態
    """
    if f_t.shape[0] != h_prev.shape[0] or f_t.shape[-2:] != h_prev.shape[-2:]:
        raise ValueError(
            f"エラー: 入力 {tuple(f_t.shape)} と隠れ状態 {tuple(h_prev.shape)} の形状が一致しません"
        )
    if h_prev.shape[1] != weights.state_channels or f_t.shape[1] != weights.input_channels:
        raise ValueError("エラー: チャネル数がGRUの重みと一致しません")
    padding = weights.gate_weight.shape[-1] // 2
    gates = torch.sigmoid(F.conv2d(torch.cat([f_t, h_prev], dim=1), weights.gate_weight,
                                   weights.gate_bias, padding=padding))
    z, r = torch.split(gates, weights.state_channels, dim=1)
    o = torch.tanh(F.conv2d(torch.cat([f_t, r * h_prev], dim=1), weights.candidate_weight,
                            weights.candidate_bias, padding=padding))
    return z * h_prev + (1 - z) * o


def fold_sequence(features: Sequence[torch.Tensor], h0: torch.Tensor, weights: GRUWeights) -> torch.Tensor:
    """conv_gru_stepの左畳み込み（空列ならh0をそのまま返す）"""
    h = h0
    for f_t in features:
        h = conv_gru_step(f_t, h, weights)
    return h


class ConvGRU(nn.Module):
    """学習可能なConvGRUブロック"""

    def __init__(self, input_channels: int, state_channels: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError(f"エラー: カーネルサイズは奇数である必要があります: {kernel_size}")
        self.gate = nn.Conv2d(input_channels + state_channels, 2 * state_channels, kernel_size)
        self.candidate = nn.Conv2d(input_channels + state_channels, state_channels, kernel_size)

    def init_pass_through(self) -> None:
        """零状態からの1ステップが tanh(f_t) になるように初期化

        更新ゲート z の入力側の重みを0・バイアスを強い負値にし、候補の入力側を
        恒等写像、バイアスを0にする。隠れ状態側の重みと r ゲートはそのまま残す。
        """
        state = self.candidate.out_channels
        in_channels = self.candidate.in_channels - state
        if in_channels != state:
            raise ValueError("エラー: 素通し初期化には入力と状態のチャネル数が一致する必要があります")
        center = self.candidate.kernel_size[0] // 2
        with torch.no_grad():
            self.gate.weight[:state, :in_channels].zero_()
            self.gate.bias[:state].fill_(CLOSED_GATE_BIAS)
            self.candidate.weight[:, :in_channels].zero_()
            self.candidate.weight[:, :in_channels, center, center] = torch.eye(state)
            self.candidate.bias.zero_()

    @property
    def weights(self) -> GRUWeights:
        return GRUWeights(self.gate.weight, self.gate.bias, self.candidate.weight, self.candidate.bias)

    def forward(self, f_t: torch.Tensor, h_prev: torch.Tensor) -> torch.Tensor:
        return conv_gru_step(f_t, h_prev, self.weights)


@dataclass
class RecurrentState:
    """E_tex_rec / E_tri_rec のスケールごとの隠れ状態とフレーム数"""

    tex: FeatureList
    tri: FeatureList
    t: int = 0

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"エラー: フレーム数は0以上である必要があります: {self.t}")

    @property
    def nbytes(self) -> int:
        return sum(h.numel() * h.element_size() for h in self.tex + self.tri)

    @property
    def shapes(self) -> List[tuple]:
        return [tuple(h.shape) for h in self.tex + self.tri]

    def detach(self) -> "RecurrentState":
        return RecurrentState([h.detach() for h in self.tex], [h.detach() for h in self.tri], self.t)

    def to_dict(self) -> Dict[str, object]:
        return {"tex": [h.detach().cpu() for h in self.tex],
                "tri": [h.detach().cpu() for h in self.tri],
                "t": int(self.t)}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "RecurrentState":
        return cls(list(data["tex"]), list(data["tri"]), int(data["t"]))


class RecurrentDecoder(nn.Module):
    """ワンショットエンコーダのデコーダとヘッドを複製し、各スケールにConvGRUを挟んだもの

    フレームごとの特徴はデコーダだけで決まり（隠れ状態に依存しない）、
    ヘッドは隠れ状態を読む。GRUは素通し初期化なので、零状態から1フレーム
    更新した出力は複製元のワンショットエンコーダの出力と一致する。
    """

    def __init__(self, encoder: RefinementEncoder, kernel_size: int = 3):
        super().__init__()
        self.decoder = copy.deepcopy(encoder.decoder)
        self.heads = copy.deepcopy(encoder.heads)
        self.grus = nn.ModuleList(ConvGRU(c, c, kernel_size) for c in self.decoder.channels)
        for gru in self.grus:
            gru.init_pass_through()

    def frame_features(self, backbone_features: Sequence[torch.Tensor]) -> FeatureList:
        return self.decoder(backbone_features)

    @staticmethod
    def initial_state(features: Sequence[torch.Tensor]) -> FeatureList:
        return [torch.zeros_like(f) for f in features]

    def step(self, hidden: Sequence[torch.Tensor], features: Sequence[torch.Tensor]) -> FeatureList:
        if len(hidden) != len(self.grus) or len(features) != len(self.grus):
            raise ValueError("エラー: スケール数がConvGRUの数と一致しません")
        return [gru(f, h) for gru, f, h in zip(self.grus, features, hidden)]

    def fold(self, sequence: Sequence[Sequence[torch.Tensor]], hidden: Sequence[torch.Tensor]) -> FeatureList:
        hidden = list(hidden)
        for features in sequence:
            hidden = self.step(hidden, features)
        return hidden

    def emit(self, hidden: Sequence[torch.Tensor]):
        return self.heads(list(hidden))


def warm_start(decoder: RecurrentDecoder, sequence: Sequence[Sequence[torch.Tensor]],
               cycles: int) -> FeatureList:
    """1つの再帰デコーダについて入力列を cycles 回巡回し、初期隠れ状態を作る（勾配は記録しない）

    両デコーダ分をまとめた RecurrentState は warm_start_state で得る。

    Args:
        decoder: 再帰デコーダ
        sequence: フレームごとのデコーダ特徴
        cycles: 巡回回数（0なら零状態）

    Returns:
        スケールごとの隠れ状態
    """
    if cycles < 0:
        raise ValueError(f"エラー: 巡回回数は0以上である必要があります: {cycles}")
    if not sequence:
        raise ValueError("エラー: 初期状態を作るには1フレーム以上が必要です")
    with torch.no_grad():
        hidden = decoder.initial_state(sequence[0])
        for _ in range(cycles):
            hidden = decoder.fold(sequence, hidden)
    return [h.detach() for h in hidden]


def warm_start_state(rec_tex: RecurrentDecoder, rec_tri: RecurrentDecoder,
                     tex_sequence: Sequence[Sequence[torch.Tensor]], tri_sequence: Sequence[Sequence[torch.Tensor]],
                     cycles: int) -> RecurrentState:
    """E_tex_rec・E_tri_rec の両方を巡回して教師ありパスの初期状態 h0 を作る

    巡回は初期化なのでフレーム数 t は0のまま。
    """
    return RecurrentState(warm_start(rec_tex, tex_sequence, cycles), warm_start(rec_tri, tri_sequence, cycles), 0)


def fusion_windows(num_frames: int, window: int) -> List[List[int]]:
    """固定窓に割り当てるフレーム番号

    N ≤ W なら与えられたフレームを巡回して1窓を埋める。N > W なら先頭から
    W枚ずつ区切り、端数の窓はその窓のフレームを巡回して埋める。
    """
    if num_frames < 1:
        raise ValueError("エラー: フレームが1枚もありません")
    if window < 1:
        raise ValueError(f"エラー: 窓幅は1以上である必要があります: {window}")
    if num_frames <= window:
        return [[i % num_frames for i in range(window)]]
    windows = []
    for start in range(0, num_frames, window):
        chunk = list(range(start, min(start + window, num_frames)))
        windows.append([chunk[i % len(chunk)] for i in range(window)])
    return windows


class ConvFusion(nn.Module):
    """GRUを畳み込みブロックに置き換えた固定窓の融合デコーダ

    融合畳み込みは窓内特徴の平均で初期化する。
    """

    def __init__(self, encoder: RefinementEncoder, window: int, kernel_size: int = 3):
        super().__init__()
        if window < 1:
            raise ValueError(f"エラー: 窓幅は1以上である必要があります: {window}")
        self.window = window
        self.decoder = copy.deepcopy(encoder.decoder)
        self.heads = copy.deepcopy(encoder.heads)
        self.fuse = nn.ModuleList()
        for c in self.decoder.channels:
            conv = nn.Conv2d(window * c, c, kernel_size, 1, kernel_size // 2)
            with torch.no_grad():
                conv.weight.zero_()
                conv.bias.zero_()
                eye = torch.eye(c) / window
                for k in range(window):
                    conv.weight[:, k * c:(k + 1) * c, kernel_size // 2, kernel_size // 2] = eye
            self.fuse.append(conv)

    def frame_features(self, backbone_features: Sequence[torch.Tensor]) -> FeatureList:
        return self.decoder(backbone_features)

    def fuse_window(self, frames: Sequence[Sequence[torch.Tensor]]) -> FeatureList:
        """ちょうどW枚分のデコーダ特徴を融合"""
        if len(frames) != self.window:
            raise ValueError(f"エラー: 窓には {self.window} 枚が必要です: {len(frames)}")
        return [conv(torch.cat([f[s] for f in frames], dim=1)) for s, conv in enumerate(self.fuse)]

    def emit_window(self, frames: Sequence[Sequence[torch.Tensor]]):
        return self.heads(bounded(self.fuse_window(frames)))
