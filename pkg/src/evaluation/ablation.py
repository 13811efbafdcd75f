"""評価プロトコル

学習に使っていないシードの合成人物を固定の評価セットとし、
各動画の先頭 source_pool フレームから等間隔にソースを選び、
末尾 eval_frames フレームで自己再演の誤差を測る。
"""
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from ..facemodel.toy_head import FaceParams
from ..generator.avatar_gan import AvatarGenerator
from ..pipeline.inversion import Avatar, AvatarInverter, FrameObservation
from ..training.proxies import ProxyNetwork
from ..training.synthetic import SyntheticSample, sample_synthetic_identity
from ..training.trainer import load_stage
from ..utils.config import Config
from ..utils.errors import PrerequisiteError
from .baselines import AGGREGATORS, aggregate
from .metrics import (
    METRIC_COLUMNS, MetricsReport, compute_metrics, keypoint_distance, landmark_points, track_keypoints,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ABLATION_ROWS = ("full", "wo_nt_enc", "wo_both_enc", "tri_offsets")
# 行 → (ステージ, バリアント)
ABLATION_CHECKPOINTS = {
    "full": ("s2", "full"),
    "wo_nt_enc": ("s2", "wo_nt_enc"),
    "wo_both_enc": ("s1", "full"),
    "tri_offsets": ("s2", "tri_offsets"),
}
SUMMARY_COLUMNS = METRIC_COLUMNS + ["fid"]


@dataclass
class EvalSet:
    """評価用の合成人物とフレームの割り当て"""

    samples: List[SyntheticSample]
    source_pool: int
    eval_frames: int

    @classmethod
    def build(cls, generator: AvatarGenerator, config: Config, progress: bool = False) -> "EvalSet":
        """シード config.seed + seed_offset + i の人物で評価セットを作る"""
        ev = config.evaluation
        if ev.source_pool + ev.eval_frames > ev.sequence_length:
            raise ValueError(
                f"エラー: source_pool ({ev.source_pool}) + eval_frames ({ev.eval_frames}) が "
                f"系列長 ({ev.sequence_length}) を超えています"
            )
        seeds = [config.seed + ev.seed_offset + i for i in range(ev.num_identities)]
        samples = [sample_synthetic_identity(generator, config, s, ev.sequence_length)
                   for s in tqdm(seeds, desc="評価セット", disable=not progress)]
        return cls(samples, ev.source_pool, ev.eval_frames)

    def __len__(self) -> int:
        return len(self.samples)

    def source_indices(self, count: int) -> List[int]:
        """ソース候補から等間隔に count 枚（0番から。候補数を超えると重複する）"""
        if count < 1:
            raise ValueError(f"エラー: ソースフレーム数は1以上である必要があります: {count}")
        return [int(k * self.source_pool / count) for k in range(count)]

    def eval_indices(self, sample: SyntheticSample) -> List[int]:
        return list(range(len(sample) - self.eval_frames, len(sample)))

    def sources(self, sample: SyntheticSample, count: int) -> List[FrameObservation]:
        return [sample.observation(i) for i in self.source_indices(count)]


@torch.no_grad()
def render_frames(inverter: AvatarInverter, avatar: Avatar, params: Sequence[FaceParams], cameras) -> torch.Tensor:
    """アバターを係数・カメラ列で1枚ずつ描画 (N×3×R×R)"""
    return torch.cat([inverter.animate(avatar, [p], [c]).rgb for p, c in zip(params, cameras)])


@torch.no_grad()
def _reenact(inverter: AvatarInverter, avatar: Avatar, sample: SyntheticSample, indices: Sequence[int]):
    frames = [sample.frames[i] for i in indices]
    params = [f.params for f in frames]
    cameras = [f.camera for f in frames]
    pred = render_frames(inverter, avatar, params, cameras)
    target = torch.stack([f.image for f in frames])
    points = landmark_points(inverter.generator.face_model, params, cameras, pred.shape[-1])
    return pred, target, points


@torch.no_grad()
def self_reenactment(inverter: AvatarInverter, avatar: Avatar, sample: SyntheticSample,
                     indices: Sequence[int], proxies: ProxyNetwork) -> MetricsReport:
    """同じ人物の評価フレームを描画して正解と比較"""
    pred, target, points = _reenact(inverter, avatar, sample, indices)
    tracked = track_keypoints(pred, target, points)
    return compute_metrics(pred, target, proxies, landmarks=(tracked, points), with_fid=False)


@torch.no_grad()
def evaluate_inverter(inverter: AvatarInverter, proxies: ProxyNetwork, eval_set: EvalSet,
                      invert, progress: bool = False) -> Dict[str, float]:
    """評価セット全体の集計指標

    Args:
        inverter: 反転器
        proxies: 代理ネットワーク
        eval_set: 評価セット
        invert: (反転器, 人物) → Avatar

    Returns:
        指標名 → 平均値（fid は全フレームの埋め込み統計から）
    """
    reports, preds, targets = [], [], []
    for sample in tqdm(eval_set.samples, desc="評価", disable=not progress):
        avatar = invert(inverter, sample)
        pred, target, points = _reenact(inverter, avatar, sample, eval_set.eval_indices(sample))
        tracked = track_keypoints(pred, target, points)
        reports.append(compute_metrics(pred, target, proxies, landmarks=(tracked, points), with_fid=False))
        preds.append(pred)
        targets.append(target)
    merged = MetricsReport.concat(reports)
    pred, target = torch.cat(preds), torch.cat(targets)
    if pred.shape[0] >= 2:
        merged.fid = compute_metrics(pred, target, proxies).fid
    return merged.aggregate


def _coarse_only(inverter: AvatarInverter, sample: SyntheticSample) -> Avatar:
    return inverter.coarse_avatar(inverter.encode_latent(sample.observation(0).image))


def _one_shot(inverter: AvatarInverter, sample: SyntheticSample) -> Avatar:
    return inverter.invert_one_shot(sample.observation(0))


def ablation_suite(config: Config, out_dir: PathLike, eval_set: Optional[EvalSet] = None,
                   progress: bool = False) -> pd.DataFrame:
    """エンコーダ構成のアブレーション（ワンショット、ソースは各人物のフレーム0）

    行: full / wo_nt_enc（E_texに姿勢つき画像を入力）/ wo_both_enc（粗い段のみ）/
    tri_offsets（E_triが三平面オフセットを直接予測）

    Args:
        config: 全体設定
        out_dir: チェックポイントのディレクトリ
        eval_set: 評価セット（Noneなら設定から作る）

    Returns:
        variant を索引、指標を列とするDataFrame
    """
    loaded = {}
    for row in ABLATION_ROWS:
        stage, variant = ABLATION_CHECKPOINTS[row]
        try:
            loaded[row] = load_stage(config, out_dir, stage, variant)
        except PrerequisiteError as e:
            raise PrerequisiteError(f"エラー: アブレーション行 '{row}' のチェックポイントがありません ({e})") from e

    if eval_set is None:
        eval_set = EvalSet.build(loaded["wo_both_enc"][0].generator, config, progress)

    rows = []
    for row in ABLATION_ROWS:
        inverter, proxies, _ = loaded[row]
        inverter.eval()
        invert = _coarse_only if row == "wo_both_enc" else _one_shot
        metrics = evaluate_inverter(inverter, proxies, eval_set, invert, progress)
        rows.append({"variant": row, **metrics})
        logger.info(f"アブレーション {row}: l1={metrics['l1']:.4f} psnr={metrics['psnr']:.2f}")
    return pd.DataFrame(rows, columns=["variant"] + SUMMARY_COLUMNS).set_index("variant")


def _load_sweep_inverters(config: Config, out_dir: PathLike) -> Dict[str, Tuple[AvatarInverter, ProxyNetwork]]:
    inverter, proxies, _ = load_stage(config, out_dir, "s3", "full")
    inverters = {"recurrent": (inverter, proxies), "average": (inverter, proxies)}
    try:
        fusion, fusion_proxies, _ = load_stage(config, out_dir, "s3", "convfusion")
        inverters["convfusion"] = (fusion, fusion_proxies)
    except PrerequisiteError:
        logger.warning("ConvFusionのチェックポイントが無いため、sweepから除外します")
    return inverters


def frame_count_sweep(config: Config, out_dir: PathLike, frame_counts: Optional[Sequence[int]] = None,
                      methods: Sequence[str] = tuple(AGGREGATORS), eval_set: Optional[EvalSet] = None,
                      progress: bool = False) -> pd.DataFrame:
    """ソースフレーム数に対する誤差の推移

    Args:
        config: 全体設定
        out_dir: チェックポイントのディレクトリ
        frame_counts: ソースフレーム数の列（Noneなら設定値）
        methods: 集約方式
        eval_set: 評価セット

    Returns:
        列 method, frames, 指標, update_ms（1フレームあたりの更新時間）のDataFrame
    """
    counts = list(frame_counts or config.evaluation.frame_counts)
    inverters = _load_sweep_inverters(config, out_dir)
    if eval_set is None:
        eval_set = EvalSet.build(inverters["recurrent"][0].generator, config, progress)

    rows = []
    for method in methods:
        if method not in inverters:
            continue
        inverter, proxies = inverters[method]
        inverter.eval()
        for count in counts:
            elapsed = []

            def invert(inv: AvatarInverter, sample: SyntheticSample) -> Avatar:
                frames = eval_set.sources(sample, count)
                start = time.perf_counter()
                avatar = aggregate(method, inv, frames)
                elapsed.append((time.perf_counter() - start) * 1000.0 / count)
                return avatar

            metrics = evaluate_inverter(inverter, proxies, eval_set, invert, progress)
            rows.append({"method": method, "frames": count, **metrics, "update_ms": float(np.mean(elapsed))})
            logger.info(f"sweep {method} N={count}: l1={metrics['l1']:.4f}")
    return pd.DataFrame(rows, columns=["method", "frames"] + SUMMARY_COLUMNS + ["update_ms"])


@torch.no_grad()
def cross_reenactment(config: Config, out_dir: PathLike, pairs: Optional[Sequence[Tuple[int, int]]] = None,
                      num_sources: int = 4, eval_set: Optional[EvalSet] = None) -> pd.DataFrame:
    """別人物の表情・カメラでアバターを駆動

    正解画像が無いので、同一性類似度（ソース人物のフレーム0との代理類似度）と
    AKD（ソースの形状＋ドライバーの表情で決まるランドマークと、ドライバーのランドマークの距離）だけを報告する。

    Args:
        config: 全体設定
        out_dir: チェックポイントのディレクトリ
        pairs: (ソース番号, ドライバー番号) の列（Noneなら i → i+1 の巡回）
        num_sources: 逐次反転に使うソースフレーム数
        eval_set: 評価セット

    Returns:
        列 source, driver, csim, akd, akd_norm のDataFrame
    """
    inverter, proxies, _ = load_stage(config, out_dir, "s3", "full")
    inverter.eval()
    if eval_set is None:
        eval_set = EvalSet.build(inverter.generator, config)
    n = len(eval_set)
    if pairs is None:
        pairs = [(i, (i + 1) % n) for i in range(n)] if n > 1 else []

    rows = []
    face_model = inverter.generator.face_model
    for source_id, driver_id in pairs:
        source, driver = eval_set.samples[source_id], eval_set.samples[driver_id]
        avatar = inverter.invert_recurrent(eval_set.sources(source, num_sources))
        driving = [driver.frames[i] for i in eval_set.eval_indices(driver)]
        shape = source.frames[0].params.shape
        params = [FaceParams(shape, f.params.expression) for f in driving]
        cameras = [f.camera for f in driving]
        pred = render_frames(inverter, avatar, params, cameras)
        resolution = pred.shape[-1]
        reference = source.frames[0].image.unsqueeze(0).expand_as(pred)
        csim = float(proxies.similarity(pred, reference).mean())
        pred_points = landmark_points(face_model, params, cameras, resolution)
        driver_points = landmark_points(face_model, [f.params for f in driving], cameras, resolution)
        akd = float(keypoint_distance(pred_points, driver_points).mean())
        rows.append({"source": source_id, "driver": driver_id, "csim": csim,
                     "akd": akd, "akd_norm": akd / (math.sqrt(2.0) * resolution)})
    return pd.DataFrame(rows, columns=["source", "driver", "csim", "akd", "akd_norm"])
