"""3段階の学習スケジュール（と事前分布GANの小規模学習）

  prior: 事前分布ジェネレータを手続き的な実画像で敵対的に学習
  s1:    E_latent のみ学習（ジェネレータは凍結）
  s2:    E_tex + E_tri を学習（E_latent も凍結）
  s3:    再帰デコーダ（または固定窓のConvFusion）のみ学習

各ステージはチェックポイントと損失ログ（CSV）を出力する。
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from ..encoder.recurrent import ConvFusion, RecurrentDecoder, fusion_windows, warm_start_state
from ..facemodel.toy_head import ToyFaceModel, build_toy_model
from ..generator.avatar_gan import AvatarGenerator
from ..generator.types import LatentCode, NeuralTexture, TriPlane
from ..pipeline.inversion import AvatarInverter, FrameObservation
from ..utils.checkpoint import load_checkpoint, restore_blocks, save_checkpoint
from ..utils.config import Config, PriorConfig
from ..utils.errors import PrerequisiteError
from .discriminators import ImageDiscriminator, LatentDiscriminator
from .losses import (
    LossReport,
    StageTargets,
    density_regularization,
    dual_disc_loss,
    dual_inputs,
    latent_adv,
    loss_stage1,
    loss_stage2,
    nonsaturating_d_loss,
    nonsaturating_g_loss,
    r1_penalty,
)
from .proxies import ProxyNetwork
from .synthetic import (
    SyntheticSample,
    gaussian_blur,
    landmark_maps,
    procedural_real_batch,
    sample_camera,
    sample_synthetic_identity,
    stack_observations,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

STAGES = ("prior", "s1", "s2", "s3")
# バリアント名 → (E_texの入力領域, E_triの出力)
S2_VARIANTS = {"full": ("uv", "sft"), "wo_nt_enc": ("image", "sft"), "tri_offsets": ("uv", "offset")}
S3_VARIANTS = ("full", "convfusion")
PREREQUISITES = {"prior": None, "s1": "prior", "s2": "s1", "s3": "s2"}
LOSS_LOG = "losses.csv"


def checkpoint_name(stage: str, variant: str = "full") -> str:
    return f"{stage}.pt" if variant == "full" else f"{stage}_{variant}.pt"


class LossLogger:
    """損失の追記専用ログ（列: step, stage, term, value）"""

    COLUMNS = ["step", "stage", "term", "value"]

    def __init__(self, path: PathLike):
        self.path = Path(path)

    def append(self, step: int, stage: str, report: LossReport) -> None:
        rows = [{"step": step, "stage": stage, "term": term, "value": value}
                for term, value in report.as_floats().items()]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=self.COLUMNS).to_csv(
            self.path, mode="a", header=not self.path.exists(), index=False
        )

    def read(self) -> pd.DataFrame:
        if not self.path.exists():
            return pd.DataFrame(columns=self.COLUMNS)
        return pd.read_csv(self.path)


@dataclass
class World:
    """トイ顔モデル・事前分布ジェネレータ・代理ネットワークの組"""

    face_model: ToyFaceModel
    generator: AvatarGenerator
    proxies: ProxyNetwork


def build_world(config: Config) -> World:
    """設定とシードから初期状態のモデル一式を構築"""
    torch.manual_seed(config.seed)
    fm = config.face_model
    face_model = build_toy_model(fm.seed, fm.num_shape, fm.num_expression, level=fm.subdivision)
    generator = AvatarGenerator(config.generator, face_model)
    return World(face_model, generator, ProxyNetwork(seed=config.seed + 1))


def inverter_blocks(inverter: AvatarInverter) -> Dict[str, nn.Module]:
    return {
        "generator": inverter.generator,
        "e_latent": inverter.e_latent,
        "e_tex": inverter.e_tex,
        "e_tri": inverter.e_tri,
        "rec_tex": inverter.rec_tex,
        "rec_tri": inverter.rec_tri,
        "fusion_tex": inverter.fusion_tex,
        "fusion_tri": inverter.fusion_tri,
    }


def load_stage(config: Config, out_dir: PathLike, stage: str, variant: str = "full"
               ) -> Tuple[AvatarInverter, ProxyNetwork, Dict]:
    """ステージのチェックポイントから反転器を復元

    Args:
        config: 全体設定（構造はチェックポイントの形状表で検証）
        out_dir: チェックポイントのディレクトリ
        stage: ステージ名
        variant: バリアント名

    Returns:
        (反転器, 代理ネットワーク, コンテナ)
    """
    path = Path(out_dir) / checkpoint_name(stage, variant)
    if not path.exists():
        raise PrerequisiteError(f"エラー: ステージ '{stage}' ({variant}) のチェックポイントがありません: {path}")
    container = load_checkpoint(path)
    face_model = ToyFaceModel.from_dict(container["face_model"])
    generator = AvatarGenerator(config.generator, face_model)
    restore_blocks(container, {"generator": generator})
    meta = container.get("meta", {})
    inverter = AvatarInverter.from_config(config, generator, meta.get("texture_domain", "uv"),
                                          meta.get("triplane_mode", "sft"))
    blocks = {name: module for name, module in inverter_blocks(inverter).items()
              if name != "generator" and name in container["blocks"]}
    restore_blocks(container, blocks)
    proxies = ProxyNetwork(seed=config.seed + 1)
    if container.get("proxies") is not None:
        proxies.load_state_dict(container["proxies"])
    return inverter, proxies, container


class ObservationCache:
    """ステージ3用: 人物ごとに最初のフレームの ŵ で観測した結果と凍結バックボーン特徴を保持"""

    def __init__(self, inverter: AvatarInverter, pool: Sequence[SyntheticSample]):
        self.inverter = inverter
        self.pool = pool
        self._latents: Dict[int, LatentCode] = {}
        self._coarse: Dict[int, object] = {}
        self._entries: Dict[Tuple[int, int], Tuple[FrameObservation, List[torch.Tensor], List[torch.Tensor]]] = {}

    @torch.no_grad()
    def latent(self, identity: int) -> LatentCode:
        if identity not in self._latents:
            first = self.pool[identity].observation(0)
            latent = self.inverter.encode_latent(first.image)
            self._latents[identity] = latent
            self._coarse[identity] = self.inverter.coarse_avatar(latent).detach()
        return self._latents[identity]

    @torch.no_grad()
    def get(self, identity: int, frame: int):
        key = (identity, frame)
        if key not in self._entries:
            self.latent(identity)
            obs = self.inverter.observe(self.pool[identity].observation(frame), self._coarse[identity])
            tex, tri = self.inverter.backbone_features(obs)
            self._entries[key] = (obs, tex, tri)
        return self._entries[key]


def _stack_features(features: Sequence[Sequence[torch.Tensor]]) -> List[torch.Tensor]:
    return [torch.cat(group) for group in zip(*features)]


def gan_prior_step(
    generator: AvatarGenerator,
    discriminator: ImageDiscriminator,
    optimizers: Tuple[torch.optim.Optimizer, torch.optim.Optimizer],
    real: torch.Tensor,
    real_maps: torch.Tensor,
    fake_params,
    fake_cameras,
    z: torch.Tensor,
    config: PriorConfig,
    resolution: int,
    blur_sigma: float = 0.0,
    rng: Optional[torch.Generator] = None,
) -> LossReport:
    """事前分布GANの1ステップ（識別器 → ジェネレータの順に更新）

    識別器は非飽和損失 + 実画像でのR1、ジェネレータは非飽和損失 + 密度正則化。
    識別器にはランドマーク輪郭マップを条件として与える。

    Returns:
        ジェネレータ側の損失（識別器側の adv_d, r1 は記録用の項）
    """
    opt_g, opt_d = optimizers
    face_model = generator.face_model
    fake_maps = landmark_maps(face_model, fake_params, fake_cameras, resolution)
    real = gaussian_blur(real, blur_sigma)

    bundle = generator.synthesize_bundle(generator.latent_from_z(z), fake_params, fake_cameras,
                                         resolution=resolution)
    fake = gaussian_blur(bundle.render.rgb, blur_sigma)

    d_adv = nonsaturating_d_loss(discriminator(real, real_maps), discriminator(fake.detach(), fake_maps))
    r1 = r1_penalty(lambda x: discriminator(x, real_maps), real, config.r1_gamma)
    opt_d.zero_grad(set_to_none=True)
    (d_adv + r1).backward()
    opt_d.step()

    g_adv = nonsaturating_g_loss(discriminator(fake, fake_maps))
    density = density_regularization(generator.decoder, bundle.triplane.planes, generator.config.box_extent,
                                     config.density_points, config.density_std, rng)
    report = LossReport.weighted({"adv_g": g_adv, "density": density},
                                 {"adv_g": 1.0, "density": config.density_reg},
                                 monitors={"adv_d": d_adv.detach(), "r1": r1.detach()})
    opt_g.zero_grad(set_to_none=True)
    report.total.backward()
    opt_g.step()
    return report


class Trainer:
    """ステージ単位の学習を実行する"""

    def __init__(self, config: Config, out_dir: PathLike, progress: bool = True):
        self.config = config
        self.out_dir = Path(out_dir)
        self.progress = progress
        self.loss_log = LossLogger(self.out_dir / LOSS_LOG)
        self._pool: Optional[List[SyntheticSample]] = None

    # ------------------------------------------------------------------
    def run(self, stage: str, variant: str = "full") -> Path:
        """ステージを実行してチェックポイントのパスを返す"""
        if stage not in STAGES:
            raise ValueError(f"エラー: 未知のステージです: {stage}")
        if stage == "s2" and variant not in S2_VARIANTS:
            raise ValueError(f"エラー: s2 のバリアントは {sorted(S2_VARIANTS)} のいずれかです: {variant}")
        if stage == "s3" and variant not in S3_VARIANTS:
            raise ValueError(f"エラー: s3 のバリアントは {list(S3_VARIANTS)} のいずれかです: {variant}")
        if stage in ("prior", "s1") and variant != "full":
            raise ValueError(f"エラー: {stage} にはバリアントがありません: {variant}")

        prerequisite = PREREQUISITES[stage]
        if prerequisite is not None and not (self.out_dir / checkpoint_name(prerequisite)).exists():
            raise PrerequisiteError(
                f"エラー: ステージ '{stage}' の前に '{prerequisite}' を実行してください "
                f"({self.out_dir / checkpoint_name(prerequisite)} がありません)"
            )
        torch.manual_seed(self.config.seed)
        logger.info(f"ステージ {stage} ({variant}) の学習を開始します")
        runner = {"prior": self._run_prior, "s1": self._run_stage1,
                  "s2": self._run_stage2, "s3": self._run_stage3}[stage]
        return runner(variant)

    def _steps(self, steps: int, desc: str):
        return tqdm(range(steps), desc=desc, disable=not self.progress)

    def _log(self, step: int, steps: int, stage: str, report: LossReport) -> None:
        if step % self.config.training.log_every == 0 or step == steps - 1:
            self.loss_log.append(step, stage, report)

    def _save(self, inverter: AvatarInverter, proxies: ProxyNetwork, stage: str, variant: str,
              extra_blocks: Dict[str, nn.Module]) -> Path:
        blocks = inverter_blocks(inverter)
        blocks.update(extra_blocks)
        meta = {"stage": stage, "variant": variant,
                "texture_domain": inverter.e_tex.input_domain, "triplane_mode": inverter.e_tri.mode}
        return save_checkpoint(self.out_dir / checkpoint_name(stage, variant), blocks,
                               inverter.generator.face_model, proxies, self.config, meta)

    def training_pool(self, generator: AvatarGenerator) -> List[SyntheticSample]:
        """学習用の合成人物（シード config.seed + i）"""
        if self._pool is None:
            t = self.config.training
            self._pool = [
                sample_synthetic_identity(generator, self.config, self.config.seed + i, t.frames_per_identity)
                for i in tqdm(range(t.num_identities), desc="合成データ", disable=not self.progress)
            ]
        return self._pool

    def _sample_batch(self, rng: np.random.Generator, pool: Sequence[SyntheticSample], batch: int):
        ids = rng.integers(0, len(pool), size=batch)
        frames = [int(rng.integers(0, len(pool[i]))) for i in ids]
        return [int(i) for i in ids], frames

    @staticmethod
    def _targets(pool: Sequence[SyntheticSample], ids: Sequence[int], frames: Sequence[int]) -> StageTargets:
        samples = [pool[i] for i in ids]
        chosen = [pool[i].frames[f] for i, f in zip(ids, frames)]
        texture = NeuralTexture([torch.cat(group) for group in zip(*(s.texture.scales for s in samples))])
        return StageTargets(
            torch.stack([f.image for f in chosen]),
            texture,
            TriPlane(torch.cat([f.triplane.planes for f in chosen])),
            torch.stack([f.raw for f in chosen]),
        )

    # ------------------------------------------------------------------
    def _run_prior(self, variant: str) -> Path:
        cfg = self.config
        pc = cfg.training.prior
        world = build_world(cfg)
        generator = world.generator
        discriminator = ImageDiscriminator(3, condition_channels=1)
        opt_g = torch.optim.Adam(generator.parameters(), lr=pc.lr_g, betas=(0.0, 0.99))
        opt_d = torch.optim.Adam(discriminator.parameters(), lr=pc.lr_d, betas=(0.0, 0.99))
        rng = np.random.default_rng(cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed)

        for step in self._steps(pc.steps, "prior"):
            frac = step / max(1, pc.steps)
            resolution = pc.low_resolution if frac < pc.step_up_fraction else cfg.generator.render_resolution
            sigma = pc.blur_sigma * max(0.0, 1.0 - frac / pc.blur_fraction) if pc.blur_fraction > 0 else 0.0
            real, real_maps, _, _ = procedural_real_batch(world.face_model, cfg, rng, pc.batch_size, resolution)
            params = [world.face_model.sample_params(rng) for _ in range(pc.batch_size)]
            cameras = [sample_camera(rng, cfg.camera, resolution) for _ in range(pc.batch_size)]
            z = torch.randn(pc.batch_size, cfg.generator.z_dim, generator=gen)
            report = gan_prior_step(generator, discriminator, (opt_g, opt_d), real, real_maps, params, cameras,
                                    z, pc, resolution, sigma, gen)
            self._log(step, pc.steps, "prior", report)

        inverter = AvatarInverter.from_config(cfg, generator)
        return self._save(inverter, world.proxies, "prior", variant, {"discriminator": discriminator})

    def _run_stage1(self, variant: str) -> Path:
        cfg = self.config
        sc = cfg.training.stage1
        inverter, proxies, _ = load_stage(cfg, self.out_dir, "prior")
        generator = inverter.generator
        generator.requires_grad_(False)
        pool = self.training_pool(generator)
        latent_disc = LatentDiscriminator(cfg.generator.style_dim)
        opt = torch.optim.Adam(inverter.e_latent.parameters(), lr=sc.lr)
        opt_d = torch.optim.Adam(latent_disc.parameters(), lr=sc.lr_d, betas=(0.0, 0.99))
        rng = np.random.default_rng(cfg.seed + 1)
        gen = torch.Generator().manual_seed(cfg.seed + 1)

        for step in self._steps(sc.steps, "s1"):
            ids, frames = self._sample_batch(rng, pool, sc.batch_size)
            obs = stack_observations([pool[i].observation(f) for i, f in zip(ids, frames)])
            w_hat = inverter.encode_latent(obs.image)
            pred = generator.synthesize(w_hat, obs.params, obs.cameras).rgb
            z = torch.randn(sc.batch_size, cfg.generator.z_dim, generator=gen)
            with torch.no_grad():
                real_w = generator.latent_from_z(z).wplus
            d_loss, g_loss = latent_adv(latent_disc, real_w, w_hat.wplus)
            report = loss_stage1(pred, obs.image, proxies, sc, adv=g_loss)
            report.terms["adv_d"] = d_loss.detach()

            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()
            self._log(step, sc.steps, "s1", report)

        return self._save(inverter, proxies, "s1", variant, {"latent_disc": latent_disc})

    def _run_stage2(self, variant: str) -> Path:
        cfg = self.config
        sc = cfg.training.stage2
        base, proxies, _ = load_stage(cfg, self.out_dir, "s1")
        domain, mode = S2_VARIANTS[variant]
        inverter = AvatarInverter.from_config(cfg, base.generator, domain, mode)
        inverter.e_latent.load_state_dict(base.e_latent.state_dict())
        inverter.generator.requires_grad_(False)
        inverter.e_latent.requires_grad_(False)
        pool = self.training_pool(inverter.generator)
        dual_disc = ImageDiscriminator(6)
        trainable = list(inverter.e_tex.parameters()) + list(inverter.e_tri.parameters())
        opt = torch.optim.Adam(trainable, lr=sc.lr)
        opt_d = torch.optim.Adam(dual_disc.parameters(), lr=sc.lr_d, betas=(0.0, 0.99))
        rng = np.random.default_rng(cfg.seed + 2)
        adversarial_from = int(sc.adversarial_start * sc.steps)

        for step in self._steps(sc.steps, f"s2/{variant}"):
            ids, frames = self._sample_batch(rng, pool, sc.batch_size)
            obs = stack_observations([pool[i].observation(f) for i, f in zip(ids, frames)])
            with torch.no_grad():
                coarse = inverter.coarse_avatar(inverter.encode_latent(obs.image))
            obs = inverter.observe(obs, coarse)
            offsets, sft = inverter.refine(obs)
            avatar = inverter.assemble(coarse.latent, coarse.texture, offsets, sft)
            bundle = inverter.render_avatar(avatar, obs.params, obs.cameras)
            pred = StageTargets(bundle.render.rgb, avatar.texture, bundle.triplane, bundle.render.raw)
            target = self._targets(pool, ids, frames)

            adv = d_loss = None
            if step >= adversarial_from:
                d_loss, adv = dual_disc_loss(dual_disc, dual_inputs(target.raw, target.image),
                                             dual_inputs(pred.raw, pred.image))
            report = loss_stage2(pred, target, proxies, sc, adv=adv)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            if d_loss is not None:
                report.terms["adv_d"] = d_loss.detach()
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
            self._log(step, sc.steps, f"s2/{variant}", report)

        return self._save(inverter, proxies, "s2", variant, {"dual_disc": dual_disc})

    def _run_stage3(self, variant: str) -> Path:
        cfg = self.config
        sc = cfg.training.stage3
        weights = cfg.training.stage2
        inverter, proxies, container = load_stage(cfg, self.out_dir, "s2")
        # 再帰デコーダは学習済みワンショットエンコーダのデコーダとヘッドから始める
        inverter.rec_tex = RecurrentDecoder(inverter.e_tex, cfg.encoders.gru_kernel)
        inverter.rec_tri = RecurrentDecoder(inverter.e_tri, cfg.encoders.gru_kernel)
        inverter.fusion_tex = ConvFusion(inverter.e_tex, cfg.encoders.fusion_window)
        inverter.fusion_tri = ConvFusion(inverter.e_tri, cfg.encoders.fusion_window)
        inverter.requires_grad_(False)
        heads: Tuple[nn.Module, nn.Module] = (
            (inverter.rec_tex, inverter.rec_tri) if variant == "full" else (inverter.fusion_tex, inverter.fusion_tri)
        )
        for module in heads:
            module.requires_grad_(True)

        pool = self.training_pool(inverter.generator)
        cache = ObservationCache(inverter, pool)
        dual_disc = ImageDiscriminator(6)
        if "dual_disc" in container["blocks"]:
            restore_blocks(container, {"dual_disc": dual_disc})
        opt = torch.optim.Adam([p for m in heads for p in m.parameters()], lr=sc.lr)
        opt_d = torch.optim.Adam(dual_disc.parameters(), lr=sc.lr_d, betas=(0.0, 0.99))
        rng = np.random.default_rng(cfg.seed + 3)
        adversarial_from = int(sc.adversarial_start * sc.steps)
        window = cfg.encoders.fusion_window

        for step in self._steps(sc.steps, f"s3/{variant}"):
            ids = [int(i) for i in rng.integers(0, len(pool), size=sc.batch_size)]
            num_frames = min(len(pool[i]) for i in ids)
            limit = min(sc.max_sequence, num_frames) if variant == "full" else min(window, num_frames)
            length = int(rng.integers(1, limit + 1))
            # 先頭は必ずフレーム0（ŵ を決めるフレーム）
            order = [0] + [int(f) for f in rng.permutation(np.arange(1, num_frames))[:length - 1]]

            entries = [[cache.get(i, f) for i in ids] for f in order]
            tex_backbone = [_stack_features([e[1] for e in row]) for row in entries]
            tri_backbone = [_stack_features([e[2] for e in row]) for row in entries]

            if variant == "full":
                tex_seq = [inverter.rec_tex.frame_features(b) for b in tex_backbone]
                tri_seq = [inverter.rec_tri.frame_features(b) for b in tri_backbone]
                h0 = warm_start_state(inverter.rec_tex, inverter.rec_tri, tex_seq, tri_seq, sc.warm_cycles)
                h_tex = inverter.rec_tex.fold(tex_seq, h0.tex)
                h_tri = inverter.rec_tri.fold(tri_seq, h0.tri)
                offsets, sft = inverter.rec_tex.emit(h_tex), inverter.rec_tri.emit(h_tri)
            else:
                picks = fusion_windows(len(order), window)[0]
                offsets = inverter.fusion_tex.emit_window(
                    [inverter.fusion_tex.frame_features(tex_backbone[k]) for k in picks])
                sft = inverter.fusion_tri.emit_window(
                    [inverter.fusion_tri.frame_features(tri_backbone[k]) for k in picks])

            latent = LatentCode(torch.cat([cache.latent(i).wplus for i in ids]))
            with torch.no_grad():
                coarse = inverter.coarse_avatar(latent)
            avatar = inverter.assemble(latent, coarse.texture, offsets, sft)

            rendered = rng.permutation(len(order))[:sc.rendered_frames]
            preds, targets = [], []
            for k in rendered:
                frames = [order[k]] * len(ids)
                obs = stack_observations([entries[k][j][0] for j in range(len(ids))])
                bundle = inverter.render_avatar(avatar, obs.params, obs.cameras)
                preds.append(StageTargets(bundle.render.rgb, avatar.texture, bundle.triplane, bundle.render.raw))
                targets.append(self._targets(pool, ids, frames))
            pred = _concat_targets(preds)
            target = _concat_targets(targets)

            adv = d_loss = None
            if step >= adversarial_from:
                d_loss, adv = dual_disc_loss(dual_disc, dual_inputs(target.raw, target.image),
                                             dual_inputs(pred.raw, pred.image))
            report = loss_stage2(pred, target, proxies, weights, adv=adv)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            if d_loss is not None:
                report.terms["adv_d"] = d_loss.detach()
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
            self._log(step, sc.steps, f"s3/{variant}", report)

        return self._save(inverter, proxies, "s3", variant, {"dual_disc": dual_disc})


def _concat_targets(items: Sequence[StageTargets]) -> StageTargets:
    return StageTargets(
        torch.cat([t.image for t in items]),
        NeuralTexture([torch.cat(group) for group in zip(*(t.texture.scales for t in items))]),
        TriPlane(torch.cat([t.triplane.planes for t in items])),
        torch.cat([t.raw for t in items]),
    )


def run_stage(config: Config, stage: str, out_dir: PathLike, variant: str = "full",
              progress: bool = True) -> Path:
    """ステージを1つ実行

    Args:
        config: 全体設定
        stage: 'prior' / 's1' / 's2' / 's3'
        out_dir: チェックポイントと損失ログの出力先
        variant: s2 は 'full' / 'wo_nt_enc' / 'tri_offsets'、s3 は 'full' / 'convfusion'
        progress: 進捗バーを表示するか

    Returns:
        保存したチェックポイントのパス
    """
    return Trainer(config, out_dir, progress).run(stage, variant)
