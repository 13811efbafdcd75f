"""
学習モジュール

合成データ・代理ネットワーク・損失・識別器と、ステージ単位の学習ループ
"""
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
    texture_distance,
)
from .proxies import ProxyNetwork
from .synthetic import (
    SyntheticFrame,
    SyntheticSample,
    gaussian_blur,
    landmark_maps,
    procedural_real_batch,
    sample_camera,
    sample_latent,
    sample_synthetic_identity,
    stack_observations,
)
from .trainer import (
    LOSS_LOG,
    S2_VARIANTS,
    S3_VARIANTS,
    STAGES,
    LossLogger,
    Trainer,
    World,
    build_world,
    checkpoint_name,
    gan_prior_step,
    load_stage,
    run_stage,
)

__all__ = [
    "ImageDiscriminator",
    "LatentDiscriminator",
    "LossReport",
    "StageTargets",
    "density_regularization",
    "dual_disc_loss",
    "dual_inputs",
    "latent_adv",
    "loss_stage1",
    "loss_stage2",
    "nonsaturating_d_loss",
    "nonsaturating_g_loss",
    "r1_penalty",
    "texture_distance",
    "ProxyNetwork",
    "SyntheticFrame",
    "SyntheticSample",
    "gaussian_blur",
    "landmark_maps",
    "procedural_real_batch",
    "sample_camera",
    "sample_latent",
    "sample_synthetic_identity",
    "stack_observations",
    "LOSS_LOG",
    "S2_VARIANTS",
    "S3_VARIANTS",
    "STAGES",
    "LossLogger",
    "Trainer",
    "World",
    "build_world",
    "checkpoint_name",
    "gan_prior_step",
    "load_stage",
    "run_stage",
]
