"""テスト共通のフィクスチャ（机上スケールよりさらに小さい設定）"""
import numpy as np
import pytest
import torch

from src.encoder.recurrent import ConvFusion, RecurrentDecoder
from src.facemodel.toy_head import build_toy_model, camera_from_pose
from src.generator.avatar_gan import AvatarGenerator
from src.pipeline.inversion import AvatarInverter
from src.training.proxies import ProxyNetwork
from src.training.synthetic import sample_synthetic_identity
from src.utils.config import Config

TINY = {
    "seed": 3,
    "face_model": {"subdivision": 2},
    "generator": {
        "z_dim": 16, "style_dim": 16, "num_ws": 6, "mapping_layers": 2,
        "texture_resolutions": [4, 8, 16], "texture_channels": [8, 8, 8],
        "static_channels": [16, 16, 16], "plane_channels": 8, "plane_resolution": 16,
        "raw_channels": 8, "render_resolution": 16, "samples_per_ray": 8, "decoder_hidden": 16,
    },
    "rasterizer": {"uv_resolution": 16},
    "encoders": {"widths": [8, 16, 16], "latent_widths": [8, 16, 16], "fusion_window": 2},
    "training": {
        "num_identities": 2,
        "frames_per_identity": 4,
        "log_every": 1,
        "prior": {"steps": 2, "batch_size": 2, "low_resolution": 8, "density_points": 64},
        "stage1": {"steps": 2, "batch_size": 2},
        "stage2": {"steps": 2, "batch_size": 2, "adversarial_start": 0.5},
        "stage3": {"steps": 2, "batch_size": 1, "max_sequence": 3, "rendered_frames": 2,
                   "adversarial_start": 0.5},
    },
    "evaluation": {"num_identities": 2, "sequence_length": 6, "source_pool": 4, "eval_frames": 2,
                   "frame_counts": [1, 2]},
}


@pytest.fixture
def tiny_config() -> Config:
    return Config.from_dict(TINY)


@pytest.fixture(scope="session")
def face_model():
    return build_toy_model(7, 4, 4, level=2)


@pytest.fixture
def generator(tiny_config, face_model) -> AvatarGenerator:
    torch.manual_seed(0)
    return AvatarGenerator(tiny_config.generator, face_model).eval()


@pytest.fixture
def inverter(tiny_config, generator) -> AvatarInverter:
    torch.manual_seed(1)
    return AvatarInverter.from_config(tiny_config, generator).eval()


@pytest.fixture
def perturbed_heads(inverter, tiny_config) -> AvatarInverter:
    """ヘッドに乱数を加え、再帰・融合デコーダをそのヘッドから作り直した反転器"""
    gen = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for encoder in (inverter.e_tex, inverter.e_tri):
            for param in encoder.heads.parameters():
                param.add_(0.05 * torch.randn(param.shape, generator=gen))
    e = tiny_config.encoders
    inverter.rec_tex = RecurrentDecoder(inverter.e_tex, e.gru_kernel)
    inverter.rec_tri = RecurrentDecoder(inverter.e_tri, e.gru_kernel)
    inverter.fusion_tex = ConvFusion(inverter.e_tex, e.fusion_window)
    inverter.fusion_tri = ConvFusion(inverter.e_tri, e.fusion_window)
    return inverter.eval()


@pytest.fixture
def proxies() -> ProxyNetwork:
    return ProxyNetwork(seed=4)


@pytest.fixture
def sample(tiny_config, generator):
    """4フレームの合成人物"""
    return sample_synthetic_identity(generator, tiny_config, 11, 4)


@pytest.fixture
def front_camera():
    return camera_from_pose(0.0, 0.0, 2.7, resolution=16)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """全ステージを数ステップずつ学習した出力ディレクトリ（設定, パス）"""
    from src.training.trainer import run_stage

    config = Config.from_dict(TINY)
    out_dir = tmp_path_factory.mktemp("run")
    for stage in ("prior", "s1"):
        run_stage(config, stage, out_dir, progress=False)
    for variant in ("full", "wo_nt_enc", "tri_offsets"):
        run_stage(config, "s2", out_dir, variant, progress=False)
    for variant in ("full", "convfusion"):
        run_stage(config, "s3", out_dir, variant, progress=False)
    return config, out_dir
