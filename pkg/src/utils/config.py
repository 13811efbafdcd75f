"""YAML設定ファイルの読み込み

設定はセクションごとのdataclassに展開される。未知のキーはタイプミスとみなして
ValueErrorにする。
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml


@dataclass
class FaceModelConfig:
    seed: int = 7
    num_shape: int = 4
    num_expression: int = 4
    subdivision: int = 3


@dataclass
class CameraConfig:
    radius: float = 2.7
    focal_scale: float = 0.9
    yaw_range: Tuple[float, float] = (-0.6, 0.6)
    pitch_range: Tuple[float, float] = (-0.3, 0.3)


@dataclass
class GeneratorConfig:
    z_dim: int = 64
    style_dim: int = 64
    num_ws: int = 6
    mapping_layers: int = 4
    texture_resolutions: Tuple[int, ...] = (8, 16, 32)
    texture_channels: Tuple[int, ...] = (32, 32, 16)
    static_channels: Tuple[int, ...] = (64, 64, 64)
    plane_channels: int = 16
    plane_resolution: int = 32
    raw_channels: int = 16
    render_resolution: int = 32
    samples_per_ray: int = 32
    box_extent: float = 1.2
    decoder_hidden: int = 64
    prior_radius: float = 0.95
    prior_sharpness: float = 10.0


@dataclass
class RasterizerConfig:
    uv_resolution: int = 32
    depth_tolerance: float = 1e-3
    face_chunk: int = 256


@dataclass
class EncoderConfig:
    widths: Tuple[int, ...] = (32, 64, 64)
    latent_widths: Tuple[int, ...] = (32, 64, 128)
    gru_kernel: int = 3
    fusion_window: int = 4


@dataclass
class PriorConfig:
    steps: int = 2000
    batch_size: int = 8
    lr_g: float = 2.5e-3
    lr_d: float = 2e-3
    r1_gamma: float = 1.0
    density_reg: float = 0.25
    density_std: float = 0.004
    density_points: int = 1024
    blur_sigma: float = 2.0
    blur_fraction: float = 0.1
    low_resolution: int = 16
    step_up_fraction: float = 0.5


@dataclass
class Stage1Config:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    lr_d: float = 1e-3
    lambda_lpips: float = 0.5
    lambda_id: float = 0.25
    lambda_adv: float = 1.0


@dataclass
class Stage2Config:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    lr_d: float = 1e-3
    lambda_lpips: float = 1.0
    lambda_tri: float = 0.001
    lambda_tex: float = 0.001
    lambda_raw: float = 1.0
    lambda_adv: float = 0.1
    adversarial_start: float = 0.5


@dataclass
class Stage3Config:
    steps: int = 1000
    batch_size: int = 2
    lr: float = 1e-4
    lr_d: float = 1e-3
    max_sequence: int = 32
    rendered_frames: int = 4
    warm_cycles: int = 1
    adversarial_start: float = 0.5


@dataclass
class TrainingConfig:
    num_identities: int = 64
    frames_per_identity: int = 32
    log_every: int = 10
    prior: PriorConfig = field(default_factory=PriorConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)


@dataclass
class EvaluationConfig:
    num_identities: int = 16
    sequence_length: int = 32
    source_pool: int = 24
    eval_frames: int = 8
    seed_offset: int = 100000
    frame_counts: Tuple[int, ...] = (1, 2, 4, 8, 16, 32)


@dataclass
class Config:
    seed: int = 0
    device: str = "cpu"
    face_model: FaceModelConfig = field(default_factory=FaceModelConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    rasterizer: RasterizerConfig = field(default_factory=RasterizerConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "Config":
        """辞書から設定を構築

        Args:
            data: YAMLから読み込んだ辞書（Noneなら既定値）

        Returns:
            Configオブジェクト
        """
        return _build(cls, data or {}, "config")

    def to_dict(self) -> Dict[str, Any]:
        """チェックポイントに保存するスナップショット"""
        return _plain(dataclasses.asdict(self))

    def with_seed(self, seed: Optional[int]) -> "Config":
        """シードを上書きした設定を返す"""
        if seed is None:
            return self
        return dataclasses.replace(self, seed=int(seed))


def _build(cls, data: Dict[str, Any], section: str):
    if not isinstance(data, dict):
        raise ValueError(f"エラー: セクション '{section}' は辞書である必要があります")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"エラー: '{section}' に未知のキーがあります: {', '.join(unknown)}")

    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{section}.{name}")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            kwargs[name] = bool(value)
        elif isinstance(default, int):
            kwargs[name] = int(value)
        elif isinstance(default, float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _plain(value):
    # YAMLにそのまま書けるようtupleをlistに直す
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def load_config(path: Optional[Union[str, Path]] = None) -> Config:
    """YAML設定ファイルを読み込む

    Args:
        path: 設定ファイルのパス（Noneなら既定値）

    Returns:
        Configオブジェクト
    """
    if path is None:
        return Config()
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    return Config.from_dict(data)


def save_config(config: Config, path: Union[str, Path]) -> None:
    """設定をYAMLとして保存"""
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, allow_unicode=True, sort_keys=False)
