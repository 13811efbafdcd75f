"""チェックポイント・設定ファイルのテスト"""
from pathlib import Path

import pytest
import torch
from torch import nn

from src.encoder.sft import SFTParams
from src.facemodel.toy_head import ToyFaceModel
from src.generator.types import LatentCode, NeuralTexture, TriPlane
from src.pipeline.inversion import Avatar
from src.utils.checkpoint import (
    load_avatar,
    load_checkpoint,
    load_container,
    load_session,
    restore_blocks,
    save_avatar,
    save_checkpoint,
    save_session,
)
from src.utils.config import Config, load_config, save_config
from src.utils.errors import CheckpointError


def test_checkpoint_round_trip(tmp_path, face_model, proxies, tiny_config):
    torch.manual_seed(0)
    source = nn.Linear(3, 4)
    path = save_checkpoint(tmp_path / "model.pt", {"head": source}, face_model, proxies, tiny_config,
                           {"stage": "s1"})
    container = load_checkpoint(path)
    assert container["meta"] == {"stage": "s1"}
    assert Config.from_dict(container["config"]) == tiny_config
    restored_model = ToyFaceModel.from_dict(container["face_model"])
    assert (restored_model.base.vertices == face_model.base.vertices).all()

    target = nn.Linear(3, 4)
    restore_blocks(container, {"head": target})
    assert torch.equal(target.weight, source.weight)


def test_restore_rejects_shape_mismatch_and_missing_block(tmp_path):
    path = save_checkpoint(tmp_path / "model.pt", {"head": nn.Linear(3, 4)})
    container = load_checkpoint(path)
    with pytest.raises(CheckpointError):
        restore_blocks(container, {"head": nn.Linear(3, 5)})
    with pytest.raises(CheckpointError):
        restore_blocks(container, {"tail": nn.Linear(3, 4)})


def test_container_rejects_version_kind_and_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")
    old = tmp_path / "old.pt"
    torch.save({"version": 0, "kind": "model"}, old)
    with pytest.raises(CheckpointError):
        load_checkpoint(old)
    path = save_checkpoint(tmp_path / "model.pt", {"head": nn.Linear(2, 2)})
    with pytest.raises(CheckpointError):
        load_container(path, "avatar")


def test_container_rejects_corrupt_and_truncated_files(tmp_path):
    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(garbage)
    path = save_checkpoint(tmp_path / "model.pt", {"head": nn.Linear(2, 2)})
    truncated = tmp_path / "truncated.pt"
    truncated.write_bytes(path.read_bytes()[: path.stat().st_size // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)


def test_avatar_round_trip(tmp_path):
    gen = torch.Generator().manual_seed(0)
    sft = SFTParams([(torch.rand(1, 2, 4, 4, generator=gen), torch.rand(1, 2, 4, 4, generator=gen))])
    avatar = Avatar(LatentCode(torch.randn(1, 6, 8, generator=gen)),
                    NeuralTexture([torch.rand(1, 3, 4, 4, generator=gen), torch.rand(1, 3, 8, 8, generator=gen)]),
                    sft, TriPlane(torch.rand(1, 3, 2, 8, 8, generator=gen)))
    restored = load_avatar(save_avatar(tmp_path / "avatar.pt", avatar))
    assert torch.equal(restored.latent.wplus, avatar.latent.wplus)
    assert all(torch.equal(a, b) for a, b in zip(restored.texture.scales, avatar.texture.scales))
    assert torch.equal(restored.sft.scales[0][0], sft.scales[0][0])
    assert restored.sft.plane_offset is None
    assert torch.equal(restored.static.planes, avatar.static.planes)
    with pytest.raises(CheckpointError):
        load_session(tmp_path / "avatar.pt")


def test_session_round_trip_resumes_stream(tmp_path, inverter, sample):
    with torch.no_grad():
        session = inverter.start_session(sample.observation(0))
        session = inverter.update_session(session, sample.observation(0))
        path = save_session(tmp_path / "session.pt", session)
        resumed = load_session(path)
        a = inverter.update_session(session, sample.observation(1))
        b = inverter.update_session(resumed, sample.observation(1))
    assert resumed.t == 1
    assert b.t == 2
    for x, y in zip(a.state.tex + a.state.tri, b.state.tex + b.state.tri):
        assert torch.equal(x, y)


def test_config_yaml_round_trip(tmp_path, tiny_config):
    path = tmp_path / "config.yaml"
    save_config(tiny_config, path)
    assert load_config(path) == tiny_config
    assert load_config(None) == Config()
    assert tiny_config.with_seed(9).seed == 9
    assert tiny_config.with_seed(None) is tiny_config


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        Config.from_dict({"generator": {"z_dimension": 3}})
    with pytest.raises(ValueError):
        Config.from_dict({"training": {"stage4": {}}})
    with pytest.raises(ValueError):
        Config.from_dict({"generator": 5})


def test_default_learning_rates():
    shipped = load_config(Path(__file__).parent / "configs" / "default.yaml").training
    for training in (Config().training, shipped):
        assert (training.stage1.lr, training.stage1.lr_d) == (1e-4, 1e-3)
        assert training.stage2.lr_d == 1e-3
