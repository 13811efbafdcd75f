"""複数フレーム集約方式のテスト"""
import pytest
import torch

from src.evaluation.baselines import aggregate, baseline_convfusion, baseline_feature_average


def test_single_frame_average_equals_one_shot(perturbed_heads, sample):
    frame = sample.observation(0)
    with torch.no_grad():
        averaged = baseline_feature_average(perturbed_heads, [frame])
        one_shot = perturbed_heads.invert_one_shot(frame)
        static = perturbed_heads.materialize_static(one_shot)
    assert torch.equal(averaged.latent.wplus, one_shot.latent.wplus)
    for a, b in zip(averaged.texture.scales, one_shot.texture.scales):
        assert torch.allclose(a, b, atol=1e-6)
    assert torch.allclose(averaged.static.planes, static.planes, atol=1e-6)


def test_two_frame_average_is_midpoint(perturbed_heads, sample):
    frames = [sample.observation(0), sample.observation(1)]
    with torch.no_grad():
        averaged = baseline_feature_average(perturbed_heads, frames)
        avatars = [perturbed_heads.invert_one_shot(f) for f in frames]
        coarse = [perturbed_heads.coarse_avatar(a.latent) for a in avatars]
        statics = [perturbed_heads.materialize_static(a) for a in avatars]
    for s in range(len(averaged.texture.scales)):
        offsets = [a.texture.scales[s] - c.texture.scales[s] for a, c in zip(avatars, coarse)]
        expected = coarse[0].texture.scales[s] + 0.5 * (offsets[0] + offsets[1])
        assert torch.allclose(averaged.texture.scales[s], expected, atol=1e-5)
    assert torch.allclose(averaged.static.planes, 0.5 * (statics[0].planes + statics[1].planes), atol=1e-5)


def test_convfusion_of_repeated_frame_equals_one_shot(perturbed_heads, sample):
    """窓を1フレームの繰り返しで埋めた融合はワンショット反転と一致"""
    frame = sample.observation(2)
    with torch.no_grad():
        fused = baseline_convfusion(perturbed_heads, [frame])
        one_shot = perturbed_heads.invert_one_shot(frame)
        a = perturbed_heads.materialize_static(fused)
        b = perturbed_heads.materialize_static(one_shot)
    for x, y in zip(fused.texture.scales, one_shot.texture.scales):
        assert torch.allclose(x, y, atol=1e-5)
    assert torch.allclose(a.planes, b.planes, atol=1e-5)


def test_convfusion_longer_than_window(perturbed_heads, sample):
    frames = [sample.observation(k) for k in range(3)]
    with torch.no_grad():
        avatar = baseline_convfusion(perturbed_heads, frames)
    assert avatar.static is not None and avatar.sft is None
    assert avatar.texture.resolutions == list(perturbed_heads.generator.g_tex.resolutions)


def test_aggregate_dispatch(inverter, sample):
    frames = [sample.observation(0), sample.observation(1)]
    with torch.no_grad():
        for method in ("recurrent", "convfusion", "average"):
            avatar = aggregate(method, inverter, frames)
            assert avatar.batch == 1
    with pytest.raises(ValueError):
        aggregate("median", inverter, frames)
    with pytest.raises(ValueError):
        baseline_feature_average(inverter, [])
    with pytest.raises(ValueError):
        aggregate("recurrent", inverter, [])
