"""事前分布ジェネレータ・ボリュームレンダリングのテスト"""
import numpy as np
import pytest
import torch

from src.encoder.sft import SFTParams
from src.facemodel.toy_head import FaceParams, camera_from_pose
from src.generator.avatar_gan import FaceFeatures, compose
from src.generator.types import LatentCode, NeuralTexture, TriPlane
from src.renderer.rasterizer import FeatureImage
from src.renderer.volume import box_intersect, camera_rays, render
from src.training.synthetic import sample_latent


def random_rasterized(generator, fill_mask: float, seed: int):
    gen = torch.Generator().manual_seed(seed)
    images = []
    for r, c in zip(generator.config.texture_resolutions, generator.config.texture_channels):
        images.append(FeatureImage(torch.randn(1, c, r, r, generator=gen), torch.full((1, 1, r, r), fill_mask)))
    return images


def test_texture_is_deterministic_with_configured_scales(generator):
    w = sample_latent(generator, 5)
    with torch.no_grad():
        a = generator.g_tex(w)
        b = generator.g_tex(w)
    assert a.resolutions == list(generator.config.texture_resolutions)
    assert all(torch.equal(x, y) for x, y in zip(a.scales, b.scales))


def test_texture_reacts_to_single_layer(generator):
    w = sample_latent(generator, 5)
    changed = w.wplus.clone()
    changed[:, 2] += 1.0
    with torch.no_grad():
        a = generator.g_tex(w)
        b = generator.g_tex(LatentCode(changed))
    assert any(not torch.equal(x, y) for x, y in zip(a.scales, b.scales))


def test_texture_rejects_non_increasing_scales():
    with pytest.raises(ValueError):
        NeuralTexture([torch.zeros(1, 2, 8, 8), torch.zeros(1, 2, 4, 4)])


def test_identity_sft_leaves_static_unchanged(generator):
    w = sample_latent(generator, 6)
    g_static = generator.g_static
    identity = SFTParams.identity(1, g_static.sft_channels, g_static.resolutions)
    with torch.no_grad():
        plain = g_static(w)
        modulated = g_static(w, identity)
    assert torch.equal(plain.planes, modulated.planes)
    cfg = generator.config
    assert plain.planes.shape == (1, 3, cfg.plane_channels, cfg.plane_resolution, cfg.plane_resolution)


def test_static_rejects_sft_resolution_mismatch(generator):
    w = sample_latent(generator, 6)
    g_static = generator.g_static
    wrong = SFTParams.identity(1, g_static.sft_channels, [r * 2 for r in g_static.resolutions])
    with pytest.raises(ValueError):
        g_static(w, wrong)


def test_full_coverage_replaces_features(generator):
    """被覆率1のスケールではブレンド後の特徴がラスタライズ結果そのもの"""
    w = sample_latent(generator, 7)
    rasterized = random_rasterized(generator, 1.0, 0)
    with torch.no_grad():
        _, blended = generator.g_face(rasterized, w, return_blended=True)
    for image, features in zip(rasterized, blended):
        assert torch.equal(features, image.data)


def test_zero_coverage_ignores_texture(generator):
    w = sample_latent(generator, 7)
    with torch.no_grad():
        a = generator.g_face(random_rasterized(generator, 0.0, 0), w)
        b = generator.g_face(random_rasterized(generator, 0.0, 1), w)
    assert torch.equal(a.features, b.features)


def test_blend_is_linear_in_mask(generator):
    w = sample_latent(generator, 7)
    rasterized = random_rasterized(generator, 0.0, 2)
    with torch.no_grad():
        _, zero = generator.g_face(rasterized, w, return_blended=True)
        first = [FeatureImage(r.data, torch.full_like(r.mask, 0.25)) if s == 0 else r
                 for s, r in enumerate(rasterized)]
        _, quarter = generator.g_face(first, w, return_blended=True)
    expected = 0.25 * rasterized[0].data + 0.75 * zero[0]
    assert torch.allclose(quarter[0], expected, atol=1e-6)


def test_face_rejects_scale_mismatch(generator):
    w = sample_latent(generator, 7)
    rasterized = random_rasterized(generator, 1.0, 0)[:2]
    with pytest.raises(ValueError):
        generator.g_face(rasterized, w)


def test_compose_coverage_extremes():
    gen = torch.Generator().manual_seed(0)
    static = TriPlane(torch.randn(2, 3, 4, 8, 8, generator=gen))
    face = torch.randn(2, 4, 8, 8, generator=gen)
    none = compose(FaceFeatures(face, torch.zeros(2, 1, 8, 8)), static)
    assert torch.equal(none.planes, static.planes)
    full = compose(FaceFeatures(face, torch.ones(2, 1, 8, 8)), static)
    assert torch.equal(full.front, face)
    assert torch.equal(full.planes[:, 1:], static.planes[:, 1:])
    coverage = torch.rand(2, 1, 8, 8, generator=gen)
    mixed = compose(FaceFeatures(face, coverage), static)
    assert torch.allclose(mixed.front, coverage * face + (1 - coverage) * static.front)


def test_compose_rejects_mismatch():
    static = TriPlane(torch.zeros(1, 3, 4, 8, 8))
    with pytest.raises(ValueError):
        compose(FaceFeatures(torch.zeros(1, 4, 4, 4), torch.zeros(1, 1, 4, 4)), static)


def test_empty_volume_renders_background(front_camera):
    planes = torch.zeros(1, 3, 4, 4, 4)

    def empty(features, points):
        return torch.zeros(points.shape[:-1]), torch.zeros(*points.shape[:-1], 5)

    out = render(planes, [front_camera], 8, 16, empty)
    assert torch.all(out.alpha == 0)
    assert torch.all(out.raw == 0)
    assert torch.all(out.rgb == 1)


def test_uniform_density_matches_closed_form(front_camera):
    """一様な密度 σ では α = 1 − exp(−σL)"""
    sigma, color = 2.0, 0.3
    planes = torch.zeros(1, 3, 4, 4, 4)

    def uniform(features, points):
        return torch.full(points.shape[:-1], sigma), torch.full((*points.shape[:-1], 4), color)

    out = render(planes, [front_camera], 8, 256, uniform, extent=1.2)
    origins, directions = camera_rays(front_camera, 8)
    t_near, t_far, _ = box_intersect(torch.as_tensor(origins), torch.as_tensor(directions), 1.2)
    expected = (1.0 - torch.exp(-sigma * (t_far - t_near))).reshape(8, 8).float()
    assert torch.allclose(out.alpha[0, 0], expected, atol=1e-4)
    assert torch.allclose(out.raw[0], color * out.alpha[0].expand(4, -1, -1), atol=1e-5)


def test_more_samples_converge(generator):
    gen = torch.Generator().manual_seed(3)
    planes = torch.randn(1, 3, generator.config.plane_channels, 8, 8, generator=gen) * 0.5
    camera = camera_from_pose(0.2, 0.1, 2.7, resolution=8)
    with torch.no_grad():
        raws = {n: render(planes, [camera], 8, n, generator.decoder).raw for n in (32, 64, 128)}
    coarse_change = (raws[64] - raws[32]).abs().mean()
    fine_change = (raws[128] - raws[64]).abs().mean()
    assert fine_change < coarse_change


def test_render_rejects_single_sample(front_camera, generator):
    with pytest.raises(ValueError):
        render(torch.zeros(1, 3, 8, 4, 4), [front_camera], 8, 1, generator.decoder)


def test_synthesize_equals_manual_chain(generator, face_model, rng):
    w = sample_latent(generator, 8)
    params = [face_model.sample_params(rng)]
    cameras = [camera_from_pose(0.1, -0.1, 2.7, resolution=16)]
    with torch.no_grad():
        out = generator.synthesize(w, params, cameras)
        texture = generator.g_tex(w)
        face = generator.g_face(generator.rasterize_textures(texture, params), w)
        manual = generator.render(compose(face, generator.g_static(w)), cameras)
    assert torch.equal(out.rgb, manual.rgb)
    assert torch.equal(out.raw, manual.raw)
    assert float(out.rgb.min()) >= 0.0 and float(out.rgb.max()) <= 1.0


def test_static_branch_ignores_expression(generator, face_model):
    w = sample_latent(generator, 9)
    camera = [camera_from_pose(0.0, 0.0, 2.7, resolution=16)]
    neutral = face_model.zero_params()
    smiling = FaceParams(neutral.shape, np.full(face_model.num_expression, 0.8))
    with torch.no_grad():
        a = generator.synthesize_bundle(w, [neutral], camera)
        b = generator.synthesize_bundle(w, [smiling], camera)
    assert torch.equal(a.static.planes, b.static.planes)
    assert not torch.equal(a.render.rgb, b.render.rgb)


def test_synthesize_rejects_bad_latent(generator, face_model, front_camera):
    with pytest.raises(ValueError):
        generator.synthesize(LatentCode(torch.zeros(1, 2, 16)), [face_model.zero_params()], [front_camera])


def test_pipeline_gradient_matches_finite_differences(generator, face_model):
    """平均rgbのテクスチャ（最粗スケール）に対する勾配を中心差分と比較"""
    w = LatentCode(sample_latent(generator, 10).wplus.double().detach())
    generator = generator.double()
    params = [face_model.zero_params()]
    cameras = [camera_from_pose(0.0, 0.0, 2.7, resolution=16)]
    with torch.no_grad():
        texture = generator.g_tex(w)
        static = generator.g_static(w)
    coarsest = texture.scales[0].clone().requires_grad_(True)

    def mean_rgb(t):
        tex = NeuralTexture([t] + texture.scales[1:])
        return generator.render_features(w, tex, static, params, cameras, 16).render.rgb.mean()

    mean_rgb(coarsest).backward()
    grad = coarsest.grad.flatten()
    picks = torch.argsort(grad.abs(), descending=True)[:4]
    eps = 1e-5
    for index in picks.tolist():
        delta = torch.zeros_like(grad)
        delta[index] = eps
        delta = delta.view_as(coarsest)
        with torch.no_grad():
            numeric = (mean_rgb(coarsest + delta) - mean_rgb(coarsest - delta)) / (2 * eps)
        assert abs(float(numeric) - float(grad[index])) <= 1e-2 * abs(float(grad[index])) + 1e-9


def test_render_gradient_wrt_planes(generator):
    """平均rawの三平面特徴に対する勾配を中心差分と比較"""
    decoder = generator.decoder.double()
    gen = torch.Generator().manual_seed(4)
    planes = (torch.randn(1, 3, generator.config.plane_channels, 8, 8, generator=gen, dtype=torch.float64) * 0.5)
    planes.requires_grad_(True)
    camera = camera_from_pose(0.1, 0.0, 2.7, resolution=8)

    def mean_raw(p):
        return render(p, [camera], 8, 16, decoder).raw.mean()

    mean_raw(planes).backward()
    grad = planes.grad.flatten()
    picks = torch.argsort(grad.abs(), descending=True)[:4]
    eps = 1e-6
    for index in picks.tolist():
        delta = torch.zeros_like(grad)
        delta[index] = eps
        delta = delta.view_as(planes)
        with torch.no_grad():
            numeric = (mean_raw(planes + delta) - mean_raw(planes - delta)) / (2 * eps)
        assert abs(float(numeric) - float(grad[index])) <= 1e-2 * abs(float(grad[index])) + 1e-9
