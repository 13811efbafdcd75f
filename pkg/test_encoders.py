"""ワンショットエンコーダとCS-SFTのテスト"""
import pytest
import torch

from src.encoder.one_shot import LatentEncoder, TextureEncoder, TriPlaneEncoder
from src.encoder.sft import SFTParams, TexOffsets, apply_cs_sft
from src.renderer.rasterizer import UVImage


def test_cs_sft_identity_and_passthrough():
    gen = torch.Generator().manual_seed(0)
    features = torch.randn(2, 6, 4, 4, generator=gen)
    ones, zeros = torch.ones(2, 3, 4, 4), torch.zeros(2, 3, 4, 4)
    assert torch.equal(apply_cs_sft(features, ones, zeros), features)
    alpha = torch.randn(2, 3, 4, 4, generator=gen)
    beta = torch.randn(2, 3, 4, 4, generator=gen)
    out = apply_cs_sft(features, alpha, beta)
    assert out.shape == features.shape
    assert torch.equal(out[:, 3:], features[:, 3:])


def test_cs_sft_scalar_case():
    features = torch.tensor([2.0, 5.0]).view(1, 2, 1, 1)
    out = apply_cs_sft(features, torch.full((1, 1, 1, 1), 3.0), torch.full((1, 1, 1, 1), 1.0))
    assert out.flatten().tolist() == [7.0, 5.0]


def test_cs_sft_is_affine():
    """apply(aF1 + bF2) = a·apply(F1) + b·apply(F2) − (a + b − 1)·β（変調側）"""
    gen = torch.Generator().manual_seed(1)
    f1, f2 = torch.randn(2, 1, 8, 3, 3, generator=gen)
    alpha = torch.randn(1, 4, 3, 3, generator=gen)
    beta = torch.randn(1, 4, 3, 3, generator=gen)
    a, b = 0.6, -1.7
    lhs = apply_cs_sft(a * f1 + b * f2, alpha, beta)[:, :4]
    rhs = a * apply_cs_sft(f1, alpha, beta)[:, :4] + b * apply_cs_sft(f2, alpha, beta)[:, :4] - (a + b - 1) * beta
    assert torch.allclose(lhs, rhs, atol=1e-5)


def test_cs_sft_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        apply_cs_sft(torch.zeros(1, 6, 4, 4), torch.ones(1, 2, 4, 4), torch.zeros(1, 2, 4, 4))


def test_texture_encoder_starts_with_zero_offsets(tiny_config):
    g, e = tiny_config.generator, tiny_config.encoders
    encoder = TextureEncoder(g.texture_channels, e.widths, 16, "uv")
    offsets = encoder(torch.randn(2, 7, 16, 16))
    assert isinstance(offsets, TexOffsets)
    assert [tuple(o.shape) for o in offsets.scales] == [(2, c, r, r) for c, r in
                                                          zip(g.texture_channels, g.texture_resolutions)]
    assert all(torch.all(o == 0) for o in offsets.scales)


def test_image_domain_texture_encoder_takes_six_channels(tiny_config):
    g, e = tiny_config.generator, tiny_config.encoders
    encoder = TextureEncoder(g.texture_channels, e.widths, 16, "image")
    assert encoder.in_channels == 6
    with pytest.raises(ValueError):
        encoder(torch.zeros(1, 7, 16, 16))


def test_triplane_encoder_starts_with_identity(generator, tiny_config):
    g, e = tiny_config.generator, tiny_config.encoders
    encoder = TriPlaneEncoder(generator.g_static.sft_channels, e.widths, 16, g.plane_channels,
                              g.plane_resolution, "sft")
    sft = encoder(torch.randn(1, 6, 16, 16))
    assert sft.resolutions == generator.g_static.resolutions
    for alpha, beta in sft.scales:
        assert torch.all(alpha == 1) and torch.all(beta == 0)
    assert sft.plane_offset is None


def test_offset_mode_predicts_zero_plane_offset(generator, tiny_config):
    g, e = tiny_config.generator, tiny_config.encoders
    encoder = TriPlaneEncoder(generator.g_static.sft_channels, e.widths, 16, g.plane_channels,
                              g.plane_resolution, "offset")
    sft = encoder(torch.randn(1, 6, 16, 16))
    assert sft.scales == []
    assert sft.plane_offset.shape == (1, 3, g.plane_channels, g.plane_resolution, g.plane_resolution)
    assert torch.all(sft.plane_offset == 0)


def test_encoder_rejects_wrong_resolution(tiny_config):
    g, e = tiny_config.generator, tiny_config.encoders
    encoder = TextureEncoder(g.texture_channels, e.widths, 16, "uv")
    with pytest.raises(ValueError):
        encoder(torch.zeros(1, 7, 8, 8))
    with pytest.raises(ValueError):
        TextureEncoder(g.texture_channels, e.widths, 6, "uv")
    with pytest.raises(ValueError):
        TextureEncoder(g.texture_channels, e.widths, 16, "screen")


def test_latent_encoder_shape_and_determinism(generator, tiny_config):
    g, e = tiny_config.generator, tiny_config.encoders
    encoder = LatentEncoder(g.num_ws, g.style_dim, e.latent_widths, 16,
                            w_avg=generator.mapping.mean_latent(num_samples=64))
    image = torch.rand(2, 3, 16, 16)
    with torch.no_grad():
        a = encoder(image)
        b = encoder(image)
    assert a.wplus.shape == (2, g.num_ws, g.style_dim)
    assert torch.equal(a.wplus, b.wplus)
    with pytest.raises(ValueError):
        encoder(torch.rand(1, 3, 8, 8))
    with pytest.raises(ValueError):
        LatentEncoder(g.num_ws, g.style_dim, e.latent_widths, 12)


def test_uv_inputs_mask_invisible_texels():
    data = torch.ones(1, 3, 4, 4)
    visibility = torch.zeros(1, 1, 4, 4)
    visibility[..., :2, :] = 1
    stacked = TextureEncoder.uv_inputs(UVImage(data, visibility), UVImage(data * 2, visibility))
    assert stacked.shape == (1, 7, 4, 4)
    assert torch.all(stacked[:, :6, 2:, :] == 0)
    assert torch.all(stacked[:, 3:6, :2, :] == 2)
    with pytest.raises(ValueError):
        TextureEncoder.uv_inputs(UVImage(data, visibility), UVImage(data, 1 - visibility))


def test_offsets_mean_and_identity_sft():
    a = TexOffsets([torch.zeros(1, 2, 4, 4)])
    b = TexOffsets([torch.ones(1, 2, 4, 4)])
    assert torch.all(TexOffsets.mean([a, b]).scales[0] == 0.5)
    identity = SFTParams.identity(1, [2, 3], [4, 8])
    assert identity.resolutions == [4, 8]
