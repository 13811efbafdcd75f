"""ConvGRU・固定窓融合・逐次セッションのテスト"""
import time

import numpy as np
import pytest
import torch

from src.encoder.recurrent import (
    ConvFusion,
    ConvGRU,
    GRUWeights,
    RecurrentState,
    conv_gru_step,
    fold_sequence,
    fusion_windows,
    warm_start,
    warm_start_state,
)
from src.training.synthetic import sample_synthetic_identity
from src.utils.errors import SessionError


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_step(f, h, gw, gb, cw, cb):
    """画素ごとのGRU（1×1カーネル）"""
    s = h.shape[0]
    out = np.zeros_like(h)
    for i in range(h.shape[1]):
        for j in range(h.shape[2]):
            x = np.concatenate([f[:, i, j], h[:, i, j]])
            gates = sigmoid(gw @ x + gb)
            z, r = gates[:s], gates[s:]
            o = np.tanh(cw @ np.concatenate([f[:, i, j], r * h[:, i, j]]) + cb)
            out[:, i, j] = z * h[:, i, j] + (1 - z) * o
    return out


def random_weights(rng, c_in, s, k=1, scale=1.0):
    return GRUWeights(
        torch.tensor(rng.normal(0, scale, (2 * s, c_in + s, k, k))),
        torch.tensor(rng.normal(0, scale, 2 * s)),
        torch.tensor(rng.normal(0, scale, (s, c_in + s, k, k))),
        torch.tensor(rng.normal(0, scale, s)),
    )


def test_gru_step_matches_scalar_reference(rng):
    for _ in range(100):
        weights = random_weights(rng, 2, 3)
        f = rng.normal(size=(2, 2, 2))
        h = rng.normal(size=(3, 2, 2))
        out = conv_gru_step(torch.tensor(f)[None], torch.tensor(h)[None], weights)[0].numpy()
        expected = reference_step(f, h, weights.gate_weight[:, :, 0, 0].numpy(), weights.gate_bias.numpy(),
                                  weights.candidate_weight[:, :, 0, 0].numpy(), weights.candidate_bias.numpy())
        np.testing.assert_allclose(out, expected, atol=1e-6)


def test_zero_weights_halve_state(rng):
    """重み0なら z = 0.5、o = 0 なので h_t = 0.5·h"""
    weights = GRUWeights(torch.zeros(4, 5, 3, 3), torch.zeros(4), torch.zeros(2, 5, 3, 3), torch.zeros(2))
    h = torch.randn(1, 2, 4, 4)
    out = conv_gru_step(torch.randn(1, 3, 4, 4), h, weights)
    assert torch.allclose(out, 0.5 * h)


def test_gru_step_rejects_channel_mismatch(rng):
    weights = random_weights(rng, 2, 3)
    with pytest.raises(ValueError):
        conv_gru_step(torch.zeros(1, 4, 2, 2, dtype=torch.float64), torch.zeros(1, 3, 2, 2, dtype=torch.float64),
                      weights)
    with pytest.raises(ValueError):
        conv_gru_step(torch.zeros(1, 2, 2, 2, dtype=torch.float64), torch.zeros(1, 3, 4, 4, dtype=torch.float64),
                      weights)
    with pytest.raises(ValueError):
        GRUWeights(torch.zeros(5, 5, 1, 1), torch.zeros(5), torch.zeros(3, 5, 1, 1), torch.zeros(3))


def test_fold_of_empty_sequence_is_initial_state(rng):
    weights = random_weights(rng, 2, 3)
    h0 = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    assert fold_sequence([], h0, weights) is h0
    f = [torch.tensor(rng.normal(size=(1, 2, 2, 2))) for _ in range(3)]
    manual = conv_gru_step(f[2], conv_gru_step(f[1], conv_gru_step(f[0], h0, weights), weights), weights)
    assert torch.equal(fold_sequence(f, h0, weights), manual)


def test_gru_state_stays_bounded(rng):
    """|h0| ≤ 1 なら何ステップ後も |h| ≤ 1"""
    weights = random_weights(rng, 2, 3, scale=3.0)
    h = torch.tensor(rng.uniform(-1, 1, (1, 3, 2, 2)))
    for _ in range(50):
        h = conv_gru_step(torch.tensor(rng.normal(0, 5, (1, 2, 2, 2))), h, weights)
        assert float(h.abs().max()) <= 1.0


def test_conv_gru_rejects_even_kernel():
    with pytest.raises(ValueError):
        ConvGRU(4, 4, 2)
    gru = ConvGRU(4, 6, 3)
    out = gru(torch.randn(2, 4, 5, 5), torch.zeros(2, 6, 5, 5))
    assert out.shape == (2, 6, 5, 5)


def test_fold_is_order_sensitive(rng):
    weights = random_weights(rng, 2, 3)
    h0 = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
    a, b = (torch.tensor(rng.normal(size=(1, 2, 2, 2))) for _ in range(2))
    forward = fold_sequence([a, b], h0, weights)
    swapped = fold_sequence([b, a], h0, weights)
    assert not torch.allclose(forward, swapped)


def test_pass_through_init():
    """素通し初期化では零状態からの1ステップが tanh(f) になる"""
    gru = ConvGRU(4, 4, 3)
    gru.init_pass_through()
    f = torch.randn(2, 4, 5, 5, generator=torch.Generator().manual_seed(2)) * 3
    with torch.no_grad():
        out = gru(f, torch.zeros(2, 4, 5, 5))
    assert torch.allclose(out, torch.tanh(f), atol=1e-6)
    with pytest.raises(ValueError):
        ConvGRU(3, 4, 3).init_pass_through()


def test_fusion_windows():
    assert fusion_windows(1, 4) == [[0, 0, 0, 0]]
    assert fusion_windows(3, 4) == [[0, 1, 2, 0]]
    assert fusion_windows(4, 4) == [[0, 1, 2, 3]]
    assert fusion_windows(6, 4) == [[0, 1, 2, 3], [4, 5, 4, 5]]
    assert fusion_windows(9, 4)[-1] == [8, 8, 8, 8]
    with pytest.raises(ValueError):
        fusion_windows(0, 4)
    with pytest.raises(ValueError):
        fusion_windows(3, 0)


def test_recurrent_state_round_trip():
    state = RecurrentState([torch.randn(1, 4, 2, 2)], [torch.randn(1, 3, 4, 4)], 5)
    restored = RecurrentState.from_dict(state.to_dict())
    assert restored.t == 5
    assert torch.equal(restored.tex[0], state.tex[0])
    assert restored.shapes == state.shapes
    assert state.nbytes == (16 + 48) * 4
    with pytest.raises(ValueError):
        RecurrentState([], [], -1)


def test_convfusion_starts_as_mean(inverter, sample):
    """同じフレームを並べた窓の融合はそのフレームの特徴に一致"""
    fusion = ConvFusion(inverter.e_tex, window=3)
    with torch.no_grad():
        frame = sample.observation(0)
        obs = inverter.observe(frame, inverter.coarse_avatar(inverter.encode_latent(frame.image)))
        features = fusion.frame_features(inverter.backbone_features(obs)[0])
        fused = fusion.fuse_window([features] * 3)
    for a, b in zip(fused, features):
        assert torch.allclose(a, b, atol=1e-5)
    with pytest.raises(ValueError):
        fusion.fuse_window([features] * 2)


def test_warm_start_cycles(inverter, sample):
    with torch.no_grad():
        session = inverter.start_session(sample.observation(0))
        obs = inverter.observe_session(session, sample.observation(1))
        tex, _ = inverter.frame_features(obs)
    zero = warm_start(inverter.rec_tex, [tex], 0)
    assert all(torch.all(h == 0) for h in zero)
    once = warm_start(inverter.rec_tex, [tex], 1)
    expected = inverter.rec_tex.step(inverter.rec_tex.initial_state(tex), tex)
    for a, b in zip(once, expected):
        assert torch.allclose(a, b)
        assert not a.requires_grad
    with pytest.raises(ValueError):
        warm_start(inverter.rec_tex, [tex], -1)


def test_warm_start_twice_equals_doubled_fold(inverter, sample):
    with torch.no_grad():
        session = inverter.start_session(sample.observation(0))
        seq = [inverter.frame_features(inverter.observe_session(session, sample.observation(k))) for k in (1, 2)]
    tex = [s[0] for s in seq]
    tri = [s[1] for s in seq]
    twice = warm_start(inverter.rec_tex, tex, 2)
    with torch.no_grad():
        expected = inverter.rec_tex.fold(tex + tex, inverter.rec_tex.initial_state(tex[0]))
    for a, b in zip(twice, expected):
        assert torch.allclose(a, b, atol=1e-6)
    state = warm_start_state(inverter.rec_tex, inverter.rec_tri, tex, tri, 2)
    assert state.t == 0
    for a, b in zip(state.tex, twice):
        assert torch.equal(a, b)
    assert state.shapes == [tuple(h.shape) for h in twice + warm_start(inverter.rec_tri, tri, 2)]


def test_streaming_equals_batch_fold(inverter, tiny_config):
    """16フレームを1枚ずつ与えた状態と、列をまとめて畳み込んだ状態がビット単位で一致"""
    sample = sample_synthetic_identity(inverter.generator, tiny_config, 31, 16)
    with torch.no_grad():
        session = inverter.start_session(sample.observation(0))
        tex_seq, tri_seq = [], []
        for k in range(len(sample)):
            frame = sample.observation(k)
            tex, tri = inverter.frame_features(inverter.observe_session(session, frame))
            tex_seq.append(tex)
            tri_seq.append(tri)
        streamed = session
        for k in range(len(sample)):
            streamed = inverter.update_session(streamed, sample.observation(k))
        batch_tex = inverter.rec_tex.fold(tex_seq, session.state.tex)
        batch_tri = inverter.rec_tri.fold(tri_seq, session.state.tri)
    assert streamed.t == len(sample)
    assert session.t == 0
    for a, b in zip(streamed.state.tex + streamed.state.tri, batch_tex + batch_tri):
        assert torch.equal(a, b)


def test_state_memory_is_constant(inverter, sample):
    with torch.no_grad():
        session = inverter.update_session(inverter.start_session(sample.observation(0)), sample.observation(0))
        first = session.state.nbytes
        for k in range(1, len(sample)):
            session = inverter.update_session(session, sample.observation(k))
    assert session.state.nbytes == first


def test_session_errors(inverter, sample):
    with pytest.raises(SessionError):
        inverter.update_session(None, sample.observation(0))
    with torch.no_grad():
        session = inverter.start_session(sample.observation(0))
    with pytest.raises(SessionError):
        inverter.decode_session(session)


def test_decode_session_is_a_pure_read(perturbed_heads, sample):
    inverter = perturbed_heads
    with torch.no_grad():
        session = inverter.start_session(sample.observation(0))
        session = inverter.update_session(session, sample.observation(1))
        before = [h.clone() for h in session.state.tex + session.state.tri]
        offsets_a, sft_a = inverter.decode_session(session)
        offsets_b, sft_b = inverter.decode_session(session)
    assert session.t == 1
    for a, b in zip(offsets_a.scales, offsets_b.scales):
        assert torch.equal(a, b)
    for (alpha_a, beta_a), (alpha_b, beta_b) in zip(sft_a.scales, sft_b.scales):
        assert torch.equal(alpha_a, alpha_b) and torch.equal(beta_a, beta_b)
    for a, b in zip(before, session.state.tex + session.state.tri):
        assert torch.equal(a, b)


def test_update_time_does_not_grow(inverter, sample):
    """1回の更新時間はフレーム数に依存しない（t=1..32 で2倍以内）"""
    frames = [sample.observation(k % len(sample)) for k in range(33)]
    timings = []
    with torch.no_grad():
        session = inverter.update_session(inverter.start_session(frames[0]), frames[0])
        for frame in frames[1:]:
            start = time.perf_counter()
            session = inverter.update_session(session, frame)
            timings.append(time.perf_counter() - start)
    assert session.t == 33
    early, late = np.median(timings[:8]), np.median(timings[-8:])
    assert late <= 2.0 * early
