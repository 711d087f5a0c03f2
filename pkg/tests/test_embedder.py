import numpy as np
import pytest
import torch

from oracles import central_difference_check, grad_norm
from softvad.embedder import (Attention, ResNetExtractor, SpeakerHead, SpeakerModel,
                              attention_weights, embed_and_classify, pool_asoft, pool_gsoft,
                              pool_hard, pool_sap, pool_tap)
from softvad.vad import VadNet, speech_posterior

D = torch.float64


def _H(T=7, dim=5, seed=0, batch=()):
    return torch.randn(*batch, T, dim, generator=torch.Generator().manual_seed(seed), dtype=D)


def test_extractor_output_shape():
    for preset in ("tiny", "full"):
        net = ResNetExtractor(preset)
        assert net(torch.randn(3, 40, 11)).shape == (3, 128)
        assert net(torch.randn(2, 3, 40, 11)).shape == (2, 3, 128)


def test_extractor_unknown_preset():
    with pytest.raises(ValueError, match="preset"):
        ResNetExtractor("huge")


def test_full_preset_block_layout():
    net = ResNetExtractor("full")
    assert [len(s) for s in net.stages] == [3, 4, 6, 3]
    assert [s[0].conv1.out_channels for s in net.stages] == [16, 32, 64, 128]
    assert isinstance(net.proj, torch.nn.Identity)


def test_asoft_with_unit_posteriors_is_sap_bitwise():
    att = Attention(5, 4).double()
    for seed in range(20):
        H = _H(seed=seed, T=3 + seed)
        alpha = attention_weights(H, att)
        assert torch.equal(pool_asoft(H, alpha, torch.ones(H.shape[0], dtype=D)),
                           pool_sap(H, alpha))


def test_sap_uniform_is_tap():
    H = _H(T=9)
    alpha = torch.full((9,), 1 / 9, dtype=D)
    torch.testing.assert_close(pool_sap(H, alpha), pool_tap(H), atol=1e-6, rtol=0)


def test_gsoft_unit_posteriors_is_sum():
    H = _H()
    torch.testing.assert_close(pool_gsoft(H, torch.ones(7, dtype=D)), H.sum(0))
    torch.testing.assert_close(pool_gsoft(H, torch.ones(7, dtype=D), normalize=True), pool_tap(H))


def test_asoft_zero_posteriors_is_zero():
    H = _H()
    alpha = torch.softmax(torch.randn(7, dtype=D), 0)
    assert torch.all(pool_asoft(H, alpha, torch.zeros(7, dtype=D)) == 0)


def test_pooling_is_frame_order_invariant():
    H = _H(T=11, seed=3)
    att = Attention(5, 4).double()
    q = torch.rand(11, dtype=D)
    perm = torch.randperm(11)
    a, ap = attention_weights(H, att), attention_weights(H[perm], att)
    torch.testing.assert_close(pool_asoft(H, a, q), pool_asoft(H[perm], ap, q[perm]))
    torch.testing.assert_close(pool_gsoft(H, q), pool_gsoft(H[perm], q[perm]))
    torch.testing.assert_close(pool_tap(H), pool_tap(H[perm]))


def test_length_mismatch_rejected():
    with pytest.raises(ValueError, match="does not match"):
        pool_gsoft(_H(T=4), torch.ones(5, dtype=D))


def test_hard_pooling_drops_masked_frames():
    H = _H(T=6)
    mask = torch.tensor([1, 0, 1, 1, 0, 0], dtype=D)
    torch.testing.assert_close(pool_hard(H, mask, "tap"), H[[0, 2, 3]].mean(0))
    att = Attention(5, 3).double()
    expected = pool_sap(H[[0, 2, 3]], attention_weights(H[[0, 2, 3]], att))
    torch.testing.assert_close(pool_hard(H, mask, "sap", att), expected)


def test_hard_pooling_batched_rows_independent():
    H = _H(T=5, batch=(2,))
    mask = torch.tensor([[1, 1, 0, 0, 0], [0, 0, 0, 1, 1]], dtype=D)
    out = pool_hard(H, mask, "tap")
    torch.testing.assert_close(out[0], H[0, :2].mean(0))
    torch.testing.assert_close(out[1], H[1, 3:].mean(0))


def test_hard_pooling_errors():
    H = _H(T=3)
    with pytest.raises(ValueError, match="no speech frames"):
        pool_hard(H, torch.zeros(3, dtype=D))
    with pytest.raises(ValueError, match="attention"):
        pool_hard(H, torch.ones(3, dtype=D), "sap")
    with pytest.raises(ValueError):
        pool_hard(H, torch.ones(3, dtype=D), "max")


def test_head_shapes_and_label_range():
    head = SpeakerHead(3)
    y, logits, loss = embed_and_classify(torch.randn(4, 128), head, [0, 1, 2, 0])
    assert y.shape == (4, 128) and logits.shape == (4, 3) and loss.ndim == 0
    with pytest.raises(ValueError, match="outside"):
        embed_and_classify(torch.randn(1, 128), head, [3])
    with pytest.raises(ValueError):
        SpeakerHead(1)


def test_speaker_model_seeded_and_needs_posteriors():
    a, b = SpeakerModel(2, "asoft", seed=4), SpeakerModel(2, "asoft", seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    with pytest.raises(ValueError, match="posteriors"):
        a(torch.randn(1, 3, 40, 11))


def _tiny_pair(pooling="asoft"):
    sv = SpeakerModel(2, pooling, "tiny", attention_dim=8, seed=0).double()
    vad = VadNet(hidden=16, seed=1).double()
    X = torch.randn(1, 4, 40, 11, generator=torch.Generator().manual_seed(5), dtype=D)
    return sv, vad, X, torch.tensor([1])


@pytest.mark.parametrize("pooling", ["asoft", "gsoft"])
def test_soft_loss_gradients_match_finite_differences(pooling):
    sv, vad, X, y = _tiny_pair(pooling)
    sv.eval()  # fixed batch-norm statistics keep the loss smooth

    def loss():
        return sv(X, q=speech_posterior(vad, X), labels=y)[2]

    params = list(sv.parameters()) + list(vad.parameters())
    grads = torch.autograd.grad(loss(), params)
    err = central_difference_check(loss, params, grads, np.random.default_rng(0), per_tensor=6)
    assert err < 1e-3


@pytest.mark.parametrize("pooling", ["asoft", "gsoft"])
def test_speaker_loss_reaches_vad_under_soft_pooling(pooling):
    sv, vad, X, y = _tiny_pair(pooling)
    loss = sv(X, q=speech_posterior(vad, X), labels=y)[2]
    assert grad_norm(loss, list(vad.parameters())) > 0


@pytest.mark.parametrize("pooling", ["tap", "sap"])
def test_speaker_loss_blocked_under_hard_pooling(pooling):
    sv, vad, X, y = _tiny_pair(pooling)
    q = speech_posterior(vad, X)
    mask = (q >= 0.5).to(D)
    mask[..., 0] = 1.0
    loss = sv(X, q=q, mask=mask, labels=y)[2]
    assert grad_norm(loss, list(vad.parameters())) == 0.0
