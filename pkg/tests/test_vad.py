import math

import numpy as np
import pytest
import torch

from oracles import pseudo_label_filter
from softvad.vad import (SPEECH, PseudoLabelSet, VadNet, class_posteriors, energy_vad,
                         hard_decision, pseudo_labels, sp_loss, speech_posterior)


def test_posteriors_are_distributions():
    vad = VadNet(hidden=32, seed=0)
    W = torch.randn(6, 40, 11)
    p = class_posteriors(vad, W)
    assert p.shape == (6, 2)
    torch.testing.assert_close(p.sum(-1), torch.ones(6))
    q = speech_posterior(vad, W)
    assert torch.all((q > 0) & (q < 1))


def test_batch_shape_preserved():
    vad = VadNet(hidden=16)
    assert speech_posterior(vad, torch.randn(2, 3, 40, 11)).shape == (2, 3)


def test_bad_window_shape():
    with pytest.raises(ValueError, match="40, 11"):
        VadNet(hidden=8)(torch.randn(3, 40, 9))


def test_zero_output_layer_gives_ln2_loss():
    vad = VadNet(hidden=16)
    with torch.no_grad():
        vad.out.weight.zero_()
    W = torch.randn(10, 40, 11)
    q = speech_posterior(vad, W)
    torch.testing.assert_close(q, torch.full((10,), 0.5))
    pl = PseudoLabelSet(np.arange(10), np.array([0, 1] * 5))
    assert sp_loss(vad, W, pl).item() == pytest.approx(math.log(2), abs=1e-6)


def test_init_is_seeded():
    a, b = VadNet(hidden=8, seed=3), VadNet(hidden=8, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    assert all(torch.all(layer.bias == 0) for layer in a.hidden)


@pytest.mark.parametrize("delta", [0.55, 0.7, 0.9])
def test_pseudo_labels_match_reference(delta):
    rng = np.random.default_rng(int(delta * 100))
    for _ in range(1000):
        q = rng.uniform(size=int(rng.integers(1, 60)))
        # sprinkle exact boundary values
        q[rng.uniform(size=q.size) < 0.1] = delta
        q[rng.uniform(size=q.size) < 0.1] = 1 - delta
        pl = pseudo_labels(q, delta)
        idx, lab = pseudo_label_filter(q, delta)
        assert pl.indices.tolist() == idx and pl.labels.tolist() == lab
        kept = q[pl.indices]
        assert not np.any((kept >= 1 - delta) & (kept <= delta))


def test_pseudo_labels_boundaries_are_strict():
    pl = pseudo_labels(np.array([0.7, 0.3, 0.7000001, 0.2999999]), 0.7)
    assert pl.indices.tolist() == [2, 3]
    assert pl.labels.tolist() == [SPEECH, 0]


def test_pseudo_labels_can_be_empty():
    assert len(pseudo_labels(np.full(5, 0.5), 0.7)) == 0


def test_pseudo_labels_delta_range():
    for bad in (0.5, 1.0, 0.2):
        with pytest.raises(ValueError):
            pseudo_labels(np.array([0.9]), bad)


def test_sp_loss_errors():
    vad = VadNet(hidden=8)
    W = torch.randn(4, 40, 11)
    with pytest.raises(ValueError, match="empty"):
        sp_loss(vad, W, PseudoLabelSet(np.array([], int), np.array([], int)))
    with pytest.raises(IndexError):
        sp_loss(vad, W, PseudoLabelSet(np.array([4]), np.array([1])))


def test_sp_loss_matches_manual_cross_entropy():
    vad = VadNet(hidden=16, seed=1).double()
    W = torch.randn(8, 40, 11, dtype=torch.float64)
    pl = PseudoLabelSet(np.array([0, 3, 5]), np.array([1, 0, 1]))
    p = class_posteriors(vad, W).detach().numpy()
    manual = -np.mean([np.log(p[t, c]) for t, c in zip(pl.indices, pl.labels)])
    assert sp_loss(vad, W, pl).item() == pytest.approx(manual, rel=1e-12)


def test_sp_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    vad = VadNet(n_mels=4, context=1, hidden=6, seed=2).double()
    W = torch.randn(9, 4, 3, dtype=torch.float64)
    pl = pseudo_labels(speech_posterior(vad, W), 0.55)
    if len(pl) == 0:
        pl = PseudoLabelSet(np.arange(9), np.ones(9, int))
    params = list(vad.parameters())
    loss = sp_loss(vad, W, pl)
    grads = torch.autograd.grad(loss, params)
    eps = 1e-6
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 7)):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = sp_loss(vad, W, pl).item()
            flat[i] = orig - eps
            down = sp_loss(vad, W, pl).item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            assert abs(num - g.view(-1)[i].item()) <= 1e-6 + 1e-4 * abs(num)


def test_energy_vad_percentile():
    feats = np.array([[0.0], [1.0], [2.0], [3.0]])
    assert energy_vad(feats, 50).tolist() == [0, 0, 1, 1]
    assert energy_vad(feats, 0).tolist() == [1, 1, 1, 1]


def test_hard_decision_is_inclusive():
    assert hard_decision(np.array([0.49, 0.5, 0.51])).tolist() == [0, 1, 1]
    q = torch.tensor([0.2, 0.8], requires_grad=True)
    h = hard_decision(q)
    assert not h.requires_grad
    with pytest.raises(ValueError):
        hard_decision(q, 1.0)
