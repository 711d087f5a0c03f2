"""DNN voice activity detector, energy baseline, thresholding and
self-labelling for speech-posterior domain adaptation."""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NONSPEECH, SPEECH = 0, 1


class VadNet(nn.Module):
    """Feed-forward frame classifier over flattened context windows.

    ``(..., d, w)`` windows in, ``(..., 2)`` logits out; class 1 is speech.
    """

    def __init__(self, n_mels=40, context=5, hidden=512, n_hidden=2, seed=0):
        super().__init__()
        self.n_mels, self.context = n_mels, context
        self.n_in = n_mels * (2 * context + 1)
        dims = [self.n_in] + [hidden] * n_hidden
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], 2)
        self.reset_parameters(seed)

    def reset_parameters(self, seed=0):
        g = torch.Generator().manual_seed(seed)
        for layer in [*self.hidden, self.out]:
            bound = 1.0 / math.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=g)
                layer.bias.zero_()

    def config(self):
        return {"n_mels": self.n_mels, "context": self.context,
                "hidden": self.out.in_features, "n_hidden": len(self.hidden)}

    def forward(self, windows):
        if tuple(windows.shape[-2:]) != (self.n_mels, 2 * self.context + 1):
            raise ValueError(f"VAD expects windows of shape (..., {self.n_mels}, "
                             f"{2 * self.context + 1}); got {tuple(windows.shape)}")
        x = windows.reshape(*windows.shape[:-2], self.n_in)
        for layer in self.hidden:
            x = F.relu(layer(x))
        return self.out(x)


def as_tensor(x, like: nn.Module):
    dtype = next(like.parameters()).dtype
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def class_posteriors(model: VadNet, windows):
    return torch.softmax(model(as_tensor(windows, model)), dim=-1)


def speech_posterior(model: VadNet, windows):
    """Per-frame speech posterior q_t, differentiable w.r.t. the model."""
    return class_posteriors(model, windows)[..., SPEECH]


def energy_vad(feats, threshold_percentile=50.0):
    """Binary posteriors from frame log energy (sum over mel bands).

    A frame is speech when its energy is >= the utterance's percentile.
    """
    energy = np.asarray(feats).sum(axis=-1)
    return (energy >= np.percentile(energy, threshold_percentile)).astype(np.float64)


def hard_decision(q, tau=0.5):
    if not 0.0 < tau < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if isinstance(q, torch.Tensor):
        return (q.detach() >= tau).to(q.dtype)
    return (np.asarray(q) >= tau).astype(np.float64)


@dataclass
class PseudoLabelSet:
    indices: np.ndarray   # kept frame indices, strictly increasing
    labels: np.ndarray    # SPEECH / NONSPEECH per kept index

    def __len__(self):
        return len(self.indices)


def pseudo_labels(q, delta=0.7) -> PseudoLabelSet:
    """Keep only confidently classified frames.

    Speech when q_t > delta, non-speech when 1 - q_t > delta; anything in
    [1 - delta, delta] is dropped. Both comparisons are strict.
    """
    if not 0.5 < delta < 1.0:
        raise ValueError("delta must lie in (0.5, 1)")
    if isinstance(q, torch.Tensor):
        q = q.detach().cpu().numpy()
    q = np.asarray(q, dtype=np.float64)
    speech = q > delta
    nonspeech = (1.0 - q) > delta
    keep = np.flatnonzero(speech | nonspeech)
    return PseudoLabelSet(keep, np.where(speech[keep], SPEECH, NONSPEECH).astype(np.int64))


def sp_loss(model: VadNet, windows, pseudo: PseudoLabelSet):
    """Mean cross-entropy of the VAD on its own kept pseudo-labels."""
    if len(pseudo) == 0:
        raise ValueError("empty pseudo-label set")
    windows = as_tensor(windows, model)
    T = windows.shape[0]
    idx = torch.as_tensor(pseudo.indices, dtype=torch.long)
    if idx.min() < 0 or idx.max() >= T:
        raise IndexError(f"pseudo-label index out of range for {T} frames")
    logits = model(windows[idx])
    return F.cross_entropy(logits, torch.as_tensor(pseudo.labels, dtype=torch.long))
