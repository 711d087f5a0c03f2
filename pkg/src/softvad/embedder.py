"""Frame-level ResNet speaker features, attentive / soft-VAD pooling and the
embedding + speaker classification head."""

import torch
import torch.nn as nn
import torch.nn.functional as F

EMBED_DIM = 128

PRESETS = {
    # stem channels, stage channels, blocks per stage
    "full": {"stem": 16, "channels": (16, 32, 64, 128), "blocks": (3, 4, 6, 3)},
    "tiny": {"stem": 4, "channels": (4, 8, 16, 32), "blocks": (1, 1, 1, 1)},
}

POOLINGS = ("tap", "sap", "gsoft", "asoft")


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.stride, self.pad = stride, c_out - c_in

    def shortcut(self, x):
        # parameter-free: subsample, then zero-pad the new channels
        if self.stride > 1:
            x = x[:, :, ::self.stride, ::self.stride]
        if self.pad:
            x = F.pad(x, (0, 0, 0, 0, 0, self.pad))
        return x

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetExtractor(nn.Module):
    """Maps each ``d x w`` context window to a 128-dim frame feature."""

    def __init__(self, preset="tiny", out_dim=EMBED_DIM):
        super().__init__()
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        p = PRESETS[preset]
        self.preset = preset
        self.stem = nn.Sequential(nn.Conv2d(1, p["stem"], 7, 1, 3, bias=False),
                                  nn.BatchNorm2d(p["stem"]), nn.ReLU())
        stages, c_in = [], p["stem"]
        for i, (c, n) in enumerate(zip(p["channels"], p["blocks"])):
            blocks = []
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(BasicBlock(c_in, c, stride))
                c_in = c
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.proj = nn.Identity() if c_in == out_dim else nn.Linear(c_in, out_dim)
        self.out_dim = out_dim

    def forward(self, windows):
        lead = windows.shape[:-2]
        x = windows.reshape(-1, 1, *windows.shape[-2:])
        x = self.stages(self.stem(x))
        x = self.proj(x.mean(dim=(2, 3)))
        return x.reshape(*lead, self.out_dim)


def frame_features(extractor: ResNetExtractor, windows):
    """Per-frame 128-vectors H for ``(..., T, d, w)`` windows."""
    if not isinstance(windows, torch.Tensor):
        dtype = next(extractor.parameters()).dtype
        windows = torch.as_tensor(windows, dtype=dtype)
    return extractor(windows)


class Attention(nn.Module):
    """Scores e_t = v^T ReLU(W h_t + b)."""

    def __init__(self, in_dim=EMBED_DIM, hidden=128):
        super().__init__()
        if hidden < 1:
            raise ValueError("attention hidden size must be >= 1")
        self.W = nn.Linear(in_dim, hidden)
        self.v = nn.Linear(hidden, 1, bias=False)

    def forward(self, H):
        return self.v(F.relu(self.W(H))).squeeze(-1)


def attention_weights(H, attention: Attention, mask=None):
    """Softmax of the attention scores over frames (last-but-one axis of H)."""
    e = attention(H)
    if mask is not None:
        e = e.masked_fill(mask == 0, float("-inf"))
    return torch.softmax(e, dim=-1)


def _check_len(H, *weights):
    T = H.shape[-2]
    for w in weights:
        if w.shape[-1] != T:
            raise ValueError(f"weight length {w.shape[-1]} does not match {T} frames")


def pool_tap(H):
    return H.mean(dim=-2)


def pool_sap(H, alpha):
    _check_len(H, alpha)
    return (alpha.unsqueeze(-1) * H).sum(dim=-2)


def pool_gsoft(H, q, normalize=False):
    """Speech-posterior gating without attention: sum_t q_t h_t.

    With ``normalize`` the sum is divided by sum_t q_t.
    """
    _check_len(H, q)
    out = (q.unsqueeze(-1) * H).sum(dim=-2)
    if normalize:
        out = out / q.sum(dim=-1, keepdim=True).clamp_min(1e-8)
    return out


def pool_asoft(H, alpha, q):
    """sum_t alpha_t q_t h_t, with no renormalization after the product."""
    _check_len(H, alpha, q)
    return ((alpha * q).unsqueeze(-1) * H).sum(dim=-2)


def pool_hard(H, mask, mode="tap", attention: Attention | None = None, q=None):
    """Drop frames where ``mask`` is 0, then pool the survivors.

    ``mode`` is ``tap``, ``sap`` or ``asoft`` (the latter two recompute
    attention over surviving frames and need ``attention``; ``asoft`` also
    needs ``q``). Batched input is pooled row by row.
    """
    if mode not in ("tap", "sap", "asoft"):
        raise ValueError(f"hard VAD pooling mode must be tap, sap or asoft, not {mode!r}")
    if mode != "tap" and attention is None:
        raise ValueError(f"hard VAD with {mode} pooling needs attention parameters")
    _check_len(H, mask)
    if H.dim() > 2:
        qs = [None] * H.shape[0] if q is None else list(q)
        return torch.stack([pool_hard(h, m, mode, attention, qq)
                            for h, m, qq in zip(H, mask, qs)])
    keep = mask.detach() > 0.5
    if not bool(keep.any()):
        raise ValueError("no speech frames")
    Hk = H[keep]
    if mode == "tap":
        return pool_tap(Hk)
    alpha = attention_weights(Hk, attention)
    if mode == "sap":
        return pool_sap(Hk, alpha)
    return pool_asoft(Hk, alpha, q[keep])


class SpeakerHead(nn.Module):
    """Embedding layer followed by the speaker softmax layer."""

    def __init__(self, n_speakers, in_dim=EMBED_DIM, embed_dim=EMBED_DIM):
        super().__init__()
        if n_speakers < 2:
            raise ValueError("speaker classification needs at least 2 speakers")
        self.embed = nn.Linear(in_dim, embed_dim)
        self.classify = nn.Linear(embed_dim, n_speakers)

    def forward(self, pooled):
        y = self.embed(pooled)
        return y, self.classify(y)


def embed_and_classify(pooled, head: SpeakerHead, labels=None):
    """Returns (embedding, logits, loss); loss is None without labels."""
    y, logits = head(pooled)
    if labels is None:
        return y, logits, None
    labels = torch.as_tensor(labels, dtype=torch.long)
    S = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= S):
        raise ValueError(f"speaker label outside [0, {S})")
    return y, logits, F.cross_entropy(logits, labels)


class SpeakerModel(nn.Module):
    """Extractor + pooling + head; everything here belongs to the SV parameters.

    ``pooling`` is the utterance aggregation: tap, sap, gsoft or asoft.
    Passing ``mask`` to :meth:`pool` applies a hard VAD first.
    """

    def __init__(self, n_speakers, pooling="asoft", preset="tiny", attention_dim=128,
                 gsoft_normalize=False, seed=0):
        super().__init__()
        if pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {pooling!r}; choose from {POOLINGS}")
        self.pooling, self.gsoft_normalize = pooling, gsoft_normalize
        self.n_speakers, self.preset, self.attention_dim = n_speakers, preset, attention_dim
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.extractor = ResNetExtractor(preset)
            self.attention = Attention(EMBED_DIM, attention_dim) if pooling in ("sap", "asoft") else None
            self.head = SpeakerHead(n_speakers)

    def config(self):
        return {"n_speakers": self.n_speakers, "pooling": self.pooling, "preset": self.preset,
                "attention_dim": self.attention_dim, "gsoft_normalize": self.gsoft_normalize}

    @property
    def uses_posteriors(self):
        return self.pooling in ("gsoft", "asoft")

    def pool(self, H, q=None, mask=None):
        if self.uses_posteriors and q is None:
            raise ValueError(f"{self.pooling} pooling needs speech posteriors")
        if mask is not None:
            mode = {"tap": "tap", "gsoft": "tap", "sap": "sap", "asoft": "asoft"}[self.pooling]
            return pool_hard(H, mask, mode, self.attention, q)
        if self.pooling == "tap":
            return pool_tap(H)
        if self.pooling == "gsoft":
            return pool_gsoft(H, q, self.gsoft_normalize)
        alpha = attention_weights(H, self.attention)
        if self.pooling == "sap":
            return pool_sap(H, alpha)
        return pool_asoft(H, alpha, q)

    def forward(self, windows, q=None, mask=None, labels=None):
        """``windows`` is ``(..., T, d, w)``; returns (embedding, logits, loss)."""
        H = frame_features(self.extractor, windows)
        return embed_and_classify(self.pool(H, q, mask), self.head, labels)
