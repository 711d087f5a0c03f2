"""VAD pretraining, speaker-verification training and self-adaptive soft VAD
joint adaptation."""

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from softvad import checkpoint
from softvad.dataset import speaker_index
from softvad.embedder import SpeakerModel
from softvad.vad import VadNet, energy_vad, hard_decision, pseudo_labels, sp_loss, speech_posterior

log = logging.getLogger(__name__)

SELECTIONS = ("none", "energy", "dnn", "truth")
DA_MODES = ("none", "sp", "jl", "self-adaptive")
HISTORY_FIELDS = ["step", "epoch", "L_JL", "L_SP", "L_v", "L_s", "lr_v", "lr_s"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class HyperParams:
    lam: float = 2.0
    delta: float = 0.7
    lr_v: float = 1e-6
    lr_s: float = 0.1
    lr_vad_pretrain: float = 1e-5
    vad_batch: int = 512
    sv_batch: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    segment_len: int = 300
    epochs_vad: int = 10
    epochs_sv: int = 30
    epochs_adapt: int = 10
    hard_threshold: float = 0.5
    energy_percentile: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("loss weight lambda must be >= 0")
        if not 0.5 < self.delta < 1.0:
            raise ValueError("posterior threshold delta must lie in (0.5, 1)")
        if min(self.lr_v, self.lr_s, self.lr_vad_pretrain) < 0:
            raise ValueError("learning rates must be >= 0")
        if min(self.sv_batch, self.vad_batch, self.segment_len) < 1:
            raise ValueError("batch sizes and segment length must be >= 1")


@dataclass
class TrainState:
    vad: VadNet | None
    sv: SpeakerModel | None
    history: list = field(default_factory=list)
    epoch: int = 0
    optimizers: dict = field(default_factory=dict)

    def write_history(self, path, fields=HISTORY_FIELDS):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            w.writeheader()
            for row in self.history:
                w.writerow({k: ("" if row.get(k) is None else row[k]) for k in fields})


def crop_segment(x, length=300, rng=None):
    """Fixed-length slice along the first axis.

    Longer inputs get a uniformly random start; shorter ones are tiled from
    the first frame (wrap-around).
    """
    x = np.asarray(x) if not isinstance(x, torch.Tensor) else x
    T = x.shape[0]
    if T == 0:
        raise ValueError("cannot crop an empty feature matrix")
    if T >= length:
        start = 0 if T == length else int(rng.integers(0, T - length + 1))
        return x[start:start + length]
    return x[np.arange(length) % T]


def step_lr(base, epoch, total):
    """x0.1 at 50% and 75% of the epoch budget."""
    milestones = [max(1, round(0.5 * total)), max(1, round(0.75 * total))]
    return base * 0.1 ** sum(epoch >= m for m in milestones)


def _epoch_rng(seed, epoch, salt):
    return np.random.default_rng([seed, epoch, salt])


def _check_finite(values, epoch, step, utt_ids):
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingDiverged(f"non-finite {name}={v} at epoch {epoch} step {step}; "
                                   f"batch utterances: {', '.join(utt_ids[:8])}")


# ------------------------------------------------------------ VAD pretraining

def frames_from_utterances(utterances):
    wins, labs = [], []
    for u in utterances:
        if u.labels is None:
            continue
        wins.append(u.windows)
        labs.append(u.labels.astype(np.int64))
    if not wins:
        raise ValueError("no labeled frames for VAD training")
    return np.concatenate(wins), np.concatenate(labs)


def pretrain_vad(model: VadNet, windows, labels, hp: HyperParams, run_dir=None,
                 held_out=0.1):
    """Supervised frame-level training with Adam.

    Returns (model, history); history has one row per epoch, row 0 being
    the initialization.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("no labeled frames for VAD training")
    dtype = next(model.parameters()).dtype
    X = torch.as_tensor(np.asarray(windows), dtype=dtype)
    Y = torch.as_tensor(labels)
    order = np.random.default_rng([hp.seed, 7]).permutation(len(Y))
    n_held = int(round(held_out * len(Y)))
    held, train_idx = order[:n_held], order[n_held:]
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr_vad_pretrain)

    def evaluate():
        if n_held == 0:
            return float("nan"), float("nan")
        with torch.no_grad():
            logits = model(X[held])
            ce = F.cross_entropy(logits, Y[held]).item()
            acc = (logits.argmax(-1) == Y[held]).double().mean().item()
        return ce, acc

    ce, acc = evaluate()
    history = [{"epoch": 0, "train_ce": None, "heldout_ce": ce, "heldout_acc": acc}]
    for epoch in range(1, hp.epochs_vad + 1):
        rng = _epoch_rng(hp.seed, epoch, 1)
        perm = train_idx[rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        model.train()
        for i in range(0, len(perm), hp.vad_batch):
            b = torch.as_tensor(perm[i:i + hp.vad_batch])
            loss = F.cross_entropy(model(X[b]), Y[b])
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite VAD loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            count += len(b)
        ce, acc = evaluate()
        history.append({"epoch": epoch, "train_ce": total / max(count, 1),
                        "heldout_ce": ce, "heldout_acc": acc})
        log.info("vad epoch %d: train ce %.4f held-out ce %.4f acc %.3f",
                 epoch, total / max(count, 1), ce, acc)
        if run_dir is not None:
            checkpoint.save(Path(run_dir) / "checkpoints" / f"epoch-{epoch}.pt", {"vad": model},
                            extra={"epoch": epoch, "history": history, "hp": asdict(hp)})
    return model, history


# ------------------------------------------------------------ frame gating

def frame_gates(sv: SpeakerModel, vad: VadNet | None, windows, selection="none",
                labels=None, hp: HyperParams | None = None, grad_to_vad=False):
    """Speech posteriors and/or hard frame mask for a ``(..., T, d, w)`` batch.

    Returns (q, mask); either may be None. With ``grad_to_vad`` the
    posteriors stay attached to the VAD graph.
    """
    hp = hp or HyperParams()
    if selection not in SELECTIONS:
        raise ValueError(f"unknown frame selection {selection!r}")
    q = mask = None
    if sv.uses_posteriors or selection == "dnn":
        if vad is None:
            raise ValueError("this pooling mode needs a VAD model")
        if grad_to_vad:
            q = speech_posterior(vad, windows)
        else:
            with torch.no_grad():
                q = speech_posterior(vad, windows)
        q = q.to(next(sv.parameters()).dtype)
    if selection == "none":
        return q, None
    if selection == "dnn":
        mask = hard_decision(q, hp.hard_threshold)
        score = q.detach()
    elif selection == "energy":
        ctx = windows.shape[-1] // 2
        feats = np.asarray(windows[..., ctx].detach() if isinstance(windows, torch.Tensor)
                           else windows[..., ctx])
        flat = feats.reshape(-1, *feats.shape[-2:])
        mask = torch.as_tensor(np.stack([energy_vad(f, hp.energy_percentile) for f in flat])
                               .reshape(feats.shape[:-1]))
        score = torch.as_tensor(feats.sum(-1))
    else:
        if labels is None:
            raise ValueError("ground-truth frame selection needs frame labels")
        mask = torch.as_tensor(np.asarray(labels), dtype=torch.float64)
        score = mask.clone()
    # a segment with no selected frame keeps its highest-scoring frame
    mask = mask.reshape(-1, mask.shape[-1]).clone()
    score = score.reshape(-1, score.shape[-1])
    for r in range(mask.shape[0]):
        if not bool((mask[r] > 0.5).any()):
            mask[r, int(score[r].argmax())] = 1.0
    return q, mask.reshape(tuple(windows.shape[:-2]))


def _batches(n, size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _segments(utts, idx, length, rng):
    wins, labs = [], []
    for i in idx:
        u = utts[i]
        T = u.num_frames
        if T >= length:
            start = 0 if T == length else int(rng.integers(0, T - length + 1))
            sel = np.arange(start, start + length)
        else:
            sel = np.arange(length) % T
        wins.append(u.windows[sel])
        labs.append(u.labels[sel] if u.labels is not None else None)
    labels = np.stack(labs) if all(lab is not None for lab in labs) else None
    return np.stack(wins), labels


def _save_state(run_dir, state: TrainState, hp, extra_config=None):
    if run_dir is None:
        return
    run_dir = Path(run_dir)
    checkpoint.save(run_dir / "checkpoints" / f"epoch-{state.epoch}.pt",
                    {"sv": state.sv, "vad": state.vad}, config=extra_config,
                    extra={"epoch": state.epoch, "hp": asdict(hp), "history": state.history,
                           "optimizers": {k: o.state_dict() for k, o in state.optimizers.items()}})
    state.write_history(run_dir / "history.csv")


def _restore(state: TrainState, resume):
    payload = checkpoint.load(resume)
    for name in ("sv", "vad"):
        model = getattr(state, name)
        if model is not None and name in payload["models"]:
            dtype = next(model.parameters()).dtype
            model.load_state_dict(payload["models"][name]["state"])
            model.to(dtype)
    for k, o in state.optimizers.items():
        if k in payload["extra"].get("optimizers", {}):
            o.load_state_dict(payload["extra"]["optimizers"][k])
    state.epoch = payload["extra"]["epoch"]
    state.history = list(payload["extra"]["history"])


# ------------------------------------------------------------ SV training

def train_sv(sv: SpeakerModel, utterances, hp: HyperParams, vad: VadNet | None = None,
             selection="none", run_dir=None, resume=None, config=None) -> TrainState:
    """Speaker-classification training; the VAD, if any, stays frozen."""
    spk = speaker_index(utterances)
    if len(spk) < 2:
        raise ValueError("speaker verification training needs at least 2 speakers")
    if sv.n_speakers != len(spk):
        raise ValueError(f"model has {sv.n_speakers} outputs but data has {len(spk)} speakers")
    opt = torch.optim.SGD(sv.parameters(), lr=hp.lr_s, momentum=hp.momentum,
                          weight_decay=hp.weight_decay)
    state = TrainState(vad, sv, optimizers={"sv": opt})
    if resume is not None:
        _restore(state, resume)
    if vad is not None:
        vad.eval()
    step = len(state.history)
    for epoch in range(state.epoch + 1, hp.epochs_sv + 1):
        lr = step_lr(hp.lr_s, epoch - 1, hp.epochs_sv)
        for g in opt.param_groups:
            g["lr"] = lr
        rng = _epoch_rng(hp.seed, epoch, 2)
        sv.train()
        for idx in _batches(len(utterances), hp.sv_batch, rng):
            wins, labs = _segments(utterances, idx, hp.segment_len, rng)
            y = torch.as_tensor([spk[utterances[i].speaker_id] for i in idx])
            q, mask = frame_gates(sv, vad, wins, selection, labs, hp)
            X = torch.as_tensor(wins, dtype=next(sv.parameters()).dtype)
            _, _, loss = sv(X, q=q, mask=mask, labels=y)
            step += 1
            _check_finite({"L_s": loss.item()}, epoch, step,
                          [utterances[i].utterance_id for i in idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.history.append({"step": step, "epoch": epoch, "L_s": loss.item(), "lr_s": lr})
        state.epoch = epoch
        log.info("sv epoch %d: loss %.4f lr %.3g", epoch, state.history[-1]["L_s"], lr)
        _save_state(run_dir, state, hp, config)
    return state


# ------------------------------------------------------------ joint adaptation

def adapt_joint(vad: VadNet, sv: SpeakerModel, utterances, hp: HyperParams,
                da="self-adaptive", run_dir=None, resume=None, config=None) -> TrainState:
    """Self-adaptive soft VAD training loop.

    For every utterance: speech posteriors over the full utterance give
    confident pseudo-labels and the self-training loss L_SP; the speaker
    loss L_JL is computed on a fixed-length crop with posterior-weighted
    pooling. The VAD minimizes L_JL + lam * L_SP, the SV model L_JL.

    ``da`` selects the variant: ``self-adaptive`` (both terms), ``jl``
    (lam forced to 0) or ``sp`` (posteriors detached from the speaker
    path, so only lam * L_SP reaches the VAD).
    """
    if da not in ("sp", "jl", "self-adaptive"):
        raise ValueError(f"unknown domain adaptation mode {da!r}")
    if not sv.uses_posteriors:
        raise ValueError("joint learning requires a soft path (gsoft or asoft pooling)")
    lam = 0.0 if da == "jl" else hp.lam
    spk = speaker_index(utterances)
    if sv.n_speakers != len(spk):
        raise ValueError(f"model has {sv.n_speakers} outputs but data has {len(spk)} speakers")
    opt_s = torch.optim.SGD(sv.parameters(), lr=hp.lr_s, momentum=hp.momentum,
                            weight_decay=hp.weight_decay)
    opt_v = torch.optim.SGD(vad.parameters(), lr=hp.lr_v, momentum=hp.momentum,
                            weight_decay=hp.weight_decay)
    state = TrainState(vad, sv, optimizers={"sv": opt_s, "vad": opt_v})
    if resume is not None:
        _restore(state, resume)
    dtype = next(sv.parameters()).dtype
    step = len(state.history)
    for epoch in range(state.epoch + 1, hp.epochs_adapt + 1):
        lr_s = step_lr(hp.lr_s, epoch - 1, hp.epochs_adapt)
        for g in opt_s.param_groups:
            g["lr"] = lr_s
        rng = _epoch_rng(hp.seed, epoch, 3)
        sv.train()
        vad.train()
        for idx in _batches(len(utterances), hp.sv_batch, rng):
            batch = [utterances[i] for i in idx]
            l_sp = []
            for u in batch:
                full = u.windows
                with torch.no_grad():
                    q_full = speech_posterior(vad, full)
                pseudo = pseudo_labels(q_full, hp.delta)
                l_sp.append(sp_loss(vad, full, pseudo) if len(pseudo)
                            else torch.zeros((), dtype=dtype))
            L_SP = torch.stack([x.to(dtype) for x in l_sp]).mean()

            wins, _ = _segments(utterances, idx, hp.segment_len, rng)
            X = torch.as_tensor(wins, dtype=dtype)
            q = speech_posterior(vad, X).to(dtype)
            if da == "sp":
                q = q.detach()
            y = torch.as_tensor([spk[u.speaker_id] for u in batch])
            _, _, L_JL = sv(X, q=q, labels=y)
            L_v = L_JL + lam * L_SP
            step += 1
            row = {"step": step, "epoch": epoch, "L_JL": L_JL.item(), "L_SP": L_SP.item(),
                   "L_v": L_v.item(), "L_s": L_JL.item(), "lr_v": hp.lr_v, "lr_s": lr_s}
            _check_finite({k: row[k] for k in ("L_JL", "L_SP", "L_v")}, epoch, step,
                          [u.utterance_id for u in batch])
            opt_s.zero_grad()
            opt_v.zero_grad()
            # L_SP does not depend on the SV parameters, so one backward pass
            # yields grad(L_v) for the VAD and grad(L_JL) for the SV model
            L_v.backward()
            opt_v.step()
            opt_s.step()
            state.history.append(row)
        state.epoch = epoch
        log.info("adapt epoch %d: L_JL %.4f L_SP %.4f", epoch,
                 state.history[-1]["L_JL"], state.history[-1]["L_SP"])
        _save_state(run_dir, state, hp, config)
    return state


def clone_models(*models):
    return [copy.deepcopy(m) if m is not None else None for m in models]
