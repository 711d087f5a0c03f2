"""Enrollment, cosine scoring, EER / AUC and experiment harnesses."""

import copy
import csv
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.stats import rankdata

from softvad.corpus import Trial, TrialList
from softvad.train import HyperParams, adapt_joint, frame_gates
from softvad.vad import speech_posterior

# Best values reported for the adapted system on the original corpus; kept as
# plot annotations only.
REFERENCE_POINTS = {
    "best_auc": {"lam": 1.5, "auc_percent": 97.44},
    "best_eer": {"lam": 2.0, "eer_percent": 9.21, "auc_percent": 97.41},
    "pretrained_auc_percent": 91.58,
}


def length_normalize(e):
    e = np.asarray(e, dtype=np.float64)
    norm = np.linalg.norm(e)
    if norm == 0:
        raise ValueError("cannot length-normalize a zero vector")
    return e / norm


def enroll(embeddings):
    """Mean of length-normalized embeddings, renormalized."""
    if len(embeddings) == 0:
        raise ValueError("enrollment needs at least one embedding")
    mean = np.mean([length_normalize(e) for e in embeddings], axis=0)
    return length_normalize(mean)


def cosine_score(a, b):
    return float(np.dot(a, b))


def _split_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative examples")
    return scores, labels, n_pos, n_neg


def det_points(scores, labels):
    """Operating points (thresholds, FAR, FRR) over every distinct decision.

    Thresholds are: below the lowest score, each midpoint between
    consecutive distinct scores, and above the highest. A trial is accepted
    when its score is >= the threshold.
    """
    scores, labels, n_pos, n_neg = _split_scores(scores, labels)
    uniq = np.unique(scores)
    thresholds = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + 1.0]])
    order = np.argsort(scores, kind="stable")
    s_sorted, l_sorted = scores[order], labels[order]
    # number of trials with score < threshold
    below = np.searchsorted(s_sorted, thresholds, side="left")
    tar_below = np.concatenate([[0], np.cumsum(l_sorted)])[below]
    imp_below = below - tar_below
    far = (n_neg - imp_below) / n_neg
    frr = tar_below / n_pos
    return thresholds, far, frr


def interpolate_eer(thresholds, far, frr):
    """Linear interpolation at the first sign change of FAR - FRR."""
    d = far - frr
    for i in range(len(d)):
        if d[i] == 0:
            return 100.0 * far[i], float(thresholds[i])
        if i + 1 < len(d) and d[i] > 0 > d[i + 1]:
            t = d[i] / (d[i] - d[i + 1])
            eer = far[i] + t * (far[i + 1] - far[i])
            return 100.0 * eer, float(thresholds[i] + t * (thresholds[i + 1] - thresholds[i]))
    raise AssertionError("FAR - FRR never changes sign")  # FAR=1,FRR=0 ... FAR=0,FRR=1


def eer(scores, labels):
    """Equal error rate in percent and the threshold where it occurs."""
    return interpolate_eer(*det_points(scores, labels))


def auc(scores, labels):
    """ROC area in percent: P(speech > non-speech) + half the tie probability."""
    scores, labels, n_pos, n_neg = _split_scores(scores, labels)
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


# ------------------------------------------------------------ trial scoring

@dataclass
class MetricReport:
    eer_percent: float
    threshold_at_eer: float
    auc_percent: float | None
    n_target: int
    n_impostor: int
    fingerprint: str

    def __post_init__(self):
        if not 0.0 <= self.eer_percent <= 100.0:
            raise ValueError("EER outside [0, 100]")
        if self.auc_percent is not None and not 0.0 <= self.auc_percent <= 100.0:
            raise ValueError("AUC outside [0, 100]")


def _chunked_posterior(vad, windows, chunk=4096):
    out = [speech_posterior(vad, windows[i:i + chunk]) for i in range(0, len(windows), chunk)]
    return torch.cat(out)


@torch.no_grad()
def embed_utterances(sv, vad, utterances, selection="none", hp: HyperParams | None = None):
    """Full-length, length-normalized embeddings keyed by utterance id."""
    sv.eval()
    if vad is not None:
        vad.eval()
    dtype = next(sv.parameters()).dtype
    out = {}
    for u in utterances:
        W = u.windows
        q, mask = frame_gates(sv, vad, W[None], selection,
                              None if u.labels is None else u.labels[None], hp)
        H = sv.extractor(torch.as_tensor(W, dtype=dtype))[None]
        y, _ = sv.head(sv.pool(H, q, mask))
        out[u.utterance_id] = length_normalize(y[0].double().numpy())
    return out


def score_trials(embeddings, trials: TrialList):
    models = {spk: enroll([embeddings[u] for u in utts]) for spk, utts in trials.enrollment.items()}
    return [(t, cosine_score(models[t.enroll_speaker_id], embeddings[t.test_utterance_id]))
            for t in trials.trials]


@torch.no_grad()
def vad_auc(vad, utterances):
    """Frame-level AUC of the VAD over every labeled utterance."""
    qs, labs = [], []
    vad.eval()
    for u in utterances:
        if u.labels is None:
            continue
        qs.append(_chunked_posterior(vad, torch.as_tensor(u.windows)).double().numpy())
        labs.append(u.labels.astype(bool))
    if not qs:
        return None
    labels = np.concatenate(labs)
    if labels.all() or not labels.any():
        return None
    return auc(np.concatenate(qs), labels)


def run_trials(sv, vad, utterances, trials: TrialList, selection="none",
               hp: HyperParams | None = None):
    """Score every trial; returns (MetricReport, scores).

    Embeddings use full utterances. The VAD AUC covers every labeled
    utterance passed in, not only those referenced by trials.
    """
    needed = {t.test_utterance_id for t in trials.trials}
    needed |= {u for utts in trials.enrollment.values() for u in utts}
    pool = [u for u in utterances if u.utterance_id in needed]
    missing = needed - {u.utterance_id for u in pool}
    if missing:
        raise ValueError(f"trials reference {len(missing)} utterances not loaded, "
                         f"e.g. {sorted(missing)[0]}")
    emb = embed_utterances(sv, vad, pool, selection, hp)
    scores = score_trials(emb, trials)
    values = [s for _, s in scores]
    labels = [t.is_target for t, _ in scores]
    eer_pct, thr = eer(values, labels)
    auc_pct = vad_auc(vad, utterances) if vad is not None else None
    h = hashlib.sha256()
    for name, m in (("sv", sv), ("vad", vad)):
        if m is not None:
            for k, v in sorted(m.state_dict().items()):
                h.update(name.encode() + k.encode() + v.detach().contiguous().numpy().tobytes())
    h.update(selection.encode())
    report = MetricReport(eer_pct, thr, auc_pct, sum(labels), len(labels) - sum(labels),
                          h.hexdigest()[:16])
    return report, scores


def write_scores(path, scores):
    with open(path, "w") as fh:
        for t, s in scores:
            tag = "target" if t.is_target else "nontarget"
            fh.write(f"{t.enroll_speaker_id} {t.test_utterance_id} {s:.8f} {tag}\n")


def read_scores(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                spk, utt, s, tag = line.split()
                out.append((Trial(spk, utt, tag == "target"), float(s)))
    return out


REPORT_FIELDS = ["DA", "Pooling", "VAD type", "EER (%)", "AUC (%)", "threshold",
                 "n_target", "n_impostor", "fingerprint"]


def report_row(report: MetricReport, da, pooling, vad_type):
    return {"DA": da, "Pooling": pooling, "VAD type": vad_type,
            "EER (%)": f"{report.eer_percent:.4f}",
            "AUC (%)": "" if report.auc_percent is None else f"{report.auc_percent:.4f}",
            "threshold": f"{report.threshold_at_eer:.6f}",
            "n_target": report.n_target, "n_impostor": report.n_impostor,
            "fingerprint": report.fingerprint}


def write_report(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        w.writerows(rows)


# ------------------------------------------------------------ lambda sweep

def lambda_sweep(vad0, sv0, train_utts, eval_utts, trials, hp: HyperParams, lambdas,
                 run_dir=None):
    """Adapt from the same starting checkpoints once per loss weight.

    Returns rows of {lam, eer_percent, auc_percent}; with ``run_dir`` also
    writes ``sweep.csv``, ``sweep.json`` and ``sweep.png``.
    """
    if len(lambdas) == 0:
        raise ValueError("lambda sweep needs at least one value")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("loss weights must be >= 0")
    rows = []
    for lam in lambdas:
        vad, sv = copy.deepcopy(vad0), copy.deepcopy(sv0)
        run_hp = HyperParams(**{**asdict(hp), "lam": float(lam)})
        adapt_joint(vad, sv, train_utts, run_hp, da="self-adaptive")
        report, _ = run_trials(sv, vad, eval_utts, trials, "none", run_hp)
        rows.append({"lam": float(lam), "eer_percent": report.eer_percent,
                     "auc_percent": report.auc_percent})
    if run_dir is not None:
        from pathlib import Path

        from softvad import plotting
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["lam", "eer_percent", "auc_percent"])
            w.writeheader()
            w.writerows(rows)
        (run_dir / "sweep.json").write_text(json.dumps(
            {"rows": rows, "reference": REFERENCE_POINTS}, indent=2))
        plotting.plot_lambda_sweep(rows, run_dir / "sweep.png", reference=REFERENCE_POINTS)
    return rows
