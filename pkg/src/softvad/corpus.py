"""Simulated noisy speech corpus: silence insertion, SNR mixing, clean-speech
frame labels, manifests and trial lists."""

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from softvad import synth

SPLITS = ("train", "enroll", "test")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"waveform must be mono (1-d), got shape {x.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def read_wav(path):
    sr, data = wavfile.read(path)
    if data.ndim > 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    else:
        x = data.astype(np.float64)
    return Waveform(x, int(sr))


def write_wav(path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)


def insert_silence(w: Waveform, lead_s: float, trail_s: float) -> Waveform:
    if lead_s < 0 or trail_s < 0:
        raise ValueError("silence durations must be non-negative")
    lead = int(round(lead_s * w.sample_rate))
    trail = int(round(trail_s * w.sample_rate))
    return Waveform(np.concatenate([np.zeros(lead), w.samples, np.zeros(trail)]), w.sample_rate)


def _frame_length(sample_rate, ms):
    return int(round(sample_rate * ms / 1000.0))


def frame_energies(x, frame_len, hop):
    """Sum of squares over each full frame; partial trailing frames are dropped."""
    n_frames = (len(x) - frame_len) // hop + 1
    if len(x) < frame_len or n_frames < 1:
        raise ValueError(f"signal of {len(x)} samples is shorter than one frame ({frame_len})")
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n_frames]
    return np.einsum("ij,ij->i", frames, frames)


def active_power(w: Waveform, frame_ms=25.0, hop_ms=10.0, rel_floor=1e-4):
    """Mean power over frames whose energy exceeds `rel_floor` of the loudest frame.

    Zero-padded silence therefore does not dilute the estimate.
    """
    flen = _frame_length(w.sample_rate, frame_ms)
    hop = _frame_length(w.sample_rate, hop_ms)
    if len(w) < flen:
        return float(np.mean(w.samples ** 2)) if len(w) else 0.0
    e = frame_energies(w.samples, flen, hop)
    peak = e.max()
    if peak == 0:
        return 0.0
    return float(np.mean(e[e > rel_floor * peak]) / flen)


def fit_noise(noise: np.ndarray, n: int, rng) -> np.ndarray:
    """Randomly crop, or tile then crop, `noise` to exactly `n` samples."""
    if len(noise) == 0:
        raise ValueError("degenerate noise: empty signal")
    if len(noise) < n:
        noise = np.tile(noise, -(-n // len(noise)) + 1)
    start = int(rng.integers(0, len(noise) - n + 1))
    return noise[start:start + n]


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float, rng,
               reference_power: float | None = None) -> Waveform:
    """Add `noise` to `speech` scaled to the requested SNR.

    The speech power is measured over its active frames unless
    `reference_power` is given (e.g. from the clean signal before silence
    insertion).
    """
    if speech.sample_rate != noise.sample_rate:
        raise ValueError(f"sample-rate mismatch: speech {speech.sample_rate} Hz, "
                         f"noise {noise.sample_rate} Hz")
    n = fit_noise(noise.samples, len(speech), rng)
    p_noise = float(np.mean(n ** 2)) if len(n) else 0.0
    if p_noise <= 0:
        raise ValueError("degenerate noise: zero power")
    p_speech = active_power(speech) if reference_power is None else reference_power
    gain = np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(speech.samples + gain * n, speech.sample_rate)


def label_from_clean(clean: Waveform, frame_ms=25.0, hop_ms=10.0,
                     energy_percentile=30.0, hangover_frames=8) -> np.ndarray:
    """Speech/non-speech frame labels (1/0) computed from noise-free audio.

    Energy-threshold stand-in for a statistical VAD: frames above
    `rel_floor` of the peak are active; active frames whose log energy
    reaches the `energy_percentile` of the active set are speech, and each
    speech frame keeps the next `hangover_frames` frames as speech.
    """
    flen = _frame_length(clean.sample_rate, frame_ms)
    hop = _frame_length(clean.sample_rate, hop_ms)
    e = frame_energies(clean.samples, flen, hop)
    labels = np.zeros(len(e), dtype=np.uint8)
    peak = e.max()
    if peak == 0:
        return labels
    active = e > 1e-4 * peak
    log_e = np.full(len(e), -np.inf)
    log_e[active] = np.log10(e[active])
    threshold = np.percentile(log_e[active], energy_percentile)
    # tolerance absorbs rounding between frames of equal true energy
    raw = active & (log_e >= threshold - 1e-9)
    hold = 0
    for t in range(len(e)):
        if raw[t]:
            labels[t] = 1
            hold = hangover_frames
        elif hold > 0:
            labels[t] = 1
            hold -= 1
    return labels


def write_labels(path, labels):
    Path(path).write_text("".join("1" if v else "0" for v in labels) + "\n")


def read_labels(path):
    text = Path(path).read_text().strip()
    if set(text) - {"0", "1"}:
        raise ValueError(f"{path}: frame labels must be a string of 0/1")
    return np.frombuffer(text.encode(), dtype=np.uint8) - ord("0")


# ---------------------------------------------------------------- manifests

@dataclass
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    split: str
    audio_path: str
    clean_path: str | None
    noise_type: str
    snr_db: float
    label_path: str | None


@dataclass
class CorpusManifest:
    utterances: list[UtteranceRecord] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        self.validate()

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def validate(self):
        ids = [u.utterance_id for u in self.utterances]
        if len(ids) != len(set(ids)):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate utterance ids: {dup[:5]}")
        for u in self.utterances:
            if u.split not in SPLITS:
                raise ValueError(f"{u.utterance_id}: unknown split {u.split!r}")
            if u.split in ("test", "enroll") and not u.clean_path:
                raise ValueError(f"{u.utterance_id}: {u.split} utterances need a clean_path")

    def select(self, *splits):
        return [u for u in self.utterances if u.split in splits]

    def speakers(self, *splits):
        recs = self.select(*splits) if splits else self.utterances
        return sorted({u.speaker_id for u in recs})

    def by_id(self):
        return {u.utterance_id: u for u in self.utterances}

    def resolve(self, rel):
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for u in self.utterances:
                fh.write(json.dumps(asdict(u)) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        path = Path(path)
        recs = []
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    recs.append(UtteranceRecord(**json.loads(line)))
                except (TypeError, json.JSONDecodeError) as exc:
                    raise ValueError(f"{path}:{n}: bad manifest record ({exc})") from None
        return cls(recs, root=path.parent)


# ------------------------------------------------------------ corpus synthesis

@dataclass
class SplitConfig:
    name: str = "train"
    n_speakers: int = 550
    utts_per_speaker: int = 200
    noises: list[str] = field(default_factory=lambda: ["brown", "hum", "beeps"])
    snr_range: list[float] | None = field(default_factory=lambda: [0.0, 10.0])
    snr_set: list[float] | None = None
    silence_s: float = 0.0
    speaker_prefix: str = "tr"


@dataclass
class CorpusConfig:
    sample_rate: int = 16000
    duration_range: list[float] = field(default_factory=lambda: [6.0, 14.0])
    splits: list[SplitConfig] = field(default_factory=lambda: [
        SplitConfig(),
        SplitConfig(name="test", n_speakers=105, utts_per_speaker=24,
                    noises=["white", "pink", "am_tone"], snr_range=None,
                    snr_set=[0.0, 5.0, 10.0], silence_s=2.0, speaker_prefix="te"),
    ])

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["splits"] = [SplitConfig(**s) for s in d.get("splits", [])]
        return cls(**d)


def _stable_seed(seed, key):
    return np.random.SeedSequence([int(seed), zlib.crc32(key.encode())])


def _plan(config: CorpusConfig, seed: int):
    """Draw every per-utterance choice; returns (records, silence per utterance)."""
    rng = np.random.default_rng(seed)
    records, silences = [], []
    for sc in config.splits:
        if sc.name not in ("train", "test"):
            raise ValueError(f"split {sc.name!r}: corpus splits are 'train' or 'test'")
        if not sc.noises:
            raise ValueError(f"split {sc.name!r}: empty noise inventory")
        for kind in sc.noises:
            if kind not in synth.NOISES:
                raise ValueError(f"split {sc.name!r}: unknown noise type {kind!r}")
        if (sc.snr_range is None) == (sc.snr_set is None):
            raise ValueError(f"split {sc.name!r}: give exactly one of snr_range / snr_set")
        for s in range(sc.n_speakers):
            spk = f"spk-{sc.speaker_prefix}{s:04d}"
            for u in range(sc.utts_per_speaker):
                uid = f"{spk}-{u:04d}"
                noise = sc.noises[int(rng.integers(len(sc.noises)))]
                if sc.snr_set is not None:
                    snr = float(sc.snr_set[int(rng.integers(len(sc.snr_set)))])
                else:
                    snr = float(np.round(rng.uniform(*sc.snr_range), 3))
                records.append(UtteranceRecord(
                    utterance_id=uid, speaker_id=spk, split=sc.name,
                    audio_path=f"audio/{uid}.wav", clean_path=f"clean/{uid}.wav",
                    noise_type=noise, snr_db=snr, label_path=f"labels/{uid}.txt"))
                silences.append(sc.silence_s)
    return records, silences


def render_utterance(rec: UtteranceRecord, silence_s, config: CorpusConfig, seed):
    """Synthesize (clean, noisy, labels) for one planned record.

    Depends only on (record, seed), so utterances can be rendered in any
    order or in parallel.
    """
    sr = config.sample_rate
    voice = synth.Voice(_stable_seed(seed, "voice:" + rec.speaker_id))
    rng = np.random.default_rng(_stable_seed(seed, "utt:" + rec.utterance_id))
    dur = rng.uniform(*config.duration_range)
    speech = Waveform(voice.utterance(dur, sr, rng), sr)
    ref = active_power(speech)
    clean = insert_silence(speech, silence_s, silence_s)
    noise = Waveform(synth.make_noise(rec.noise_type, len(clean), sr, rng), sr)
    noisy = mix_at_snr(clean, noise, rec.snr_db, rng, reference_power=ref)
    peak = np.max(np.abs(noisy.samples))
    if peak > 0.99:
        noisy = Waveform(noisy.samples * (0.99 / peak), sr)
    return clean, noisy, label_from_clean(clean)


def synth_corpus(config: CorpusConfig, seed: int, out_dir=None) -> CorpusManifest:
    """Plan (and, with `out_dir`, render) a simulated corpus.

    Without `out_dir` only the manifest is produced; the audio paths are
    relative to wherever the corpus is later rendered.
    """
    records, silences = _plan(config, seed)
    manifest = CorpusManifest(records)
    if out_dir is None:
        return manifest
    out = Path(out_dir)
    for sub in ("audio", "clean", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for rec, sil in zip(records, silences):
        clean, noisy, labels = render_utterance(rec, sil, config, seed)
        write_wav(out / rec.audio_path, noisy)
        write_wav(out / rec.clean_path, clean)
        write_labels(out / rec.label_path, labels)
    manifest.root = out
    return manifest


# ------------------------------------------------------------------ trials

@dataclass(frozen=True)
class Trial:
    enroll_speaker_id: str
    test_utterance_id: str
    is_target: bool


@dataclass
class TrialList:
    trials: list[Trial]
    enrollment: dict[str, list[str]]

    def __len__(self):
        return len(self.trials)

    def validate(self, manifest: CorpusManifest | None = None):
        if not any(t.is_target for t in self.trials) or all(t.is_target for t in self.trials):
            raise ValueError("trial list needs at least one target and one impostor trial")
        if manifest is not None:
            ids = manifest.by_id()
            for t in self.trials:
                if t.test_utterance_id not in ids:
                    raise ValueError(f"trial references unknown utterance {t.test_utterance_id}")
                if t.enroll_speaker_id not in self.enrollment:
                    raise ValueError(f"trial references unenrolled speaker {t.enroll_speaker_id}")
            for spk, utts in self.enrollment.items():
                for u in utts:
                    if u not in ids:
                        raise ValueError(f"enrollment of {spk} references unknown utterance {u}")

    def write(self, trial_path, enroll_path):
        with open(trial_path, "w") as fh:
            for t in self.trials:
                tag = "target" if t.is_target else "nontarget"
                fh.write(f"{t.enroll_speaker_id} {t.test_utterance_id} {tag}\n")
        with open(enroll_path, "w") as fh:
            for spk in sorted(self.enrollment):
                for u in self.enrollment[spk]:
                    fh.write(f"{spk} {u}\n")

    @classmethod
    def read(cls, trial_path, enroll_path):
        trials = []
        for n, line in enumerate(Path(trial_path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise ValueError(f"{trial_path}:{n}: expected '<speaker> <utterance> target|nontarget'")
            trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
        enrollment: dict[str, list[str]] = {}
        for line in Path(enroll_path).read_text().splitlines():
            if line.strip():
                spk, utt = line.split()
                enrollment.setdefault(spk, []).append(utt)
        return cls(trials, enrollment)


def make_trials(manifest: CorpusManifest, n_enroll=12, n_target=12, n_impostor=12,
                seed=0) -> TrialList:
    """Per test speaker: enrollment set, same-speaker and different-speaker trials.

    Enrollment utterances never appear on the test side of any trial.
    """
    if n_target == 0 and n_impostor == 0:
        raise ValueError("empty trial list")
    rng = np.random.default_rng(seed)
    by_spk: dict[str, list[str]] = {}
    for u in manifest.select("test", "enroll"):
        by_spk.setdefault(u.speaker_id, []).append(u.utterance_id)
    speakers = sorted(by_spk)
    if n_impostor > 0 and len(speakers) < 2:
        raise ValueError("impostor trials need at least two test speakers")
    enrollment, remaining = {}, {}
    for spk in speakers:
        utts = sorted(by_spk[spk])
        if len(utts) < n_enroll + n_target:
            raise ValueError(f"speaker {spk} has {len(utts)} utterances; "
                             f"need {n_enroll + n_target} (enroll + target)")
        order = [utts[i] for i in rng.permutation(len(utts))]
        enrollment[spk] = order[:n_enroll]
        remaining[spk] = order[n_enroll:]
    trials = []
    for spk in speakers:
        for u in remaining[spk][:n_target]:
            trials.append(Trial(spk, u, True))
        others = [u for s in speakers if s != spk for u in remaining[s]]
        if n_impostor > len(others):
            raise ValueError(f"speaker {spk}: only {len(others)} impostor utterances available")
        for i in rng.choice(len(others), size=n_impostor, replace=False):
            trials.append(Trial(spk, others[int(i)], False))
    tl = TrialList(trials, enrollment)
    tl.validate(manifest)
    return tl


def mark_enrollment(manifest: CorpusManifest, trials: TrialList) -> CorpusManifest:
    enrolled = {u for utts in trials.enrollment.values() for u in utts}
    recs = []
    for u in manifest.utterances:
        if u.utterance_id in enrolled:
            u = UtteranceRecord(**{**asdict(u), "split": "enroll"})
        recs.append(u)
    return CorpusManifest(recs, root=manifest.root)
