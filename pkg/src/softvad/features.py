"""40-dim log-Mel filterbank features and per-frame context windows.

Feature matrices are plain ``(T, 40)`` float arrays (25 ms frames, 10 ms
shift); windowed features are ``(T, 40, 2k+1)`` stacks.
"""

from functools import lru_cache
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
FRAME_LEN = 400   # 25 ms
HOP = 160         # 10 ms
N_FFT = 512
N_MELS = 40
LOG_FLOOR = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE,
                   fmin=0.0, fmax=None):
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def num_frames(num_samples):
    return (num_samples - FRAME_LEN) // HOP + 1


def fbank(samples, sample_rate=SAMPLE_RATE):
    """Log-Mel energies, one row per 25 ms frame.

    Energies are clamped at ``LOG_FLOOR`` before the log so silent frames
    stay finite.
    """
    if hasattr(samples, "samples"):
        samples, sample_rate = samples.samples, samples.sample_rate
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < FRAME_LEN:
        raise ValueError(f"audio too short for one frame: {len(x)} < {FRAME_LEN} samples")
    T = num_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, FRAME_LEN)[::HOP][:T]
    spec = np.fft.rfft(frames * np.hamming(FRAME_LEN), N_FFT)
    power = spec.real ** 2 + spec.imag ** 2
    energies = power @ mel_filterbank().T
    return np.log(np.maximum(energies, LOG_FLOOR))


def mean_normalize(feats):
    feats = np.asarray(feats, dtype=np.float64)
    return feats - feats.mean(axis=0, keepdims=True)


def context_windows(feats, k=5):
    """Stack frames t-k..t+k around every frame; edges are replicated.

    Returns an array of shape ``(T, d, 2k+1)``.
    """
    if k < 0:
        raise ValueError("context half-width k must be >= 0")
    feats = np.asarray(feats)
    T = feats.shape[0]
    idx = np.clip(np.arange(T)[:, None] + np.arange(-k, k + 1)[None, :], 0, T - 1)
    return np.ascontiguousarray(feats[idx].transpose(0, 2, 1))


def extract(samples, sample_rate=SAMPLE_RATE):
    """Waveform -> mean-normalized log-Mel features."""
    return mean_normalize(fbank(samples, sample_rate))


# Binary cache: int32 T, int32 d, then T*d little-endian float32, row-major.

def write_feature_cache(path, feats):
    feats = np.asarray(feats)
    T, d = feats.shape
    with open(path, "wb") as fh:
        fh.write(np.array([T, d], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_feature_cache(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated feature cache header")
    T, d = np.frombuffer(raw[:8], dtype="<i4")
    body = np.frombuffer(raw[8:], dtype="<f4")
    if body.size != T * d:
        raise ValueError(f"{path}: header says {T}x{d} but holds {body.size} values")
    return body.reshape(T, d).astype(np.float64)
