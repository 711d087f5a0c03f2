"""Synthetic voices and noise types.

Voices are glottal pulse trains shaped by per-speaker formant resonators, cut
into syllables separated by pauses so every utterance contains real
speech/non-speech structure. Noise generators stand in for recorded in-door
noise databases.
"""

import numpy as np
from scipy import signal

# Reference vowel formants (Hz) for an average adult vocal tract.
_VOWELS = np.array([
    [730.0, 1090.0, 2440.0],   # a
    [270.0, 2290.0, 3010.0],   # i
    [300.0, 870.0, 2240.0],    # u
    [530.0, 1840.0, 2480.0],   # e
    [570.0, 840.0, 2410.0],    # o
])
_BANDWIDTHS = np.array([80.0, 110.0, 160.0])


class Voice:
    """Fixed acoustic identity of one synthetic speaker."""

    def __init__(self, seed):
        rng = np.random.default_rng(seed)
        self.f0 = rng.uniform(85.0, 260.0)
        self.tract_scale = rng.uniform(0.8, 1.25)
        jitter = rng.uniform(0.92, 1.08, size=_VOWELS.shape)
        self.formants = _VOWELS * self.tract_scale * jitter
        self.bandwidths = _BANDWIDTHS * rng.uniform(0.8, 1.3, size=3)
        self.tilt = rng.uniform(0.85, 0.97)
        self.rate = rng.uniform(0.8, 1.2)

    def utterance(self, duration_s, sample_rate, rng):
        """Render about `duration_s` seconds of syllabic speech."""
        n = int(round(duration_s * sample_rate))
        out = np.zeros(n)
        pos = int(rng.uniform(0.02, 0.15) * sample_rate)
        while pos < n:
            syl = int(rng.uniform(0.12, 0.30) / self.rate * sample_rate)
            syl = min(syl, n - pos)
            if syl < int(0.04 * sample_rate):
                break
            vowel = rng.integers(len(self.formants))
            f0 = self.f0 * rng.uniform(0.9, 1.1)
            seg = self._syllable(syl, f0, self.formants[vowel], sample_rate, rng)
            out[pos:pos + syl] += seg
            gap = rng.uniform(0.03, 0.12) if rng.random() < 0.75 else rng.uniform(0.2, 0.45)
            pos += syl + int(gap / self.rate * sample_rate)
        peak = np.max(np.abs(out))
        return out if peak == 0 else 0.5 * out / peak

    def _syllable(self, n, f0, formants, sr, rng):
        t = np.arange(n) / sr
        contour = f0 * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(1, 4) * t
                                             + rng.uniform(0, 2 * np.pi)))
        contour *= np.linspace(1.05, 0.95, n)
        phase = np.cumsum(contour / sr)
        pulses = np.diff(np.floor(phase), prepend=0.0)
        src = signal.lfilter([1.0], [1.0, -self.tilt], pulses)
        src += 0.02 * rng.standard_normal(n)
        y = src
        for fc, bw in zip(formants, self.bandwidths):
            fc = min(fc, 0.45 * sr)
            r = np.exp(-np.pi * bw / sr)
            a = [1.0, -2 * r * np.cos(2 * np.pi * fc / sr), r * r]
            y = signal.lfilter([1.0 - r], a, y)
        ramp = min(int(0.02 * sr), n // 2)
        env = np.ones(n)
        if ramp > 0:
            edge = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
            env[:ramp] = edge
            env[n - ramp:] = edge[::-1]
        y = y * env
        peak = np.max(np.abs(y))
        return y / peak if peak > 0 else y


def white(n, sr, rng):
    return rng.standard_normal(n)


def pink(n, sr, rng):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=float)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def brown(n, sr, rng):
    x = np.cumsum(rng.standard_normal(n))
    return signal.lfilter([1.0, -1.0], [1.0, -0.995], x)


def am_tone(n, sr, rng):
    """Sum of slowly amplitude-modulated tones (music-like)."""
    t = np.arange(n) / sr
    x = np.zeros(n)
    for _ in range(4):
        f = rng.uniform(150.0, 2500.0)
        am = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.5, 4.0) * t + rng.uniform(0, 2 * np.pi))
        x += am * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return x + 0.05 * rng.standard_normal(n)


def hum(n, sr, rng):
    """Mains-style harmonic hum over a low noise bed (appliance-like)."""
    t = np.arange(n) / sr
    base = rng.choice([50.0, 60.0])
    x = sum(np.sin(2 * np.pi * base * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 6))
    return x + 0.1 * brown(n, sr, rng) / 20.0


def beeps(n, sr, rng):
    """Intermittent two-tone bursts (ringtone-like)."""
    t = np.arange(n) / sr
    period = rng.uniform(0.4, 1.0)
    gate = ((t / period) % 1.0) < 0.5
    f1, f2 = rng.uniform(600, 1800, size=2)
    x = gate * (np.sin(2 * np.pi * f1 * t) + np.sin(2 * np.pi * f2 * t))
    return x + 0.01 * rng.standard_normal(n)


def babble(n, sr, rng, talkers=4):
    x = np.zeros(n)
    for _ in range(talkers):
        voice = Voice(int(rng.integers(2**31)))
        x += voice.utterance(n / sr, sr, rng)[:n]
    return x


NOISES = {
    "white": white,
    "pink": pink,
    "brown": brown,
    "am_tone": am_tone,
    "hum": hum,
    "beeps": beeps,
    "babble": babble,
}


def make_noise(kind, n, sr, rng):
    try:
        gen = NOISES[kind]
    except KeyError:
        raise ValueError(f"unknown noise type {kind!r}; choose from {sorted(NOISES)}") from None
    x = gen(n, sr, rng)
    return x - x.mean()
