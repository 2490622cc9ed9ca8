"""Synthetic corpora for smoke runs and tests."""

import numpy as np

from .rng import stream
from .token_codec import Waveform

# A-minor pentatonic, 220-880 Hz
NOTES_HZ = (220.0, 261.63, 293.66, 329.63, 392.0, 440.0, 523.25, 587.33, 659.25, 783.99, 880.0)


def tone(freq, duration, sample_rate=16000, amplitude=0.5, phase=0.0):
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t + phase), sample_rate)


def tone_mixture(duration, sample_rate=16000, rng=None, note_seconds=0.5):
    """Piecewise-stationary note sequence: each note is 1-3 harmonics of a pentatonic pitch."""
    rng = rng if rng is not None else np.random.default_rng()
    n = int(round(duration * sample_rate))
    seg = int(round(note_seconds * sample_rate))
    out = np.zeros(n)
    t = np.arange(seg) / sample_rate
    fade = min(seg // 2, int(0.01 * sample_rate))
    env = np.ones(seg)
    env[:fade] = np.linspace(0.0, 1.0, fade, endpoint=False)
    env[seg - fade :] = np.linspace(1.0, 0.0, fade, endpoint=False)
    for start in range(0, n, seg):
        f0 = NOTES_HZ[rng.integers(len(NOTES_HZ))]
        note = np.zeros(seg)
        for h in range(1, int(rng.integers(1, 4)) + 1):
            note += np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h
        note *= env * rng.uniform(0.3, 0.6) / np.max(np.abs(note))
        stop = min(n, start + seg)
        out[start:stop] = note[: stop - start]
    return Waveform(np.clip(out, -1.0, 1.0), sample_rate)


def tone_corpus(n_clips, duration, sample_rate=16000, seed=0):
    return [tone_mixture(duration, sample_rate, stream(seed, "synth", i)) for i in range(n_clips)]


def periodic_tokens(pattern, length):
    pattern = np.asarray(pattern, dtype=np.int64)
    return np.resize(pattern, length)
