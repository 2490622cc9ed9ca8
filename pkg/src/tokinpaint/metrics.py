"""Objective metrics: log-spectral distance, Frechet distance, spectral embeddings.

The shipped embedder is a deterministic spectral-statistics stand-in, so
Frechet distances computed here are only comparable with each other, not
with distances computed on other embedding models.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AudioTooShort, DimensionMismatch, InvalidStats, LengthMismatch, PairingError
from .token_codec import hann, read_wav

MAG_FLOOR = 1e-8
PSD_TOLERANCE = 1e-8
EMBED_BANDS = 64
EMBED_FFT = 1024
EMBED_HOP = 512
EMBED_DIM = EMBED_BANDS + 6


@dataclass(frozen=True)
class SpectrogramParams:
    window: int = 2048
    hop: int = 512
    center: bool = True

    def __post_init__(self):
        if not 0 < self.hop <= self.window:
            raise ValueError("need 0 < hop <= window")


def stft_magnitude(x, params=SpectrogramParams()):
    """|STFT| with a periodic Hann window, shape ``(frames, window // 2 + 1)``.

    Centred framing zero-pads ``window // 2`` samples on both sides.
    """
    x = np.asarray(x, dtype=np.float64)
    if params.center:
        pad = params.window // 2
        x = np.pad(x, (pad, pad))
    if x.shape[0] < params.window:
        x = np.pad(x, (0, params.window - x.shape[0]))
    frames = np.lib.stride_tricks.sliding_window_view(x, params.window)[:: params.hop]
    return np.abs(np.fft.rfft(frames * hann(params.window), axis=-1))


def lsd(x, x_hat, params=SpectrogramParams()):
    """Frame-averaged RMS difference of base-10 log power spectra.

    Magnitudes are floored at 1e-8 before the logarithm.
    """
    a = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    b = np.asarray(getattr(x_hat, "samples", x_hat), dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"signal lengths differ: {a.shape[0]} vs {b.shape[0]}")
    ra, rb = getattr(x, "sample_rate", None), getattr(x_hat, "sample_rate", None)
    if ra is not None and rb is not None and ra != rb:
        raise LengthMismatch(f"sample rates differ: {ra} vs {rb}")
    la = 2.0 * np.log10(np.maximum(stft_magnitude(a, params), MAG_FLOOR))
    lb = 2.0 * np.log10(np.maximum(stft_magnitude(b, params), MAG_FLOOR))
    return float(np.mean(np.sqrt(np.mean((la - lb) ** 2, axis=-1))))


# -- Frechet distance ------------------------------------------------------------


@dataclass
class EmbeddingStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise DimensionMismatch(f"covariance shape {self.cov.shape} does not match mean dim {d}")
        if self.count < 2:
            raise InvalidStats("need at least 2 embeddings")
        if not np.allclose(self.cov, self.cov.T, atol=PSD_TOLERANCE, rtol=0):
            raise InvalidStats("covariance is not symmetric")

    @classmethod
    def from_embeddings(cls, emb):
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 2:
            raise InvalidStats("need a (count >= 2, dim) embedding matrix")
        return cls(emb.mean(axis=0), np.cov(emb, rowvar=False).reshape(emb.shape[1], emb.shape[1]), emb.shape[0])


def _psd_sqrt(m):
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    if vals.min(initial=0.0) < -PSD_TOLERANCE:
        raise InvalidStats(f"matrix is not PSD (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a, b):
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace term uses ``Tr((S_a S_b)^{1/2}) = Tr((A S_b A)^{1/2})`` with
    ``A = S_a^{1/2}``; both roots come from symmetric eigendecompositions with
    eigenvalues above -1e-8 clipped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatch(f"embedding dims differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    root_a = _psd_sqrt(a.cov)
    _psd_sqrt(b.cov)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min(initial=0.0) < -PSD_TOLERANCE * max(1.0, np.abs(vals).max(initial=0.0)):
        raise InvalidStats("product covariance is not PSD")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    return max(0.0, float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt))


# -- embeddings ------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate, n_fft=EMBED_FFT, n_bands=EMBED_BANDS, fmin=0.0, fmax=None):
    """Triangular filters equally spaced on the HTK mel scale; returns ``(filters, centres_hz)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lower) / (centre - lower)
    down = (upper - freqs[None]) / (upper - centre)
    return np.maximum(0.0, np.minimum(up, down)), edges[1:-1]


def _window_features(seg, sample_rate, filters, freqs):
    frames = np.lib.stride_tricks.sliding_window_view(seg, EMBED_FFT)[::EMBED_HOP]
    power = np.abs(np.fft.rfft(frames * hann(EMBED_FFT), axis=-1)) ** 2
    mel = np.log(filters @ power.mean(axis=0) + 1e-10)
    totals = power.sum(axis=-1)
    safe = np.where(totals > 0, totals, 1.0)
    centroid = np.where(totals > 0, (power * freqs).sum(-1) / safe, 0.0)
    cum = np.cumsum(power, axis=-1)
    rolloff_idx = (cum < 0.85 * totals[:, None]).sum(-1)
    rolloff = np.where(totals > 0, freqs[np.minimum(rolloff_idx, freqs.shape[0] - 1)], 0.0)
    mag = np.sqrt(power)
    flux = np.sqrt((np.diff(mag, axis=0) ** 2).sum(-1)) if mag.shape[0] > 1 else np.zeros(1)
    nyq = sample_rate / 2
    stats = [centroid.mean() / nyq, centroid.std() / nyq, rolloff.mean() / nyq, rolloff.std() / nyq,
             flux.mean(), flux.std()]
    return np.concatenate([mel, stats])


def embed(w):
    """One 70-dim vector per non-overlapping 1 s window.

    64 log mel-band energies of the window's mean power spectrum, then
    mean/std of spectral centroid and 85% rolloff (as fractions of Nyquist)
    and of spectral flux. Silent frames have centroid and rolloff 0.
    Trailing audio shorter than a window is ignored.
    """
    x = np.asarray(w.samples, dtype=np.float64)
    sr = w.sample_rate
    if x.shape[0] < sr:
        raise AudioTooShort(f"need at least 1 s of audio, got {x.shape[0]} samples")
    filters, _ = mel_filterbank(sr)
    freqs = np.fft.rfftfreq(EMBED_FFT, 1.0 / sr)
    n = x.shape[0] // sr
    return np.stack([_window_features(x[i * sr : (i + 1) * sr], sr, filters, freqs) for i in range(n)])


def export_embeddings(emb, path, source="spectral"):
    emb = np.ascontiguousarray(emb, dtype="<f4")
    Path(path).write_bytes(emb.tobytes())
    sidecar = {"dim": int(emb.shape[1]), "count": int(emb.shape[0]), "source": source}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def import_embeddings(path):
    meta = json.loads(Path(str(path) + ".json").read_text())
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != meta["dim"] * meta["count"]:
        raise DimensionMismatch(f"{path}: payload has {data.size} values, sidecar says {meta['dim']}x{meta['count']}")
    return data.reshape(meta["count"], meta["dim"]).astype(np.float64), meta


# -- protocol --------------------------------------------------------------------


def gap_dir_name(gap_ms):
    return f"{int(gap_ms)}ms"


def evaluate_protocol(clean_dir, inpainted_dir, gap_ms_list, embedder=embed, params=SpectrogramParams()):
    """Per gap length: mean LSD over clips and Frechet distance over all windows.

    Restored clips live in ``<inpainted_dir>/<gap>ms/<name>.wav`` and pair
    by file name with ``<clean_dir>/<name>.wav``. Rows are sorted by gap.
    """
    clean_dir, inpainted_dir = Path(clean_dir), Path(inpainted_dir)
    clean_files = {p.name: p for p in sorted(clean_dir.glob("*.wav"))}
    if not clean_files:
        raise PairingError(f"no .wav files in {clean_dir}")
    clean_cache = {}
    rows = []
    for gap in sorted(gap_ms_list):
        sub = inpainted_dir / gap_dir_name(gap)
        restored = {p.name: p for p in sorted(sub.glob("*.wav"))}
        if set(restored) != set(clean_files):
            missing = sorted(set(clean_files) ^ set(restored))
            raise PairingError(f"{sub}: unpaired files {missing[:5]}")
        lsds, emb_clean, emb_rest = [], [], []
        for name in sorted(clean_files):
            if name not in clean_cache:
                w = read_wav(clean_files[name])
                clean_cache[name] = (w, embedder(w))
            w, e = clean_cache[name]
            r = read_wav(restored[name])
            lsds.append(lsd(w, r, params))
            emb_clean.append(e)
            emb_rest.append(embedder(r))
        fd = frechet_distance(
            EmbeddingStats.from_embeddings(np.concatenate(emb_clean)),
            EmbeddingStats.from_embeddings(np.concatenate(emb_rest)),
        )
        rows.append({"gap_ms": gap, "fad": fd, "lsd": float(np.mean(lsds))})
    return rows


def write_results(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gap_ms", "fad", "lsd"])
        for r in rows:
            writer.writerow([r["gap_ms"], f"{r['fad']:.6f}", f"{r['lsd']:.6f}"])
