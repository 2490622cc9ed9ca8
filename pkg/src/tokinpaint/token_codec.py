"""Frame vector-quantisation codec: waveform <-> token sequence.

A small stand-in for a neural audio tokenizer. Frames are described by their
Hann-windowed log power spectrum plus RMS, quantised against a k-means
codebook, and decoded by overlap-adding one stored time-domain frame (the
cluster medoid) per token.
"""

from __future__ import annotations

import struct
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .errors import (
    AudioTooShort,
    CorpusTooSmall,
    InvalidAudio,
    InvalidCodecParams,
    MalformedCodecFile,
    MalformedTokenStream,
    MaskedTokenInDecode,
)
from .rng import as_generator

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_FRAME = 1024
DEFAULT_HOP = 256
DEFAULT_VOCAB = 256
KMEANS_ITERATIONS = 50
LOG_FLOOR = 1e-10
# rows per distance block; fixed so serial and threaded assignment share
# identical BLAS calls
_ASSIGN_CHUNK = 1024

TOKEN_MAGIC = b"TOKD"
TOKEN_VERSION = 1
CODEC_MAGIC = b"TOKC"
CODEC_VERSION = 1


@dataclass(eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidAudio(f"expected mono samples, got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise InvalidAudio(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise InvalidAudio("waveform contains non-finite samples")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise InvalidAudio("waveform samples exceed [-1, 1]")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


@dataclass(eq=False)
class TokenSequence:
    ids: np.ndarray
    vocab_size: int
    token_rate_hz: float

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if self.vocab_size < 1:
            raise MalformedTokenStream(f"vocab_size must be >= 1, got {self.vocab_size}")
        if not self.token_rate_hz > 0:
            raise MalformedTokenStream(f"token_rate_hz must be positive, got {self.token_rate_hz}")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() > self.vocab_size):
            raise MalformedTokenStream(
                f"token ids must lie in [0, {self.vocab_size}] (MASK = {self.vocab_size})"
            )

    @property
    def mask_id(self):
        return self.vocab_size

    @property
    def has_mask(self):
        return bool(np.any(self.ids == self.vocab_size))

    def __len__(self):
        return self.ids.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and self.token_rate_hz == other.token_rate_hz
            and np.array_equal(self.ids, other.ids)
        )

    def with_ids(self, ids):
        return TokenSequence(ids, self.vocab_size, self.token_rate_hz)


@dataclass(eq=False)
class CodecSpec:
    frame_length: int
    hop_length: int
    codebook: np.ndarray  # (N, feature_dim) float32
    medoids: np.ndarray  # (N, frame_length) float32
    sample_rate: int = DEFAULT_SAMPLE_RATE
    window: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.codebook = np.ascontiguousarray(self.codebook, dtype=np.float32)
        self.medoids = np.ascontiguousarray(self.medoids, dtype=np.float32)
        _check_framing(self.frame_length, self.hop_length)
        n = self.codebook.shape[0]
        if self.codebook.ndim != 2 or self.codebook.shape[1] != feature_dim(self.frame_length):
            raise InvalidCodecParams(f"codebook shape {self.codebook.shape} does not match frame length")
        if self.medoids.shape != (n, self.frame_length):
            raise InvalidCodecParams(f"medoid shape {self.medoids.shape} != ({n}, {self.frame_length})")
        if not (np.all(np.isfinite(self.codebook)) and np.all(np.isfinite(self.medoids))):
            raise InvalidCodecParams("codebook contains non-finite values")
        self.window = hann(self.frame_length)

    @property
    def codebook_size(self):
        return self.codebook.shape[0]

    @property
    def token_rate_hz(self):
        return self.sample_rate / self.hop_length

    def __eq__(self, other):
        if not isinstance(other, CodecSpec):
            return NotImplemented
        return (
            self.frame_length == other.frame_length
            and self.hop_length == other.hop_length
            and self.sample_rate == other.sample_rate
            and np.array_equal(self.codebook, other.codebook)
            and np.array_equal(self.medoids, other.medoids)
        )


def hann(n):
    return get_window("hann", n, fftbins=True)


def feature_dim(frame_length):
    return frame_length // 2 + 2


def _check_framing(frame_length, hop_length):
    if frame_length < 2 or hop_length < 1 or hop_length > frame_length:
        raise InvalidCodecParams(
            f"need 1 <= hop_length <= frame_length, got frame={frame_length} hop={hop_length}"
        )


def num_frames(n_samples, frame_length, hop_length):
    if n_samples < frame_length:
        return 0
    return (n_samples - frame_length) // hop_length + 1


def frame_signal(samples, frame_length, hop_length):
    """Strided view of shape (n_frames, frame_length); trailing samples dropped."""
    n = num_frames(samples.shape[0], frame_length, hop_length)
    if n == 0:
        raise AudioTooShort(f"need at least {frame_length} samples, got {samples.shape[0]}")
    return np.lib.stride_tricks.sliding_window_view(samples, frame_length)[::hop_length][:n]


def frame_features(frames, window=None):
    """Per-frame features: log power spectrum of the Hann-windowed frame, then RMS."""
    frames = np.asarray(frames, dtype=np.float64)
    if window is None:
        window = hann(frames.shape[-1])
    spec = np.fft.rfft(frames * window, axis=-1)
    log_power = np.log(spec.real**2 + spec.imag**2 + LOG_FLOOR)
    rms = np.sqrt(np.mean(frames**2, axis=-1, keepdims=True))
    return np.concatenate([log_power, rms], axis=-1)


def _sq_dist(x, c, c_sq):
    d = np.sum(x * x, axis=1, keepdims=True) - 2.0 * (x @ c.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def assign(features, centroids, workers=1):
    """Nearest centroid index and squared distance per row; ties go to the lowest index.

    ``workers > 1`` spreads fixed-size row blocks over threads; the result is
    identical to the serial path because the blocks are the same.
    """
    x = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    c_sq = np.sum(c * c, axis=1)
    starts = range(0, x.shape[0], _ASSIGN_CHUNK)

    def block(s):
        d = _sq_dist(x[s : s + _ASSIGN_CHUNK], c, c_sq)
        idx = np.argmin(d, axis=1)
        return idx, d[np.arange(d.shape[0]), idx]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(block, starts))
    else:
        parts = [block(s) for s in starts]
    if not parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def kmeans(features, n_clusters, rng, iterations=KMEANS_ITERATIONS, workers=1):
    """Lloyd's algorithm with seeded init and farthest-point reseeding.

    Returns ``(centroids, labels)``. An empty cluster is moved onto the point
    farthest from its current centroid; when every point already coincides
    with a centroid (duplicate-heavy data) the reseeded centroid is nudged by
    a small deterministic offset so the codebook rows stay distinct.
    """
    x = np.asarray(features, dtype=np.float64)
    m = x.shape[0]
    rng = as_generator(rng)
    centroids = x[np.sort(rng.choice(m, size=n_clusters, replace=False))].copy()
    labels = None
    for _ in range(iterations):
        new_labels, dist = assign(x, centroids, workers)
        counts = np.bincount(new_labels, minlength=n_clusters)
        sums = np.zeros_like(centroids)
        np.add.at(sums, new_labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        taken = set()
        for k in np.flatnonzero(~nonempty):
            order = np.argsort(-dist, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            if dist[far] > 0:
                centroids[k] = x[far]
                dist[far] = 0.0
            else:
                centroids[k] = x[far] + _perturbation(x.shape[1], k)
        if labels is not None and np.array_equal(labels, new_labels) and nonempty.all():
            break
        labels = new_labels
    labels, _ = assign(x, centroids, workers)
    return centroids, labels


def _perturbation(dim, k):
    # small, deterministic, distinct per cluster index
    delta = np.zeros(dim)
    delta[k % dim] = 1e-3 * (1 + k // dim)
    return delta


def train_codebook(
    corpus,
    frame_length=DEFAULT_FRAME,
    hop_length=DEFAULT_HOP,
    vocab_size=DEFAULT_VOCAB,
    seed=0,
    iterations=KMEANS_ITERATIONS,
    workers=1,
):
    """Fit a :class:`CodecSpec` by k-means over the frames of ``corpus``."""
    if vocab_size < 2:
        raise CorpusTooSmall(f"vocab_size must be >= 2, got {vocab_size}")
    _check_framing(frame_length, hop_length)
    if not corpus:
        raise CorpusTooSmall("empty corpus")
    rates = {w.sample_rate for w in corpus}
    if len(rates) != 1:
        raise InvalidAudio(f"corpus mixes sample rates {sorted(rates)}")
    frames = []
    for w in corpus:
        if not np.all(np.isfinite(w.samples)):
            raise InvalidAudio("corpus contains non-finite audio")
        if len(w) >= frame_length:
            frames.append(frame_signal(w.samples, frame_length, hop_length))
    if not frames:
        raise CorpusTooSmall("no waveform in the corpus is at least one frame long")
    frames = np.concatenate(frames, axis=0)
    if frames.shape[0] < vocab_size:
        raise CorpusTooSmall(f"corpus has {frames.shape[0]} frames, need >= {vocab_size}")

    window = hann(frame_length)
    feats = frame_features(frames, window)
    centroids, labels = kmeans(feats, vocab_size, seed, iterations=iterations, workers=workers)
    centroids = centroids.astype(np.float32)

    medoids = np.empty((vocab_size, frame_length), dtype=np.float32)
    c64 = centroids.astype(np.float64)
    for k in range(vocab_size):
        members = np.flatnonzero(labels == k)
        if members.size == 0:
            members = np.arange(feats.shape[0])
        d = np.sum((feats[members] - c64[k]) ** 2, axis=1)
        medoids[k] = frames[members[int(np.argmin(d))]]
    return CodecSpec(frame_length, hop_length, centroids, medoids, sample_rate=next(iter(rates)))


def encode(w, codec, workers=1):
    """Quantise each hop-spaced frame of ``w`` to its nearest codebook row."""
    if w.sample_rate != codec.sample_rate:
        raise InvalidAudio(f"waveform rate {w.sample_rate} != codec rate {codec.sample_rate}")
    frames = frame_signal(w.samples, codec.frame_length, codec.hop_length)
    feats = frame_features(frames, codec.window)
    ids, _ = assign(feats, codec.codebook, workers)
    return TokenSequence(ids, codec.codebook_size, codec.token_rate_hz)


@lru_cache(maxsize=None)
def _taper(n):
    return hann(n)


def _best_lag(frame, target, max_lag):
    """Delay in ``[0, max_lag]`` at which the head of ``frame`` best matches ``target``."""
    m = target.shape[0] - max_lag
    cand = np.lib.stride_tricks.sliding_window_view(target, m)[: max_lag + 1]
    head = frame[:m]
    num = cand @ head
    den = np.sqrt(np.sum(cand * cand, axis=1) * np.dot(head, head) + 1e-12)
    return int(np.argmax(num / den))


def overlap_add(frames, hop_length, window, max_lag=0):
    """Weighted overlap-add normalised by the summed weights (a convex blend per sample).

    With ``max_lag > 0`` each frame after the first may be delayed by up to
    ``max_lag`` samples so that it lines up with the signal assembled so
    far; stationary partials then add coherently instead of cancelling. A
    delayed frame drops its last ``lag`` samples, is tapered by a Hann
    window of its shortened length, and still ends inside its slot.
    """
    n, frame_length = frames.shape
    out_len = (n - 1) * hop_length + frame_length
    overlap = frame_length - hop_length
    max_lag = min(max_lag, overlap // 2)
    acc = np.zeros(out_len)
    norm = np.zeros(out_len)
    for i in range(n):
        s = i * hop_length
        lag = 0
        if i > 0 and max_lag > 0:
            seen = norm[s : s + overlap]
            target = acc[s : s + overlap] / np.where(seen > 1e-12, seen, 1.0)
            lag = _best_lag(frames[i], target, max_lag)
        m = frame_length - lag
        weight = window if lag == 0 else _taper(m)
        acc[s + lag : s + frame_length] += weight * frames[i, :m]
        norm[s + lag : s + frame_length] += weight
    out = np.zeros(out_len)
    ok = norm > 1e-12
    out[ok] = acc[ok] / norm[ok]
    return out


def decode(t, codec):
    """Rebuild audio by lag-aligned overlap-add of each token's medoid frame.

    Output length is ``(len(t) - 1) * hop + frame``. Phase is not encoded
    in the tokens, so the result matches the source up to phase.
    """
    ids = np.asarray(t.ids)
    if np.any(ids == t.mask_id):
        raise MaskedTokenInDecode("cannot decode a sequence that still contains MASK")
    if t.vocab_size != codec.codebook_size:
        raise MalformedTokenStream(f"vocab {t.vocab_size} != codebook size {codec.codebook_size}")
    if ids.size == 0:
        return Waveform(np.zeros(0), codec.sample_rate)
    frames = codec.medoids[ids].astype(np.float64)
    out = overlap_add(frames, codec.hop_length, codec.window, max_lag=codec.hop_length // 2)
    return Waveform(np.clip(out, -1.0, 1.0), codec.sample_rate)


# -- token-stream files ------------------------------------------------------

_TOKEN_HEADER = struct.Struct("<4sHIdQ")


def export_tokens(t, path):
    header = _TOKEN_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, t.vocab_size, float(t.token_rate_hz), len(t))
    Path(path).write_bytes(header + t.ids.astype("<u4").tobytes())


def import_tokens(path):
    data = Path(path).read_bytes()
    if len(data) < _TOKEN_HEADER.size:
        raise MalformedTokenStream(f"{path}: truncated header")
    magic, version, vocab, rate, count = _TOKEN_HEADER.unpack_from(data)
    if magic != TOKEN_MAGIC:
        raise MalformedTokenStream(f"{path}: bad magic {magic!r}")
    if version != TOKEN_VERSION:
        raise MalformedTokenStream(f"{path}: unsupported version {version}")
    payload = data[_TOKEN_HEADER.size :]
    if len(payload) != 4 * count:
        raise MalformedTokenStream(f"{path}: expected {count} ids, payload has {len(payload)} bytes")
    ids = np.frombuffer(payload, dtype="<u4").astype(np.int64)
    if ids.size and ids.max() > vocab:
        raise MalformedTokenStream(f"{path}: id {int(ids.max())} out of range for vocab {vocab}")
    return TokenSequence(ids, vocab, rate)


# -- codec files ---------------------------------------------------------------

_CODEC_HEADER = struct.Struct("<4sHIIIII")


def save_codec(codec, path):
    header = _CODEC_HEADER.pack(
        CODEC_MAGIC,
        CODEC_VERSION,
        codec.sample_rate,
        codec.frame_length,
        codec.hop_length,
        codec.codebook_size,
        codec.codebook.shape[1],
    )
    body = codec.codebook.astype("<f4").tobytes() + codec.medoids.astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_codec(path):
    data = Path(path).read_bytes()
    if len(data) < _CODEC_HEADER.size:
        raise MalformedCodecFile(f"{path}: truncated header")
    magic, version, sr, frame, hop, n, dim = _CODEC_HEADER.unpack_from(data)
    if magic != CODEC_MAGIC or version != CODEC_VERSION:
        raise MalformedCodecFile(f"{path}: not a codec file (magic {magic!r}, version {version})")
    expected = 4 * (n * dim + n * frame)
    body = data[_CODEC_HEADER.size :]
    if len(body) != expected:
        raise MalformedCodecFile(f"{path}: payload size {len(body)} != {expected}")
    codebook = np.frombuffer(body[: 4 * n * dim], dtype="<f4").reshape(n, dim)
    medoids = np.frombuffer(body[4 * n * dim :], dtype="<f4").reshape(n, frame)
    try:
        return CodecSpec(frame, hop, codebook.copy(), medoids.copy(), sample_rate=sr)
    except InvalidCodecParams as e:
        raise MalformedCodecFile(f"{path}: {e}") from e


# -- WAV I/O ---------------------------------------------------------------------


def read_wav(path):
    """Read 16-bit PCM; multichannel files are averaged down to mono."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as e:
        raise InvalidAudio(f"{path}: {e}") from e
    if width != 2:
        raise InvalidAudio(f"{path}: only 16-bit PCM is supported (sample width {width})")
    pcm = np.frombuffer(raw, dtype="<i2").reshape(-1, channels).astype(np.float64) / 32768.0
    return Waveform(pcm.mean(axis=1) if channels > 1 else pcm[:, 0], rate)


def write_wav(path, w):
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
