"""Gap inpainting: token projection, clamped reverse diffusion, splice and crossfade."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion_core import NoiseSchedule, sample_reverse
from .errors import GapTooWide, InvalidGap, InvalidModel
from .rng import stream
from .token_codec import TokenSequence, Waveform, decode, encode, num_frames

CROSSFADE_MS = 10.0
DEFAULT_CONTEXT = 256
DEFAULT_STEPS = 128


@dataclass
class GapSpec:
    """Half-open ``[start, end)`` sample intervals, sorted and disjoint."""

    gaps: list
    sample_rate: int

    def __post_init__(self):
        self.gaps = [(int(s), int(e)) for s, e in self.gaps]
        prev_end = None
        for s, e in self.gaps:
            if s < 0 or e <= s:
                raise InvalidGap(f"invalid interval [{s}, {e})")
            if prev_end is not None and s < prev_end:
                raise InvalidGap("gap intervals must be sorted and non-overlapping")
            prev_end = e

    def validate_for(self, n_samples):
        for s, e in self.gaps:
            if e > n_samples:
                raise InvalidGap(f"gap [{s}, {e}) extends past the waveform ({n_samples} samples)")
        return self

    def to_json(self):
        return json.dumps({"sample_rate": self.sample_rate, "gaps": [list(g) for g in self.gaps]}, indent=1)

    @classmethod
    def from_json(cls, text):
        try:
            obj = json.loads(text)
            return cls([tuple(g) for g in obj["gaps"]], int(obj["sample_rate"]))
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidGap(f"malformed GapSpec JSON: {e}") from e

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


@dataclass
class GapRecord:
    interval: tuple
    token_span: tuple  # [first, last + 1) of the masked tokens covering this gap
    crossfade_samples: int


@dataclass
class InpaintResult:
    waveform: Waveform
    tokens: TokenSequence
    gaps: list = field(default_factory=list)


def project_gaps(gaps, frame_length, hop_length, waveform_len):
    """Token indices whose frame ``[i*hop, i*hop + frame)`` meets any gap."""
    gaps.validate_for(waveform_len)
    n_tokens = num_frames(waveform_len, frame_length, hop_length)
    out = set()
    for s, e in gaps.gaps:
        lo = max(0, (s - frame_length) // hop_length + 1)
        hi = min(n_tokens - 1, (e - 1) // hop_length)
        out.update(range(lo, hi + 1))
    return out


def crossfade_ramp(n):
    """Fade-in weights ``k / n`` for ``k = 0..n-1``: starts at 0, hits 0.5 at ``n // 2`` for even ``n``."""
    return np.arange(n, dtype=np.float64) / n


def crossfade_length(sample_rate, ms=CROSSFADE_MS):
    n = int(round(sample_rate * ms / 1000.0))
    return n + (n % 2)


def splice_weights(n, gaps, crossfade):
    """Per-sample weight of the generated signal.

    Each gap gets a plateau of 1 with linear ramps of ``crossfade`` samples
    centred on its boundaries; the fade-in at ``start - crossfade/2 + k`` is
    ``k / crossfade``. Overlapping profiles combine by maximum.
    """
    i = np.arange(n, dtype=np.float64)
    half = crossfade // 2
    weight = np.zeros(n)
    for s, e in gaps:
        rise = np.clip((i - (s - half)) / crossfade, 0.0, 1.0)
        fall = np.clip(((e + half) - i) / crossfade, 0.0, 1.0)
        weight = np.maximum(weight, np.minimum(rise, fall))
    return weight


def splice(original, generated, gaps, crossfade):
    """Blend ``generated`` into ``original`` over each gap and its crossfade margins.

    Samples with weight 0 are copied from ``original`` untouched and weight 1
    copies ``generated``; in between the blend is convex.
    """
    weight = splice_weights(original.shape[0], gaps, crossfade)
    out = original.copy()
    full = weight >= 1.0
    part = (weight > 0) & ~full
    out[full] = generated[full]
    out[part] = (1.0 - weight[part]) * original[part] + weight[part] * generated[part]
    return out, weight


def _runs(indices):
    """Contiguous runs ``[a, b)`` of a sorted index list."""
    runs = []
    for i in sorted(indices):
        if runs and runs[-1][1] == i:
            runs[-1][1] = i + 1
        else:
            runs.append([i, i + 1])
    return [tuple(r) for r in runs]


def _windows(runs, n_tokens, context):
    """Group runs into context windows centred on the first pending run, left to right."""
    out = []
    pending = list(runs)
    while pending:
        a, b = pending[0]
        if b - a > context:
            raise GapTooWide(f"masked span of {b - a} tokens exceeds the {context}-token context")
        centre = (a + b) // 2
        w0 = min(max(0, centre - context // 2), max(0, n_tokens - context))
        w1 = min(n_tokens, w0 + context)
        inside = [r for r in pending if r[0] >= w0 and r[1] <= w1]
        out.append(((w0, w1), inside))
        pending = [r for r in pending if r not in inside]
    return out


def inpaint(w, gaps, codec, net, schedule=None, steps=DEFAULT_STEPS, seed=0, context=DEFAULT_CONTEXT,
            crossfade_ms=CROSSFADE_MS):
    """Fill ``gaps`` in ``w`` with audio generated from the score network.

    The waveform is encoded as-is, every token whose frame touches a gap is
    masked, and masked runs are sampled by clamped reverse diffusion inside
    a context window (runs sharing a window are sampled jointly; windows are
    processed left to right). Only the gap regions plus the crossfade
    margins of the output differ from the input.
    """
    schedule = schedule or NoiseSchedule.log_linear()
    gaps.validate_for(len(w))
    if gaps.sample_rate != w.sample_rate:
        raise InvalidGap(f"GapSpec rate {gaps.sample_rate} != waveform rate {w.sample_rate}")
    if not net.is_finite():
        raise InvalidModel("score network has non-finite parameters")
    tokens = encode(w, codec)
    n = tokens.vocab_size
    if net.config.vocab_size != n:
        raise InvalidModel(f"network vocab {net.config.vocab_size} != codec vocab {n}")
    if not gaps.gaps:
        return InpaintResult(Waveform(w.samples.copy(), w.sample_rate), tokens, [])

    context = min(context, net.config.context_length)
    masked = project_gaps(gaps, codec.frame_length, codec.hop_length, len(w))
    ids = tokens.ids.copy()
    ids[sorted(masked)] = n
    score_fn = net.score_fn()
    runs = _runs(masked)
    rng = stream(seed, "inpaint")
    net.eval()
    for (w0, w1), inside in _windows(runs, len(ids), context):
        window = ids[w0:w1].copy()
        free = np.zeros(window.shape, dtype=bool)
        for a, b in inside:
            free[a - w0 : b - w0] = True
        window = sample_reverse(window, score_fn, schedule, steps, rng, clamp=~free, vocab_size=n)
        ids[w0:w1] = window

    filled = tokens.with_ids(ids)
    cf = crossfade_length(w.sample_rate, crossfade_ms)
    generated = np.zeros(len(w))
    records = []
    # every frame touching the padded region must be inside the decoded slice
    margin = -(-(codec.frame_length + cf) // codec.hop_length) + 1
    for a, b in runs:
        t0, t1 = max(0, a - margin), min(len(ids), b + margin)
        audio = decode(filled.with_ids(ids[t0:t1]), codec).samples
        s0 = t0 * codec.hop_length
        lo, hi = a * codec.hop_length, min(len(w), (b - 1) * codec.hop_length + codec.frame_length)
        lo_pad, hi_pad = max(0, lo - cf), min(len(w), hi + cf)
        seg = slice(max(lo_pad, s0), min(hi_pad, s0 + audio.shape[0]))
        generated[seg] = audio[seg.start - s0 : seg.stop - s0]
    for s, e in gaps.gaps:
        span = sorted(i for i in masked if i * codec.hop_length < e and i * codec.hop_length + codec.frame_length > s)
        records.append(GapRecord((s, e), (span[0], span[-1] + 1) if span else (0, 0), cf))
    out, _ = splice(w.samples, generated, gaps.gaps, cf)
    return InpaintResult(Waveform(np.clip(out, -1.0, 1.0), w.sample_rate), filled, records)


def gap_positions(n_samples, gap_samples, n_gaps):
    """Start of gap ``k`` of ``n``: ``(k + 1) * L / (n + 1) - gap / 2``, in integer samples."""
    return [(k + 1) * n_samples // (n_gaps + 1) - gap_samples // 2 for k in range(n_gaps)]


def make_corrupted(w, gap_length_ms, n_gaps):
    """Silence ``n_gaps`` evenly spaced gaps of ``gap_length_ms``; returns ``(waveform, GapSpec)``."""
    if n_gaps < 0:
        raise InvalidGap("n_gaps must be >= 0")
    if n_gaps == 0:
        return Waveform(w.samples.copy(), w.sample_rate), GapSpec([], w.sample_rate)
    g = int(round(gap_length_ms * w.sample_rate / 1000.0))
    n = len(w)
    if g <= 0:
        raise InvalidGap("gap length rounds to zero samples")
    if 4 * g > n:
        raise InvalidGap(f"gap of {g} samples is longer than a quarter of the {n}-sample clip")
    starts = gap_positions(n, g, n_gaps)
    intervals = [(s, s + g) for s in starts]
    if intervals[0][0] < 0 or intervals[-1][1] > n or any(
        b[0] < a[1] for a, b in zip(intervals, intervals[1:])
    ):
        raise InvalidGap(f"{n_gaps} gaps of {g} samples do not fit in {n} samples")
    out = w.samples.copy()
    for s, e in intervals:
        out[s:e] = 0.0
    return Waveform(out, w.sample_rate), GapSpec(intervals, w.sample_rate)
