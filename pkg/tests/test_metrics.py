import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import sqrtm

from tokinpaint import synth
from tokinpaint.errors import AudioTooShort, DimensionMismatch, InvalidStats, LengthMismatch, PairingError
from tokinpaint.metrics import (
    EMBED_DIM,
    EmbeddingStats,
    embed,
    evaluate_protocol,
    export_embeddings,
    frechet_distance,
    gap_dir_name,
    import_embeddings,
    lsd,
    mel_filterbank,
    write_results,
)
from tokinpaint.token_codec import Waveform, write_wav


def reference_lsd(x, y, window=2048, hop=512):
    """Second implementation on torch.stft (centred, zero padded, periodic Hann)."""

    def logpow(sig):
        spec = torch.stft(
            torch.as_tensor(sig, dtype=torch.float64), window, hop, window=torch.hann_window(window, periodic=True, dtype=torch.float64),
            center=True, pad_mode="constant", return_complex=True,
        ).abs()
        return torch.log10(torch.clamp(spec, min=1e-8) ** 2)

    diff = logpow(x) - logpow(y)
    return float(torch.sqrt((diff**2).mean(dim=0)).mean())


# -- LSD -------------------------------------------------------------------------


def test_lsd_identity_and_scaling():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 0.05, 16000)
    assert lsd(x, x) == 0.0
    assert lsd(x, 10 * x) == pytest.approx(2.0, abs=1e-12)


def test_lsd_matches_reference_on_white_noise():
    rng = np.random.default_rng(1)
    x, y = rng.normal(0, 0.1, 20000), rng.normal(0, 0.1, 20000)
    assert lsd(x, y) == pytest.approx(reference_lsd(x, y), abs=1e-6)
    short_x, short_y = x[:700], y[:700]  # shorter than one window
    assert lsd(short_x, short_y) == pytest.approx(reference_lsd(short_x, short_y), abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(600, 8000))
def test_lsd_symmetric_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
    assert lsd(x, y) == pytest.approx(lsd(y, x), abs=1e-12)
    assert lsd(x, y) >= 0


def test_lsd_length_mismatch():
    with pytest.raises(LengthMismatch):
        lsd(np.zeros(100), np.zeros(101))
    with pytest.raises(LengthMismatch):
        lsd(Waveform(np.zeros(100), 16000), Waveform(np.zeros(100), 8000))


# -- Frechet ---------------------------------------------------------------------


def test_frechet_scalar_case():
    a = EmbeddingStats(np.array([0.0]), np.array([[1.0]]), 10)
    b = EmbeddingStats(np.array([1.0]), np.array([[4.0]]), 10)
    assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-12)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-12)


def _random_psd(rng, d, rank=None):
    m = rng.normal(size=(d, rank or d))
    return m @ m.T


@pytest.mark.parametrize("seed", range(5))
def test_frechet_matches_sqrtm_oracle(seed):
    rng = np.random.default_rng(seed)
    ca, cb = _random_psd(rng, 5), _random_psd(rng, 5, rank=3)
    ma, mb = rng.normal(size=5), rng.normal(size=5)
    oracle = float(np.sum((ma - mb) ** 2) + np.trace(ca + cb - 2 * np.real(sqrtm(ca @ cb))))
    got = frechet_distance(EmbeddingStats(ma, ca, 50), EmbeddingStats(mb, cb, 50))
    assert got == pytest.approx(oracle, abs=1e-6)
    back = frechet_distance(EmbeddingStats(mb, cb, 50), EmbeddingStats(ma, ca, 50))
    assert back == pytest.approx(got, abs=1e-6)


def test_frechet_validation():
    with pytest.raises(DimensionMismatch):
        frechet_distance(EmbeddingStats(np.zeros(2), np.eye(2), 5), EmbeddingStats(np.zeros(3), np.eye(3), 5))
    with pytest.raises(InvalidStats):
        frechet_distance(EmbeddingStats(np.zeros(2), np.diag([1.0, -1.0]), 5), EmbeddingStats(np.zeros(2), np.eye(2), 5))
    with pytest.raises(InvalidStats):
        EmbeddingStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 5)
    with pytest.raises(InvalidStats):
        EmbeddingStats(np.zeros(2), np.eye(2), 1)


# -- embeddings ------------------------------------------------------------------


def test_silence_embedding():
    e = embed(Waveform(np.zeros(32000)))
    assert e.shape == (2, EMBED_DIM)
    np.testing.assert_allclose(e[:, :64], np.log(1e-10))
    np.testing.assert_array_equal(e[:, 64:], 0.0)


def test_one_khz_tone_peaks_in_one_khz_band():
    _, centres = mel_filterbank(16000)
    e = embed(synth.tone(1000.0, 1.0))
    assert np.argmax(e[0, :64]) == np.argmin(np.abs(centres - 1000.0))


def test_embedding_determinism_and_window_translation():
    w = synth.tone_mixture(2.0, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(embed(w), embed(w))
    shifted = Waveform(np.concatenate([np.zeros(16000), w.samples]), 16000)
    rows = {tuple(r) for r in embed(shifted)}
    assert {tuple(r) for r in embed(w)} <= rows
    with pytest.raises(AudioTooShort):
        embed(Waveform(np.zeros(15999)))


def test_embedding_file_round_trip(tmp_path):
    e = np.random.default_rng(0).normal(size=(7, EMBED_DIM)).astype(np.float32)
    export_embeddings(e, tmp_path / "e.f32", source="test")
    back, meta = import_embeddings(tmp_path / "e.f32")
    np.testing.assert_array_equal(back, e)
    assert meta == {"dim": EMBED_DIM, "count": 7, "source": "test"}


# -- protocol --------------------------------------------------------------------


def _write_corpus(root, clips):
    root.mkdir(parents=True, exist_ok=True)
    for i, w in enumerate(clips):
        write_wav(root / f"c{i}.wav", w)


def test_protocol_identity_and_ordering(tmp_path):
    clips = synth.tone_corpus(3, 2.0, seed=2)
    _write_corpus(tmp_path / "clean", clips)
    for g in (300, 50):
        _write_corpus(tmp_path / "rest" / gap_dir_name(g), clips)
    rows = evaluate_protocol(tmp_path / "clean", tmp_path / "rest", [300, 50])
    assert [r["gap_ms"] for r in rows] == [50, 300]
    for r in rows:
        assert r["lsd"] == 0.0
        assert r["fad"] == pytest.approx(0.0, abs=1e-6)
    write_results(rows, tmp_path / "out.csv")
    lines = (tmp_path / "out.csv").read_text().splitlines()
    assert lines[0] == "gap_ms,fad,lsd" and lines[1].startswith("50,")


def test_protocol_unpaired_files(tmp_path):
    clips = synth.tone_corpus(2, 1.0, seed=3)
    _write_corpus(tmp_path / "clean", clips)
    _write_corpus(tmp_path / "rest" / "50ms", clips[:1])
    with pytest.raises(PairingError):
        evaluate_protocol(tmp_path / "clean", tmp_path / "rest", [50])
