import numpy as np
import pytest
import torch

from tokinpaint import synth, token_codec


@pytest.fixture(scope="session")
def two_tone_corpus():
    return [synth.tone(440.0, 1.0), synth.tone(880.0, 1.0)]


@pytest.fixture(scope="session")
def two_tone_codec(two_tone_corpus):
    return token_codec.train_codebook(two_tone_corpus, 1024, 256, 2, seed=0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def snr_db(ref, est):
    ref, est = np.asarray(ref, dtype=np.float64), np.asarray(est, dtype=np.float64)
    return 10.0 * np.log10(np.sum(ref**2) / np.sum((ref - est) ** 2))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
