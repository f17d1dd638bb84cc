import numpy as np
import pytest

from kidsr.corpus import AudioClip, synth_corpus
from kidsr.evaluation import prepare_speakers

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def small_corpus():
    """12 synthetic speakers, enough for the 1 + 10 trial design."""
    return synth_corpus(12, seed=3)


@pytest.fixture(scope="session")
def small_speakers(small_corpus):
    return prepare_speakers(small_corpus.records, lambda r: small_corpus.clips[r.utterance_id])


@pytest.fixture(scope="session")
def classroom_corpus():
    """30 synthetic speakers: the desk-scale classroom."""
    return synth_corpus(30, seed=7)


@pytest.fixture(scope="session")
def classroom_speakers(classroom_corpus):
    return prepare_speakers(classroom_corpus.records,
                            lambda r: classroom_corpus.clips[r.utterance_id])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tone(freq_hz, seconds, amplitude=0.5):
    t = np.arange(int(seconds * 16000)) / 16000.0
    return amplitude * np.sin(2 * np.pi * freq_hz * t)


def clip_of(samples, speaker="s", utt="u"):
    return AudioClip(np.asarray(samples, dtype=float), 16000, utt, speaker)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
