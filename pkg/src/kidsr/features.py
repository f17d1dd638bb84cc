"""MFCC front-end: energy SAD, framing, spectra, the 24-filter Mel bank,
sub-band / full-band cepstra and per-utterance mean/variance normalization.
"""

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft

from .corpus import SAMPLE_RATE, AudioClip
from .errors import BadModelFile, TooFewFrames, TooShort

FRAME_LEN = 320  # 20 ms
FRAME_HOP = 160  # 10 ms
FFT_SIZE = 512
N_BINS = FFT_SIZE // 2 + 1
SAD_RANGE_DB = 30.0
LOG_FLOOR = 1e-10
DEGENERATE_VAR = 1e-12
N_SUBBANDS = 21
SUBBAND_WIDTH = 4
SUBBAND_DIM = 4
FULLBAND_DIM = 19

CENTER_FREQS_HZ = (
    156, 281, 406, 500, 625, 750, 875, 1000, 1125, 1281, 1437, 1625,
    1843, 2062, 2343, 2656, 3000, 3375, 3812, 4312, 4906, 5531, 6281, 7093,
)


@dataclass(frozen=True)
class BandMode:
    """Either the full band (``subband is None``) or sub-band N in 1..21."""

    subband: int = None

    def __post_init__(self):
        if self.subband is not None and not 1 <= self.subband <= N_SUBBANDS:
            raise ValueError(f"sub-band index {self.subband} outside 1..{N_SUBBANDS}")

    @property
    def is_full(self):
        return self.subband is None

    @property
    def dim(self):
        return FULLBAND_DIM if self.is_full else SUBBAND_DIM

    @property
    def code(self):
        return 0 if self.is_full else self.subband

    @classmethod
    def from_code(cls, code):
        return cls(None if code == 0 else int(code))

    @classmethod
    def parse(cls, text):
        text = str(text).strip().lower()
        if text in ("full", "fullband"):
            return FULLBAND
        if text.startswith("sub"):
            text = text[3:]
        return cls(int(text))

    def __str__(self):
        return "full" if self.is_full else f"sub{self.subband}"


FULLBAND = BandMode()


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    lower_hz: np.ndarray
    center_hz: np.ndarray
    upper_hz: np.ndarray
    weights: np.ndarray  # (24, N_BINS)
    fft_size: int = FFT_SIZE
    sample_rate_hz: int = SAMPLE_RATE

    def __len__(self):
        return len(self.center_hz)

    def response(self, k, freq_hz):
        """Triangular response of filter ``k`` (0-based) at arbitrary frequencies."""
        lo, c, hi = self.lower_hz[k], self.center_hz[k], self.upper_hz[k]
        f = np.asarray(freq_hz, dtype=float)
        rise = (f - lo) / (c - lo)
        fall = (hi - f) / (hi - c)
        return np.clip(np.minimum(rise, fall), 0.0, None)


@lru_cache(maxsize=None)
def build_filterbank():
    """Triangular filters on the fixed center frequencies.

    Each filter's cut-offs are its neighbours' centers; the outermost edges
    are 0 Hz and the Nyquist frequency.
    """
    centers = np.array(CENTER_FREQS_HZ, dtype=float)
    lower = np.concatenate([[0.0], centers[:-1]])
    upper = np.concatenate([centers[1:], [SAMPLE_RATE / 2.0]])
    freqs = np.arange(N_BINS) * SAMPLE_RATE / FFT_SIZE
    rise = (freqs[None, :] - lower[:, None]) / (centers - lower)[:, None]
    fall = (upper[:, None] - freqs[None, :]) / (upper - centers)[:, None]
    weights = np.clip(np.minimum(rise, fall), 0.0, None)
    for arr in (lower, centers, upper, weights):
        arr.flags.writeable = False
    return MelFilterbank(lower, centers, upper, weights)


@dataclass(frozen=True)
class SubBandSpec:
    index_n: int

    def __post_init__(self):
        if not 1 <= self.index_n <= N_SUBBANDS:
            raise ValueError(f"sub-band index {self.index_n} outside 1..{N_SUBBANDS}")

    @property
    def filter_lo(self):
        return self.index_n

    @property
    def filter_hi(self):
        return self.index_n + SUBBAND_WIDTH - 1

    def span_hz(self, fb=None):
        fb = fb or build_filterbank()
        return float(fb.lower_hz[self.filter_lo - 1]), float(fb.upper_hz[self.filter_hi - 1])


def region_span_hz(first, last):
    """Frequency span jointly covered by sub-bands ``first``..``last``."""
    return SubBandSpec(first).span_hz()[0], SubBandSpec(last).span_hz()[1]


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    band_mode: BandMode
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.band_mode.dim:
            raise ValueError(
                f"{self.band_mode} features need {self.band_mode.dim} columns, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


# --------------------------------------------------------------------------
# signal analysis

def _frame_count(n):
    return 0 if n < FRAME_LEN else (n - FRAME_LEN) // FRAME_HOP + 1


def _frames(samples):
    n_frames = _frame_count(samples.size)
    if n_frames == 0:
        return np.zeros((0, FRAME_LEN))
    view = np.lib.stride_tricks.sliding_window_view(samples, FRAME_LEN)
    return view[::FRAME_HOP][:n_frames]


def speech_frame_mask(samples):
    """Frames (20 ms, 10 ms hop) within 30 dB of the loudest frame."""
    frames = _frames(samples)
    energy = np.einsum("ij,ij->i", frames, frames)
    if energy.size == 0 or energy.max() <= 0.0:
        return np.zeros(energy.size, dtype=bool)
    return energy > energy.max() * 10.0 ** (-SAD_RANGE_DB / 10.0)


def detect_speech(clip):
    """Keep the samples covered by frames within 30 dB of the loudest frame."""
    x = clip.samples
    speech = speech_frame_mask(x)
    if not speech.any():
        return clip.with_samples(np.zeros(0))
    # union of the kept frames' sample ranges, so overlaps are not duplicated
    edges = np.zeros(x.size + 1, dtype=np.int64)
    starts = np.flatnonzero(speech) * FRAME_HOP
    np.add.at(edges, starts, 1)
    np.add.at(edges, starts + FRAME_LEN, -1)
    keep = np.cumsum(edges[:-1]) > 0
    return clip.with_samples(x[keep])


@lru_cache(maxsize=None)
def hamming_window():
    n = np.arange(FRAME_LEN)
    w = 0.54 - 0.46 * np.cos(2.0 * np.pi * n / (FRAME_LEN - 1))
    w.flags.writeable = False
    return w


def frame_and_window(clip):
    """Split into 20 ms Hamming-windowed frames at a 10 ms hop -> (T, 320)."""
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=float)
    if samples.size < FRAME_LEN:
        raise TooShort(f"{samples.size} samples, need at least {FRAME_LEN}")
    return _frames(samples) * hamming_window()


def magnitude_spectrum(frame):
    """|FFT| of zero-padded frames; works on one frame or a (T, 320) stack."""
    return np.abs(np.fft.rfft(frame, n=FFT_SIZE, axis=-1))


def log_filterbank_energies(spectrum, fb=None):
    fb = fb or build_filterbank()
    power = np.asarray(spectrum) ** 2
    return np.log(np.maximum(power @ fb.weights.T, LOG_FLOOR))


def subband_mfcc(energies, spec):
    """4 cepstra (c0..c3) of the 4 filter outputs making up one sub-band."""
    if not isinstance(spec, SubBandSpec):
        spec = SubBandSpec(int(spec))
    band = np.asarray(energies)[..., spec.filter_lo - 1:spec.filter_hi]
    return scipy.fft.dct(band, type=2, norm="ortho", axis=-1)


def fullband_mfcc(energies):
    """c1..c19 of the orthonormal DCT-II over all 24 log energies."""
    coeffs = scipy.fft.dct(np.asarray(energies), type=2, norm="ortho", axis=-1)
    return coeffs[..., 1:FULLBAND_DIM + 1]


def cmvn(features):
    values = features.values
    if values.shape[0] < 2:
        raise TooFewFrames(f"{values.shape[0]} frames, need at least 2 for normalization")
    mean = values.mean(axis=0)
    centred = values - mean
    var = np.mean(centred ** 2, axis=0)
    live = var >= DEGENERATE_VAR
    out = np.zeros_like(values)
    out[:, live] = centred[:, live] / np.sqrt(var[live])
    return FeatureMatrix(features.band_mode, out, normalized=True)


def log_energy_frames(clip, fb=None):
    """SAD + framing + spectra + log filterbank -> (T, 24) log energies.

    The speech frames are taken straight from the original framing rather
    than re-framing the concatenated SAD output, so no analysis frame
    straddles a splice between two speech runs.
    """
    samples = clip.samples
    if samples.size < FRAME_LEN:
        raise TooShort(f"{samples.size} samples, need at least {FRAME_LEN}")
    frames = _frames(samples)[speech_frame_mask(samples)] * hamming_window()
    if frames.shape[0] == 0:
        raise TooShort(f"{clip.utterance_id or 'clip'}: no speech frames survive SAD")
    return log_filterbank_energies(magnitude_spectrum(frames), fb)


def features_from_energies(energies, band_mode):
    if energies.shape[0] < 2:
        raise TooFewFrames(f"{energies.shape[0]} speech frames, need at least 2")
    if band_mode.is_full:
        raw = fullband_mfcc(energies)
    else:
        raw = subband_mfcc(energies, SubBandSpec(band_mode.subband))
    return cmvn(FeatureMatrix(band_mode, raw))


def extract(clip, band_mode=FULLBAND):
    return features_from_energies(log_energy_frames(clip), band_mode)


# --------------------------------------------------------------------------
# binary feature dump

_FEAT_MAGIC = b"KSFV"
_FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sIIII")


def write_features(path, features):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _FEAT_HEADER.pack(_FEAT_MAGIC, _FEAT_VERSION, features.band_mode.code,
                               features.n_frames, features.dim)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(features.values, dtype="<f8").tobytes())


def read_features(path):
    data = Path(path).read_bytes()
    if len(data) < _FEAT_HEADER.size:
        raise BadModelFile(f"{path}: truncated feature header")
    magic, version, code, n_frames, dim = _FEAT_HEADER.unpack_from(data)
    if magic != _FEAT_MAGIC or version != _FEAT_VERSION:
        raise BadModelFile(f"{path}: not a KSFV v{_FEAT_VERSION} file")
    body = data[_FEAT_HEADER.size:]
    if len(body) != 8 * n_frames * dim:
        raise BadModelFile(f"{path}: expected {n_frames}x{dim} values")
    values = np.frombuffer(body, dtype="<f8").reshape(n_frames, dim).astype(np.float64)
    return FeatureMatrix(BandMode.from_code(code), values, normalized=True)
