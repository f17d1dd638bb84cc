import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kidsr.corpus import random_profile, synth_utterance
from kidsr.errors import BadModelFile, TooFewFrames, TooShort
from kidsr.features import (
    CENTER_FREQS_HZ,
    FULLBAND,
    BandMode,
    FeatureMatrix,
    SubBandSpec,
    build_filterbank,
    cmvn,
    detect_speech,
    extract,
    frame_and_window,
    fullband_mfcc,
    hamming_window,
    log_filterbank_energies,
    magnitude_spectrum,
    read_features,
    region_span_hz,
    subband_mfcc,
    write_features,
)

from conftest import clip_of, tone

EXPECTED_CENTERS_HZ = [156, 281, 406, 500, 625, 750, 875, 1000, 1125, 1281, 1437, 1625,
           1843, 2062, 2343, 2656, 3000, 3375, 3812, 4312, 4906, 5531, 6281, 7093]


def dct2_matrix(n):
    """Orthonormal DCT-II written out from its definition."""
    m = np.empty((n, n))
    for k in range(n):
        scale = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        for i in range(n):
            m[k, i] = scale * math.cos(math.pi * k * (2 * i + 1) / (2 * n))
    return m


# --- SAD ---------------------------------------------------------------------

def test_sad_all_zero():
    assert len(detect_speech(clip_of(np.zeros(16000)))) == 0


def test_sad_tone_then_silence():
    x = np.concatenate([tone(440, 1.0), np.zeros(16000)])
    # oracle: enumerate frames, apply the -30 dB rule, take the union of kept frames
    n_frames = (x.size - 320) // 160 + 1
    energy = [float(np.sum(x[160 * t:160 * t + 320] ** 2)) for t in range(n_frames)]
    top = max(energy)
    kept = [t for t in range(n_frames) if 10 * math.log10(energy[t] + 1e-300) > 10 * math.log10(top) - 30]
    covered = set()
    for t in kept:
        covered.update(range(160 * t, 160 * t + 320))
    out = detect_speech(clip_of(x))
    assert len(out) == len(covered)
    assert abs(out.duration_s - 1.0) <= 0.02


def test_sad_keeps_all_speech():
    rng = np.random.default_rng(0)
    x = 0.4 * rng.uniform(-1, 1, 16000)
    out = detect_speech(clip_of(x))
    assert abs(len(out) - len(x)) <= 320
    assert np.array_equal(out.samples, x[: len(out)])


# --- framing / spectra ----------------------------------------------------------

def test_frame_counts():
    assert frame_and_window(clip_of(np.zeros(16000))).shape == (99, 320)
    assert frame_and_window(clip_of(np.zeros(320))).shape == (1, 320)
    with pytest.raises(TooShort):
        frame_and_window(clip_of(np.zeros(319)))


@given(st.integers(min_value=320, max_value=20000))
def test_frame_count_formula(n):
    frames = frame_and_window(np.zeros(n))
    assert frames.shape[0] == (n - 320) // 160 + 1


def test_hamming_sum():
    # direct sum of the 320 coefficients; 0.54 * 320 = 172.8 minus 0.46 from the n = 319 endpoint
    expected = sum(0.54 - 0.46 * math.cos(2 * math.pi * n / 319) for n in range(320))
    frame = frame_and_window(clip_of(np.ones(320)))[0]
    assert frame.sum() == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(172.34, abs=1e-9)


def test_spectrum_zero_and_impulse():
    assert np.all(magnitude_spectrum(np.zeros(320)) == 0.0)
    impulse = np.zeros(320)
    impulse[0] = 1.0
    spec = magnitude_spectrum(impulse * hamming_window())
    assert spec.shape == (257,)
    assert np.allclose(spec, 0.08, atol=1e-12)


def test_spectrum_peak_bin():
    x = np.sin(2 * np.pi * 1000 * np.arange(320) / 16000)
    # oracle: explicit DFT sum over the zero-padded frame
    n = np.arange(320)
    dft = np.array([abs(np.sum(x * np.exp(-2j * np.pi * k * n / 512))) for k in range(257)])
    assert int(np.argmax(dft)) == 32
    spec = magnitude_spectrum(x)
    assert int(np.argmax(spec)) == 32
    assert np.allclose(spec, dft, atol=1e-9)


# --- filterbank -------------------------------------------------------------------

def test_filterbank_table():
    fb = build_filterbank()
    assert list(fb.center_hz) == EXPECTED_CENTERS_HZ
    assert list(CENTER_FREQS_HZ) == EXPECTED_CENTERS_HZ
    for k in range(1, 23):
        assert fb.lower_hz[k] == EXPECTED_CENTERS_HZ[k - 1]
        assert fb.upper_hz[k] == EXPECTED_CENTERS_HZ[k + 1]
    assert (fb.lower_hz[0], fb.upper_hz[0]) == (0, 281)
    assert (fb.lower_hz[23], fb.upper_hz[23]) == (6281, 8000)
    assert (fb.lower_hz[12], fb.center_hz[12], fb.upper_hz[12]) == (1625, 1843, 2062)


def test_filter_response_shape():
    fb = build_filterbank()
    for k in range(24):
        assert fb.response(k, fb.center_hz[k]) == pytest.approx(1.0)
        assert fb.response(k, fb.lower_hz[k]) == 0.0
        assert fb.response(k, fb.upper_hz[k]) == 0.0
    freqs = np.arange(257) * 16000 / 512
    for k in range(24):
        assert np.allclose(fb.weights[k], fb.response(k, freqs))
        outside = (freqs <= fb.lower_hz[k]) | (freqs >= fb.upper_hz[k])
        assert np.all(fb.weights[k][outside] == 0.0)


def test_log_energies_floor():
    e = log_filterbank_energies(np.zeros(257))
    assert np.allclose(e, math.log(1e-10))


def test_log_energies_locality():
    fb = build_filterbank()
    freqs = np.arange(257) * 16000 / 512
    spec = np.zeros(257)
    inside = (freqs > fb.lower_hz[4]) & (freqs < fb.upper_hz[4])
    spec[inside] = 1.0
    e = log_filterbank_energies(spec)
    disjoint = [k for k in range(24)
                if fb.upper_hz[k] <= fb.lower_hz[4] or fb.lower_hz[k] >= fb.upper_hz[4]]
    assert disjoint
    for k in disjoint:
        assert e[4] > e[k]
        assert e[k] == pytest.approx(math.log(1e-10))


def test_log_energies_white():
    fb = build_filterbank()
    freqs = np.arange(257) * 16000 / 512
    e = log_filterbank_energies(np.ones(257))
    # oracle: sum the triangle weights bin by bin
    for k in range(24):
        lo, c, hi = fb.lower_hz[k], fb.center_hz[k], fb.upper_hz[k]
        total = 0.0
        for f in freqs:
            if lo < f <= c:
                total += (f - lo) / (c - lo)
            elif c < f < hi:
                total += (hi - f) / (hi - c)
        assert e[k] == pytest.approx(math.log(total), abs=1e-12)
    assert e[23] > e[0]


# --- cepstra ---------------------------------------------------------------------

def test_subband_constant():
    c = subband_mfcc(np.full(24, 3.0), SubBandSpec(5))
    assert np.allclose(c, [6.0, 0, 0, 0], atol=1e-12)


def test_subband_zero_mean():
    e = np.zeros(24)
    e[0:4] = [1, -1, 1, -1]
    assert abs(subband_mfcc(e, SubBandSpec(1))[0]) < 1e-12


def test_subband_matches_definition_and_inverts(rng):
    e = rng.normal(size=24)
    m = dct2_matrix(4)
    for n in (1, 9, 21):
        c = subband_mfcc(e, SubBandSpec(n))
        assert np.allclose(c, m @ e[n - 1:n + 3], atol=1e-12)
        assert np.allclose(m.T @ c, e[n - 1:n + 3], atol=1e-12)


def test_fullband_constant_and_basis():
    assert np.allclose(fullband_mfcc(np.full(24, -2.5)), 0.0, atol=1e-12)
    k = np.arange(1, 25)
    c = fullband_mfcc(np.cos(np.pi * (k - 0.5) / 24))
    assert abs(c[0]) > 1.0
    assert np.allclose(c[1:], 0.0, atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=24, max_size=24))
def test_dct_roundtrip(values):
    e = np.array(values)
    m = dct2_matrix(24)
    full = m @ e
    assert np.allclose(full[1:20], fullband_mfcc(e), atol=1e-9)
    assert np.max(np.abs(m.T @ full - e)) < 1e-12 * max(1.0, np.max(np.abs(e))) * 24


def test_subband_spans():
    assert SubBandSpec(15).span_hz() == (2062, 3812)
    assert region_span_hz(1, 5) == (0, 1125)
    assert region_span_hz(6, 14) == (625, 3375)
    assert region_span_hz(15, 18) == (2062, 5531)
    assert region_span_hz(19, 21) == (3375, 8000)
    with pytest.raises(ValueError):
        SubBandSpec(22)


# --- normalization -------------------------------------------------------------

def test_cmvn_examples():
    out = cmvn(FeatureMatrix(BandMode(1), np.array([[1.0, 5, 0, 0], [3.0, 5, 0, 0]])))
    assert np.allclose(out.values[:, 0], [-1, 1])
    assert np.all(out.values[:, 1] == 0.0)
    assert out.normalized
    out = cmvn(FeatureMatrix(BandMode(1), np.full((3, 4), 5.0)))
    assert np.all(out.values == 0.0)
    with pytest.raises(TooFewFrames):
        cmvn(FeatureMatrix(BandMode(1), np.ones((1, 4))))


@settings(max_examples=50)
@given(st.integers(2, 200), st.integers(0, 2**31 - 1))
def test_cmvn_moments(n, seed):
    x = np.random.default_rng(seed).normal(3.0, 7.0, size=(n, 19))
    out = cmvn(FeatureMatrix(FULLBAND, x)).values
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(out.var(axis=0) - 1.0) < 1e-6)


# --- full pipeline ------------------------------------------------------------------

@pytest.fixture(scope="module")
def ten_seconds():
    return synth_utterance(random_profile("x", 5), 10.0, seed=1)


def test_extract_fullband(ten_seconds):
    f = extract(ten_seconds, FULLBAND)
    assert f.dim == 19
    assert f.n_frames <= 999
    assert f.normalized
    assert np.all(np.abs(f.values.mean(axis=0)) < 1e-9)


def test_extract_subband(ten_seconds):
    f = extract(ten_seconds, BandMode(15))
    assert f.dim == 4
    assert SubBandSpec(f.band_mode.subband).span_hz() == (2062, 3812)


def test_extract_silence():
    with pytest.raises(TooShort):
        extract(clip_of(np.zeros(16000)), FULLBAND)


@pytest.mark.parametrize("scale", [0.25, 0.01, 1.9])
def test_amplitude_invariance(ten_seconds, scale):
    scaled = ten_seconds.with_samples(ten_seconds.samples * scale)
    for band in (FULLBAND, BandMode(1), BandMode(21)):
        a = extract(ten_seconds, band).values
        b = extract(scaled, band).values
        assert a.shape == b.shape
        assert np.max(np.abs(a - b)) < 1e-6


def test_band_mode_parse():
    assert BandMode.parse("full") == FULLBAND
    assert BandMode.parse("15") == BandMode(15)
    assert BandMode.parse("sub3") == BandMode(3)
    assert str(BandMode(3)) == "sub3"
    with pytest.raises(ValueError):
        BandMode.parse("0")


def test_feature_dump_roundtrip(tmp_path, ten_seconds):
    f = extract(ten_seconds, BandMode(7))
    path = tmp_path / "f.ksfv"
    write_features(path, f)
    raw = path.read_bytes()
    assert raw[:4] == b"KSFV"
    assert len(raw) == 20 + 8 * f.n_frames * 4
    back = read_features(path)
    assert back.band_mode == BandMode(7)
    assert np.array_equal(back.values, f.values)
    path.write_bytes(raw[:-8])
    with pytest.raises(BadModelFile):
        read_features(path)
