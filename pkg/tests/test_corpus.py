import wave

import numpy as np
import pytest
from scipy.signal import welch

from kidsr.corpus import (
    AudioClip,
    GradeGroup,
    Split,
    SyntheticSpeakerProfile,
    UtteranceRecord,
    load_manifest,
    random_profile,
    read_wav,
    split_segments,
    synth_utterance,
    write_manifest,
    write_wav,
)
from kidsr.errors import (
    DuplicateId,
    InsufficientData,
    InvalidProfile,
    NotWav,
    ParseError,
    TruncatedFile,
    UnknownSplit,
    UnsupportedFormat,
)

from conftest import clip_of, tone


def _write_pcm(path, samples, channels=1, rate=16000, width=2):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(samples, dtype="<i2").tobytes())


# --- WAV ----------------------------------------------------------------------

def test_read_wav_silence(tmp_path):
    path = tmp_path / "silence.wav"
    _write_pcm(path, np.zeros(16000))
    clip = read_wav(path)
    assert len(clip) == 16000
    assert np.all(clip.samples == 0.0)
    assert clip.utterance_id == "silence"


def test_read_wav_full_scale_negative(tmp_path):
    path = tmp_path / "edge.wav"
    _write_pcm(path, [-32768, 32767, 0])
    clip = read_wav(path)
    assert clip.samples[0] == -1.0
    assert clip.samples[1] == 32767 / 32768


def test_read_wav_rejects_stereo(tmp_path):
    path = tmp_path / "stereo.wav"
    _write_pcm(path, np.zeros(200), channels=2)
    with pytest.raises(UnsupportedFormat):
        read_wav(path)


@pytest.mark.parametrize("rate,width", [(8000, 2), (16000, 1)])
def test_read_wav_rejects_rate_and_depth(tmp_path, rate, width):
    path = tmp_path / "bad.wav"
    data = np.zeros(100, dtype="<i2") if width == 2 else np.zeros(100, dtype=np.uint8)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(data.tobytes())
    with pytest.raises(UnsupportedFormat):
        read_wav(path)


def test_read_wav_not_wav(tmp_path):
    path = tmp_path / "text.wav"
    path.write_text("hello, this is not audio")
    with pytest.raises(NotWav):
        read_wav(path)


def test_read_wav_truncated(tmp_path):
    path = tmp_path / "cut.wav"
    _write_pcm(path, np.arange(1000))
    data = path.read_bytes()
    path.write_bytes(data[:-500])
    with pytest.raises(TruncatedFile):
        read_wav(path)


def test_wav_roundtrip(tmp_path):
    clip = clip_of(tone(440, 0.1))
    write_wav(tmp_path / "a.wav", clip)
    back = read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(back.samples - clip.samples)) <= 1 / 32768


def test_audio_clip_invariants():
    with pytest.raises(UnsupportedFormat):
        AudioClip(np.zeros(10), 8000)
    with pytest.raises(ValueError):
        AudioClip(np.array([0.0, 1.5]))
    with pytest.raises(ValueError):
        AudioClip(np.array([0.0, np.nan]))


# --- manifest -------------------------------------------------------------------

HEADER = "utterance_id,speaker_id,grade_group,split,path\n"


def test_manifest_header_only(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(HEADER)
    assert load_manifest(path) == []


def test_manifest_roundtrip(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(HEADER + "u1,s1,AG1,ENROLL,a/u1.wav\nu2,s2,UNKNOWN,TEST,/abs/u2.wav\n")
    records = load_manifest(path)
    assert [r.utterance_id for r in records] == ["u1", "u2"]
    assert records[0] == UtteranceRecord("u1", "s1", GradeGroup.AG1, Split.ENROLL,
                                         tmp_path / "a" / "u1.wav")
    assert records[1].grade_group is GradeGroup.UNKNOWN
    assert str(records[1].path) == "/abs/u2.wav"
    out = tmp_path / "copy.csv"
    write_manifest(out, records)
    assert load_manifest(out) == records


def test_manifest_duplicate(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(HEADER + "u1,s1,AG1,ENROLL,x.wav\nu1,s2,AG2,TEST,y.wav\n")
    with pytest.raises(DuplicateId) as info:
        load_manifest(path)
    assert info.value.line == 3


def test_manifest_unknown_split(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(HEADER + "u1,s1,AG1,TRAIN,x.wav\n")
    with pytest.raises(UnknownSplit):
        load_manifest(path)


@pytest.mark.parametrize("body", ["u1,s1,AG9,ENROLL,x.wav\n", "u1,s1,AG1\n"])
def test_manifest_parse_errors_carry_line(tmp_path, body):
    path = tmp_path / "m.csv"
    path.write_text(HEADER + body)
    with pytest.raises(ParseError) as info:
        load_manifest(path)
    assert info.value.line == 2


# --- synthesis ------------------------------------------------------------------

def _profile(formants, seed=1, **kw):
    return SyntheticSpeakerProfile("a", kw.pop("f0", 300.0), formants, (80, 120, 160, 220),
                                   kw.pop("noise_mix", 0.1), seed=seed)


def test_synth_length_and_peak():
    clip = synth_utterance(_profile((500, 1500, 2500, 3500)), 1.0, seed=0)
    assert len(clip) == 16000
    assert abs(np.max(np.abs(clip.samples)) - 0.5) < 1e-6


def test_synth_deterministic():
    p = random_profile("x", 11)
    a = synth_utterance(p, 2.5, seed=4)
    b = synth_utterance(p, 2.5, seed=4)
    assert np.array_equal(a.samples, b.samples)
    c = synth_utterance(p, 2.5, seed=5)
    assert not np.array_equal(a.samples, c.samples)


def test_synth_has_silence_gaps():
    clip = synth_utterance(random_profile("x", 2), 5.0, seed=0)
    gap = clip.samples[32000:32000 + 3200]
    assert np.all(gap == 0.0)


def _band_ratio_db(formants):
    clip = synth_utterance(_profile(formants), 60.0, seed=0)
    f, p = welch(clip.samples, fs=16000, nperseg=1024)
    band = (f >= 2000) & (f <= 4000)
    return 10 * np.log10(p[band].sum() / p.sum())


def test_synth_formants_shape_spectrum():
    # Welch estimate, computed once offline: -12.14 dB vs -6.28 dB (gap 5.86 dB)
    low = _band_ratio_db((500, 1500, 2500, 3500))
    high = _band_ratio_db((900, 2100, 3300, 4500))
    assert abs(low - high) > 3.0
    assert low == pytest.approx(-12.14, abs=0.05)
    assert high == pytest.approx(-6.28, abs=0.05)


@pytest.mark.parametrize("kwargs", [
    dict(formants_hz=(500, 400, 2500, 3500)),
    dict(formants_hz=(500, 1500, 2500, 7100)),
    dict(f0_hz=150.0),
    dict(noise_mix=0.7),
    dict(formant_bandwidths_hz=(80, 0, 160, 220)),
])
def test_invalid_profiles(kwargs):
    base = dict(speaker_id="a", f0_hz=300.0, formants_hz=(500, 1500, 2500, 3500),
                formant_bandwidths_hz=(80, 120, 160, 220), noise_mix=0.1, seed=0)
    base.update(kwargs)
    with pytest.raises(InvalidProfile):
        synth_utterance(SyntheticSpeakerProfile(**base), 1.0, 0)


def test_invalid_duration():
    with pytest.raises(InvalidProfile):
        synth_utterance(_profile((500, 1500, 2500, 3500)), 0.0, 0)


@pytest.mark.parametrize("group", list(GradeGroup))
def test_random_profiles_valid(group):
    for seed in range(20):
        random_profile("s", seed, group).validate()


def test_younger_groups_have_higher_formants():
    f1 = {g: np.mean([random_profile("s", i, g).formants_hz[1] for i in range(50)])
          for g in (GradeGroup.AG1, GradeGroup.AG2, GradeGroup.AG3)}
    assert f1[GradeGroup.AG1] > f1[GradeGroup.AG2] > f1[GradeGroup.AG3]


# --- segmentation ---------------------------------------------------------------

def _speech(seconds, speaker="s"):
    rng = np.random.default_rng(0)
    return clip_of(0.3 * rng.uniform(-1, 1, int(seconds * 16000)), speaker)


def test_split_68s():
    enrollment, tests = split_segments([_speech(68.0)])
    assert enrollment.duration_s == pytest.approx(48.0)
    assert [t.duration_s for t in tests] == [10.0, 10.0]


def test_split_50s_warns_without_tests():
    with pytest.warns(UserWarning):
        enrollment, tests = split_segments([_speech(50.0)])
    assert enrollment.duration_s == pytest.approx(48.0)
    assert tests == []


def test_split_47s_insufficient():
    with pytest.raises(InsufficientData) as info:
        split_segments([_speech(47.0)])
    assert info.value.seconds_available == pytest.approx(47.0, abs=0.02)


def test_split_counts_speech_not_silence():
    loud = _speech(30.0)
    quiet = clip_of(np.zeros(30 * 16000))
    with pytest.raises(InsufficientData):
        split_segments([loud, quiet, loud.with_samples(loud.samples[: 10 * 16000])])


def test_split_disjoint_and_ordered():
    # distinct ramp values let us locate every sample in the source stream
    n = 70 * 16000
    ramp = clip_of(np.linspace(0.1, 0.9, n) * np.where(np.arange(n) % 2, 1, -1))
    enrollment, tests = split_segments([ramp])
    pieces = [enrollment.samples] + [t.samples for t in tests]
    joined = np.concatenate(pieces)
    assert np.array_equal(joined, ramp.samples[: joined.size])
    assert len(set(np.abs(joined))) == joined.size  # no sample reused


def test_synth_corpus_segments(small_corpus):
    assert len(small_corpus.profiles) == 12
    by_spk = {}
    for r in small_corpus.records:
        by_spk.setdefault(r.speaker_id, []).append(small_corpus.clips[r.utterance_id])
    for clips in by_spk.values():
        enrollment, tests = split_segments(clips)
        assert enrollment.duration_s == 48.0
        assert len(tests) == 2
