"""Audio ingestion, corpus manifests, enrollment/test segmentation and a
seeded synthetic child-speaker generator.
"""

import csv
import enum
import logging
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import (
    DuplicateId,
    InsufficientData,
    InvalidProfile,
    NotWav,
    ParseError,
    TruncatedFile,
    UnknownSplit,
    UnsupportedFormat,
)

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
ENROLL_SECONDS = 48.0
TEST_SECONDS = 10.0
MANIFEST_FIELDS = ["utterance_id", "speaker_id", "grade_group", "split", "path"]


class GradeGroup(str, enum.Enum):
    AG1 = "AG1"  # kindergarten to 2nd grade
    AG2 = "AG2"  # 3rd to 6th grade
    AG3 = "AG3"  # 7th to 10th grade
    UNKNOWN = "UNKNOWN"


class Split(str, enum.Enum):
    ENROLL = "ENROLL"
    TEST = "TEST"


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    utterance_id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        if self.sample_rate_hz != SAMPLE_RATE:
            raise UnsupportedFormat(
                f"sample rate {self.sample_rate_hz} Hz, only {SAMPLE_RATE} supported"
            )
        samples = np.array(self.samples, dtype=np.float64).ravel()
        if not np.all(np.isfinite(samples)):
            raise ValueError("audio contains non-finite samples")
        if samples.size and np.max(np.abs(samples)) > 1.0:
            raise ValueError("audio samples must lie within [-1, 1]")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate_hz

    def with_samples(self, samples, utterance_id=None):
        return AudioClip(
            samples,
            self.sample_rate_hz,
            self.utterance_id if utterance_id is None else utterance_id,
            self.speaker_id,
        )


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    grade_group: GradeGroup
    split: Split
    path: Path


# --------------------------------------------------------------------------
# WAV I/O

def read_wav(path, utterance_id=None, speaker_id=""):
    """Read a 16 kHz mono 16-bit PCM WAV file into an :class:`AudioClip`."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise NotWav(f"{path}: not a RIFF/WAVE file")
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            if channels != 1:
                raise UnsupportedFormat(f"{path}: {channels} channels, expected mono")
            if width != 2:
                raise UnsupportedFormat(f"{path}: {8 * width}-bit samples, expected 16-bit")
            if rate != SAMPLE_RATE:
                raise UnsupportedFormat(f"{path}: {rate} Hz, expected {SAMPLE_RATE}")
            raw = wf.readframes(n_frames)
    except EOFError as exc:
        raise TruncatedFile(f"{path}: truncated header") from exc
    except wave.Error as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    if len(raw) != 2 * n_frames:
        raise TruncatedFile(f"{path}: expected {n_frames} samples, got {len(raw) // 2}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if utterance_id is None:
        utterance_id = path.stem
    return AudioClip(samples, SAMPLE_RATE, utterance_id, speaker_id)


def write_wav(path, clip):
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# manifests

def load_manifest(path):
    """Parse a manifest CSV into a list of :class:`UtteranceRecord`.

    Relative audio paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    records = []
    seen = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header", line=1) from None
        if [h.strip() for h in header] != MANIFEST_FIELDS:
            raise ParseError(f"bad header {header!r}", line=1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise ParseError(f"expected {len(MANIFEST_FIELDS)} fields, got {len(row)}", line)
            utt, spk, group, split, audio = (c.strip() for c in row)
            if not utt or not spk:
                raise ParseError("empty utterance_id or speaker_id", line)
            if utt in seen:
                raise DuplicateId(f"utterance_id {utt!r} already on line {seen[utt]}", line)
            try:
                grade = GradeGroup(group)
            except ValueError:
                raise ParseError(f"unknown grade_group {group!r}", line) from None
            try:
                sp = Split(split)
            except ValueError:
                raise UnknownSplit(f"unknown split {split!r}", line) from None
            audio_path = Path(audio)
            if not audio_path.is_absolute():
                audio_path = base / audio_path
            seen[utt] = line
            records.append(UtteranceRecord(utt, spk, grade, sp, audio_path))
    return records


def write_manifest(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            audio = r.path
            try:
                audio = Path(audio).relative_to(path.parent)
            except ValueError:
                pass
            writer.writerow([r.utterance_id, r.speaker_id, r.grade_group.value,
                             r.split.value, audio.as_posix()])


def speakers_in_order(records):
    """Group records by speaker, ENROLL rows before TEST rows, manifest order kept."""
    by_speaker = {}
    for r in records:
        by_speaker.setdefault(r.speaker_id, []).append(r)
    return {
        spk: [r for r in rs if r.split is Split.ENROLL] + [r for r in rs if r.split is Split.TEST]
        for spk, rs in by_speaker.items()
    }


# --------------------------------------------------------------------------
# segmentation

def split_segments(clips, enroll_s=ENROLL_SECONDS, test_s=TEST_SECONDS):
    """Cut one speaker's clips into an enrollment clip and fixed-length tests.

    Durations count detected speech only: every clip goes through the
    energy SAD, the survivors are concatenated in the given order, the
    first ``enroll_s`` seconds become enrollment and each following
    ``test_s`` chunk becomes a test. A trailing remainder shorter than
    ``test_s`` is dropped.
    """
    from .features import detect_speech

    if not clips:
        raise InsufficientData("no clips for speaker", 0.0)
    speaker = clips[0].speaker_id
    speech = [detect_speech(c).samples for c in clips]
    stream = np.concatenate(speech) if speech else np.zeros(0)
    available = stream.size / SAMPLE_RATE
    n_enroll = int(round(enroll_s * SAMPLE_RATE))
    n_test = int(round(test_s * SAMPLE_RATE))
    if stream.size < n_enroll:
        raise InsufficientData(
            f"speaker {speaker!r}: {available:.2f} s of speech, need {enroll_s:g} s",
            available,
        )
    enrollment = AudioClip(stream[:n_enroll], SAMPLE_RATE, f"{speaker}-enroll", speaker)
    tests = []
    start = n_enroll
    while start + n_test <= stream.size:
        tests.append(AudioClip(stream[start:start + n_test], SAMPLE_RATE,
                               f"{speaker}-test{len(tests):02d}", speaker))
        start += n_test
    if not tests:
        warnings.warn(
            f"speaker {speaker!r}: {available:.2f} s of speech, "
            f"{enroll_s + test_s:g} s needed for one test; no tests produced",
            stacklevel=2,
        )
    return enrollment, tests


# --------------------------------------------------------------------------
# synthetic speakers

# Formant multipliers for a small shared "vowel" inventory: linguistic
# content that every speaker produces, on top of their own vocal tract.
_VOWELS = np.array([
    [1.00, 1.00, 1.00, 1.00],
    [0.72, 1.32, 1.06, 1.02],
    [1.22, 0.82, 0.95, 0.98],
    [0.62, 1.45, 1.10, 1.04],
    [1.12, 0.70, 0.93, 1.00],
    [0.86, 1.16, 1.02, 0.97],
    [0.95, 0.90, 1.08, 1.05],
])
_SPEECH_RUN_S = 2.0
_GAP_S = 0.2
_MIN_FORMANT_GAP_HZ = 150.0
_MAX_FORMANT_HZ = 7600.0

# f0 range and vocal-tract scale per grade group: younger means higher.
_GROUP_RANGES = {
    GradeGroup.AG1: ((270.0, 420.0), (1.18, 1.34)),
    GradeGroup.AG2: ((230.0, 360.0), (1.06, 1.22)),
    GradeGroup.AG3: ((180.0, 300.0), (0.94, 1.10)),
    GradeGroup.UNKNOWN: ((180.0, 420.0), (0.94, 1.34)),
}
_BASE_FORMANTS = np.array([620.0, 1500.0, 2650.0, 3750.0])


@dataclass(frozen=True)
class SyntheticSpeakerProfile:
    speaker_id: str
    f0_hz: float
    formants_hz: tuple
    formant_bandwidths_hz: tuple
    noise_mix: float = 0.1
    seed: int = 0
    grade_group: GradeGroup = field(default=GradeGroup.UNKNOWN, compare=False)

    def validate(self):
        values = [self.f0_hz, self.noise_mix, *self.formants_hz, *self.formant_bandwidths_hz]
        if not all(np.isfinite(v) for v in values):
            raise InvalidProfile(f"{self.speaker_id}: non-finite parameter")
        if not 180.0 <= self.f0_hz <= 420.0:
            raise InvalidProfile(f"{self.speaker_id}: f0 {self.f0_hz} outside [180, 420] Hz")
        if len(self.formants_hz) != 4 or len(self.formant_bandwidths_hz) != 4:
            raise InvalidProfile(f"{self.speaker_id}: need exactly 4 formants and bandwidths")
        f = np.asarray(self.formants_hz, dtype=float)
        if np.any(np.diff(f) <= 0) or f[0] <= 0 or f[-1] >= 7000.0:
            raise InvalidProfile(f"{self.speaker_id}: formants must increase and stay below 7000 Hz")
        if min(self.formant_bandwidths_hz) <= 0:
            raise InvalidProfile(f"{self.speaker_id}: bandwidths must be positive")
        if not 0.0 <= self.noise_mix <= 0.5:
            raise InvalidProfile(f"{self.speaker_id}: noise_mix outside [0, 0.5]")


def random_profile(speaker_id, seed, grade_group=GradeGroup.UNKNOWN):
    """Draw a child-like speaker profile; younger groups get higher f0 and formants."""
    rng = np.random.default_rng(seed)
    (f0_lo, f0_hi), (s_lo, s_hi) = _GROUP_RANGES[GradeGroup(grade_group)]
    f0 = rng.uniform(f0_lo, f0_hi)
    scale = rng.uniform(s_lo, s_hi)
    formants = _BASE_FORMANTS * scale * rng.uniform(0.9, 1.1, size=4)
    bandwidths = rng.uniform([60.0, 80.0, 110.0, 150.0], [120.0, 160.0, 220.0, 300.0])
    noise_mix = rng.uniform(0.02, 0.25)
    return SyntheticSpeakerProfile(
        speaker_id=speaker_id,
        f0_hz=float(f0),
        formants_hz=tuple(float(x) for x in formants),
        formant_bandwidths_hz=tuple(float(x) for x in bandwidths),
        noise_mix=float(noise_mix),
        seed=int(seed),
        grade_group=GradeGroup(grade_group),
    )


def _resonator(freq, bw):
    r = np.exp(-np.pi * bw / SAMPLE_RATE)
    theta = 2.0 * np.pi * freq / SAMPLE_RATE
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a  # unity gain at DC


def _speech_stream(profile, n_samples, rng):
    formants = np.asarray(profile.formants_hz)
    bws = np.asarray(profile.formant_bandwidths_hz)
    out = np.empty(n_samples)
    states = [np.zeros(2) for _ in range(4)]
    phase = 0.0
    pos = 0
    noise_scale = np.sqrt(profile.f0_hz / SAMPLE_RATE)
    while pos < n_samples:
        seg_len = min(int(rng.uniform(0.06, 0.2) * SAMPLE_RATE), n_samples - pos)
        vowel = _VOWELS[rng.integers(len(_VOWELS))]
        f = formants * vowel * rng.uniform(0.97, 1.03, size=4)
        for i in range(1, 4):
            f[i] = max(f[i], f[i - 1] + _MIN_FORMANT_GAP_HZ)
        f = np.minimum(f, _MAX_FORMANT_HZ - _MIN_FORMANT_GAP_HZ * (3 - np.arange(4)))
        voiced = rng.random() < 0.85
        noise = rng.standard_normal(seg_len) * noise_scale
        if voiced:
            f0 = profile.f0_hz * rng.uniform(0.9, 1.1)
            contour = f0 * np.linspace(1.0, rng.uniform(0.94, 1.06), seg_len)
            ph = phase + np.cumsum(contour / SAMPLE_RATE)
            pulses = np.diff(np.floor(np.concatenate([[phase], ph]))) > 0
            phase = ph[-1] - np.floor(ph[-1])
            excitation = (1.0 - profile.noise_mix) * pulses + profile.noise_mix * noise
            gain = rng.uniform(0.6, 1.0)
        else:
            excitation = noise
            gain = rng.uniform(0.15, 0.35)
        y = excitation
        for k in range(4):
            b, a = _resonator(f[k], bws[k])
            y, states[k] = lfilter(b, a, y, zi=states[k])
        out[pos:pos + seg_len] = gain * y
        pos += seg_len
    return out


def synth_utterance(profile, duration_s, seed, utterance_id=None):
    """Source-filter synthesis of one utterance for a synthetic speaker.

    Pulse-train (or noise) excitation runs through a cascade of four
    formant resonators whose targets hop between a shared set of vowel
    shapes. Runs of speech of about 2 s are separated by 200 ms of digital
    silence, and the result is scaled to a peak magnitude of 0.5.
    """
    profile.validate()
    if not duration_s > 0:
        raise InvalidProfile(f"duration must be positive, got {duration_s}")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng([profile.seed, int(seed)])
    run = int(_SPEECH_RUN_S * SAMPLE_RATE)
    gap = int(_GAP_S * SAMPLE_RATE)
    mask = (np.arange(n) % (run + gap)) < run
    samples = np.zeros(n)
    samples[mask] = _speech_stream(profile, int(mask.sum()), rng)
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples *= 0.5 / peak
    if utterance_id is None:
        utterance_id = f"{profile.speaker_id}-{seed}"
    return AudioClip(samples, SAMPLE_RATE, utterance_id, profile.speaker_id)


@dataclass
class SyntheticCorpus:
    profiles: list
    records: list
    clips: dict  # utterance_id -> AudioClip


def synth_corpus(n_speakers, seed, enroll_clips=6, enroll_clip_s=10.0,
                 test_clips=2, test_clip_s=11.0, groups=None):
    """Build an in-memory corpus of synthetic speakers.

    Grade groups cycle AG1, AG2, AG3 unless ``groups`` is given. The
    default durations leave just over 48 s of enrollment speech and two
    10 s test chunks per speaker after SAD.
    """
    if groups is None:
        groups = [GradeGroup.AG1, GradeGroup.AG2, GradeGroup.AG3]
    seeds = np.random.SeedSequence(seed).generate_state(n_speakers)
    profiles, records, clips = [], [], {}
    width = max(3, len(str(n_speakers - 1)))
    for i in range(n_speakers):
        spk = f"spk{i:0{width}d}"
        group = GradeGroup(groups[i % len(groups)])
        profile = random_profile(spk, int(seeds[i]), group)
        profiles.append(profile)
        plan = [(Split.ENROLL, enroll_clip_s)] * enroll_clips + [(Split.TEST, test_clip_s)] * test_clips
        for j, (split, dur) in enumerate(plan):
            utt = f"{spk}-u{j:02d}"
            clips[utt] = synth_utterance(profile, dur, j, utterance_id=utt)
            records.append(UtteranceRecord(utt, spk, group, split,
                                           Path("wav") / spk / f"{utt}.wav"))
    return SyntheticCorpus(profiles, records, clips)
