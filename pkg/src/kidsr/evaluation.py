"""Trials, score normalization, EER / identification metrics and the
experiment harnesses (sub-band sweep, age-group / classroom / school runs).
"""

import csv
import enum
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import AudioClip, GradeGroup, split_segments, speakers_in_order
from .errors import EmptyScoreSet, GroupTooSmall, InsufficientData, KidsrError, TooFewSpeakers
from .features import (
    FULLBAND,
    N_SUBBANDS,
    BandMode,
    SubBandSpec,
    features_from_energies,
    log_energy_frames,
)
from .gmm import DEFAULT_RELEVANCE, DiagGmm, adapt, log_likelihood, train_ubm
from .svm import (
    LinearSvmModel,
    split_enrollment,
    supervector_from_features,
    train_one_vs_rest,
)

log = logging.getLogger(__name__)

N_IMPOSTORS = 10
CLASS_SIZE = 30
N_CLASSES = 4


class System(str, enum.Enum):
    GMM_UBM = "GMM_UBM"
    GMM_SVM = "GMM_SVM"


class Grouping(str, enum.Enum):
    AGE_GROUPS = "AGE_GROUPS"
    CLASSROOM = "CLASSROOM"
    SCHOOL = "SCHOOL"


@dataclass(frozen=True)
class Trial:
    test_utterance_id: str
    model_speaker_id: str
    is_target: bool


@dataclass(frozen=True)
class ScoreRecord:
    trial: Trial
    raw_score: float
    normalized_score: float


@dataclass(frozen=True)
class SubbandRow:
    index_n: int
    span_lo_hz: float
    span_hi_hz: float
    eer_percent: float
    id_percent: float


@dataclass
class EvalReport:
    system: System
    band_mode: BandMode  # None for a sub-band sweep
    eer_percent: float
    id_accuracy_percent: float
    n_trials: int
    seed: int
    per_subband_rows: list = None
    label: str = ""
    n_speakers: int = 0
    n_tests: int = 0


@dataclass
class SystemConfig:
    system: System = System.GMM_SVM
    k: int = 64
    relevance_r: float = DEFAULT_RELEVANCE
    c_param: float = 1.0
    seed: int = 0
    threads: int = 1


def pmap(fn, items, threads=1):
    """Order-preserving map, optionally on a thread pool."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# trials and metrics

def generate_trials(test_utterances, enrolled_speakers, seed):
    """1 target + 10 impostor trials per test utterance.

    ``test_utterances`` is a sequence of ``(utterance_id, speaker_id)``
    pairs. Impostors are drawn without replacement from the enrolled
    speakers other than the target, fresh for every utterance.
    """
    speakers = sorted(set(enrolled_speakers))
    if len(speakers) < N_IMPOSTORS + 1:
        raise TooFewSpeakers(f"{len(speakers)} enrolled speakers, need {N_IMPOSTORS + 1}")
    rng = np.random.default_rng(seed)
    trials = []
    for utt, spk in test_utterances:
        if spk not in speakers:
            raise ValueError(f"test utterance {utt!r}: speaker {spk!r} is not enrolled")
        others = [s for s in speakers if s != spk]
        picks = rng.choice(len(others), size=N_IMPOSTORS, replace=False)
        trials.append(Trial(utt, spk, True))
        trials.extend(Trial(utt, others[p], False) for p in picks)
    return trials


def max_normalize(scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyScoreSet("cannot normalize an empty score set")
    return scores - scores.max()


def compute_eer(target_scores, impostor_scores):
    """Pooled equal error rate in percent.

    A trial is accepted when its score is >= the threshold. FAR and FRR are
    evaluated at every distinct pooled score (plus +inf) and the EER is read
    off where the two curves cross, interpolating linearly between the two
    bracketing operating points.
    """
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    imp = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    if tar.size == 0 or imp.size == 0:
        raise EmptyScoreSet("EER needs both target and impostor scores")
    thresholds = np.append(np.unique(np.concatenate([tar, imp])), np.inf)
    far = 1.0 - np.searchsorted(imp, thresholds, side="left") / imp.size
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    diff = far - frr
    i = int(np.argmax(diff <= 0))  # first crossing; diff[-1] = -1 guarantees one
    if i == 0:
        return 100.0 * float(far[0])
    lam = diff[i - 1] / (diff[i - 1] - diff[i])
    eer = far[i - 1] + lam * (far[i] - far[i - 1])
    return float(np.clip(100.0 * eer, 0.0, 100.0))


def argmax_speaker(scores):
    """Highest-scoring speaker of a ``{speaker_id: score}`` mapping; ties go to the smallest id."""
    if not scores:
        raise ValueError("no models to choose from")
    best = max(scores.values())
    return min(s for s, v in scores.items() if v == best)


def model_scores(models, test_features, ubm=None, relevance_r=DEFAULT_RELEVANCE):
    """Raw score of one test utterance against every model in ``models``."""
    models = dict(models)
    if not models:
        return {}
    first = next(iter(models.values()))
    if isinstance(first, DiagGmm):
        return {spk: log_likelihood(m, test_features) for spk, m in models.items()}
    if isinstance(first, LinearSvmModel):
        if ubm is None:
            raise ValueError("SVM scoring needs the UBM to build the test supervector")
        sv = supervector_from_features(ubm, test_features, relevance_r).values
        return {spk: float(sv @ m.weights + m.bias) for spk, m in models.items()}
    raise TypeError(f"unsupported model type {type(first).__name__}")


def identify(models, test_features, ubm=None, relevance_r=DEFAULT_RELEVANCE):
    return argmax_speaker(model_scores(models, test_features, ubm, relevance_r))


# --------------------------------------------------------------------------
# corpus preparation

@dataclass
class SpeakerData:
    """One speaker's enrollment and test material as cached log filterbank energies."""

    speaker_id: str
    grade_group: GradeGroup
    enrollment: np.ndarray  # (T, 24)
    segments: list  # three (T, 24) arrays for supervector training
    tests: list = field(default_factory=list)  # [(utterance_id, (T, 24))]


def _speaker_data(speaker_id, group, clips):
    enrollment, tests = split_segments(clips)
    return SpeakerData(
        speaker_id,
        group,
        log_energy_frames(enrollment),
        [log_energy_frames(piece) for piece in split_enrollment(enrollment)],
        [(t.utterance_id, log_energy_frames(t)) for t in tests],
    )


def prepare_speakers(records, load_clip, threads=1):
    """Segment every speaker in a manifest and cache their filterbank energies.

    ``load_clip(record)`` returns the record's :class:`AudioClip`. Speakers
    without 48 s of speech are skipped with a warning.
    """
    grouped = speakers_in_order(records)

    def work(item):
        spk, recs = item
        clips = [load_clip(r) for r in recs]
        clips = [c if c.speaker_id == spk else AudioClip(c.samples, c.sample_rate_hz, c.utterance_id, spk)
                 for c in clips]
        try:
            return _speaker_data(spk, recs[0].grade_group, clips)
        except InsufficientData as exc:
            warnings.warn(f"skipping speaker {spk!r}: {exc}", stacklevel=2)
            return None

    return [d for d in pmap(work, sorted(grouped.items()), threads) if d is not None]


# --------------------------------------------------------------------------
# back-ends

def _features(energies, band_mode):
    return features_from_energies(energies, band_mode)


def train_background(speakers, band_mode, cfg):
    feats = [_features(s.enrollment, band_mode) for s in speakers]
    return train_ubm(feats, cfg.k, cfg.seed)


def enroll_speakers(speakers, ubm, band_mode, cfg, population=None):
    """Speaker models keyed by id.

    For GMM-SVM the background class of each speaker is every other
    speaker in ``population`` (defaults to ``speakers``).
    """
    population = speakers if population is None else population
    if cfg.system is System.GMM_UBM:
        def work(s):
            return adapt(ubm, _features(s.enrollment, band_mode), cfg.relevance_r)

        return dict(zip([s.speaker_id for s in speakers], pmap(work, speakers, cfg.threads)))

    def supervectors(s):
        return [supervector_from_features(ubm, _features(seg, band_mode), cfg.relevance_r,
                                          s.speaker_id, i)
                for i, seg in enumerate(s.segments)]

    svs = dict(zip([s.speaker_id for s in population], pmap(supervectors, population, cfg.threads)))

    def train(s):
        background = [sv for spk, group in svs.items() if spk != s.speaker_id for sv in group]
        return train_one_vs_rest(svs[s.speaker_id], background, cfg.c_param)

    return dict(zip([s.speaker_id for s in speakers], pmap(train, speakers, cfg.threads)))


def score_tests(speakers, models, ubm, band_mode, cfg):
    """Raw score matrix (n_tests, n_models) plus the test index.

    Columns follow ``sorted(models)``; rows follow speakers then tests.
    """
    model_ids = sorted(models)
    tests = [(utt, s.speaker_id, e) for s in speakers for utt, e in s.tests]
    if cfg.system is System.GMM_SVM:
        w = np.stack([models[m].weights for m in model_ids])
        b = np.array([models[m].bias for m in model_ids])

        def work(t):
            sv = supervector_from_features(ubm, _features(t[2], band_mode), cfg.relevance_r)
            return w @ sv.values + b
    else:
        def work(t):
            f = _features(t[2], band_mode)
            return np.array([log_likelihood(models[m], f) for m in model_ids])

    rows = pmap(work, tests, cfg.threads)
    matrix = np.stack(rows) if rows else np.zeros((0, len(model_ids)))
    return matrix, [(utt, spk) for utt, spk, _ in tests], model_ids


def verification_scores(matrix, test_index, model_ids, seed):
    """Score records for the 1+10 trial design, max-normalized within each trial set."""
    trials = generate_trials(test_index, model_ids, seed)
    col = {m: j for j, m in enumerate(model_ids)}
    records = []
    per_test = N_IMPOSTORS + 1
    for r in range(len(test_index)):
        group = trials[r * per_test:(r + 1) * per_test]
        raw = np.array([matrix[r, col[t.model_speaker_id]] for t in group])
        norm = max_normalize(raw)
        records.extend(ScoreRecord(t, float(a), float(n)) for t, a, n in zip(group, raw, norm))
    return records


def identification_results(matrix, test_index, model_ids):
    """[(utterance_id, true_speaker, predicted_speaker)] by max normalized score."""
    out = []
    for r, (utt, spk) in enumerate(test_index):
        norm = max_normalize(matrix[r])
        out.append((utt, spk, argmax_speaker(dict(zip(model_ids, norm)))))
    return out


def eer_of(records):
    tar = [r.normalized_score for r in records if r.trial.is_target]
    imp = [r.normalized_score for r in records if not r.trial.is_target]
    return compute_eer(tar, imp)


@dataclass
class PopulationResult:
    report: EvalReport
    scores: list
    identifications: list


def evaluate_population(speakers, band_mode, cfg, ubm=None, label=""):
    """Train (if needed), enroll and test one closed population of speakers."""
    if len(speakers) < N_IMPOSTORS + 1:
        raise TooFewSpeakers(f"{len(speakers)} speakers, need {N_IMPOSTORS + 1}")
    if ubm is None:
        ubm = train_background(speakers, band_mode, cfg)
    models = enroll_speakers(speakers, ubm, band_mode, cfg)
    matrix, test_index, model_ids = score_tests(speakers, models, ubm, band_mode, cfg)
    if not test_index:
        raise InsufficientData("population has no test utterances", 0.0)
    scores = verification_scores(matrix, test_index, model_ids, cfg.seed)
    ids = identification_results(matrix, test_index, model_ids)
    accuracy = 100.0 * np.mean([true == pred for _, true, pred in ids])
    report = EvalReport(cfg.system, band_mode, eer_of(scores), float(accuracy), len(scores),
                        cfg.seed, label=label, n_speakers=len(speakers), n_tests=len(test_index))
    return PopulationResult(report, scores, ids)


# --------------------------------------------------------------------------
# experiment harnesses

def subband_sweep(speakers, cfg):
    """Run the whole system separately on each of the 21 sub-bands.

    The report's headline EER / ID are the means over sub-bands.
    """
    rows = []
    n_trials = 0
    for n in range(1, N_SUBBANDS + 1):
        band = BandMode(n)
        try:
            result = evaluate_population(speakers, band, cfg, label=str(band))
        except KidsrError as exc:
            raise type(exc)(f"sub-band {n}: {exc}") from exc
        lo, hi = SubBandSpec(n).span_hz()
        rows.append(SubbandRow(n, lo, hi, result.report.eer_percent,
                               result.report.id_accuracy_percent))
        n_trials = result.report.n_trials
        log.info("sub-band %d: EER %.2f%% ID %.2f%%", n, rows[-1].eer_percent, rows[-1].id_percent)
    return EvalReport(
        cfg.system, None,
        float(np.mean([r.eer_percent for r in rows])),
        float(np.mean([r.id_percent for r in rows])),
        n_trials, cfg.seed, per_subband_rows=rows, label="subband-sweep",
        n_speakers=len(speakers), n_tests=n_trials // (N_IMPOSTORS + 1),
    )


_AGE_GROUPS = (GradeGroup.AG1, GradeGroup.AG2, GradeGroup.AG3)


def _labelled_groups(speakers, minimum):
    groups = {g: [s for s in speakers if s.grade_group is g] for g in _AGE_GROUPS}
    present = {g: members for g, members in groups.items() if members}
    if not present:
        raise GroupTooSmall("AG1/AG2/AG3", 0, minimum)
    for g, members in present.items():
        if len(members) < minimum:
            raise GroupTooSmall(g.value, len(members), minimum)
    return present


def fullband_eval(speakers, cfg, grouping, band_mode=FULLBAND):
    """Full-band evaluations in the age-group, classroom or school settings.

    One UBM is trained on the enrollment data of every speaker passed in
    and shared by all populations. Returns a list of reports: one per age
    group (AGE_GROUPS), one per age group averaged over four random
    30-speaker classes (CLASSROOM), or one for everybody (SCHOOL).
    """
    grouping = Grouping(grouping)
    if grouping is Grouping.AGE_GROUPS:
        populations = [(g.value, [m]) for g, m in _labelled_groups(speakers, N_IMPOSTORS + 1).items()]
    elif grouping is Grouping.CLASSROOM:
        rng = np.random.default_rng(cfg.seed)
        populations = []
        for g, members in _labelled_groups(speakers, CLASS_SIZE).items():
            classes = []
            for _ in range(N_CLASSES):
                idx = np.sort(rng.choice(len(members), size=CLASS_SIZE, replace=False))
                classes.append([members[i] for i in idx])
            populations.append((f"classroom-{g.value}", classes))
    else:
        populations = [("school", [list(speakers)])]

    ubm = train_background(speakers, band_mode, cfg)
    reports = []
    for label, draws in populations:
        results = [evaluate_population(p, band_mode, cfg, ubm, label).report for p in draws]
        reports.append(EvalReport(
            cfg.system, band_mode,
            float(np.mean([r.eer_percent for r in results])),
            float(np.mean([r.id_accuracy_percent for r in results])),
            int(sum(r.n_trials for r in results)), cfg.seed, label=label,
            n_speakers=results[0].n_speakers, n_tests=int(sum(r.n_tests for r in results)),
        ))
    return reports


# --------------------------------------------------------------------------
# CSV outputs

def _fmt(x):
    return f"{x:.6f}"


def write_scores_csv(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test_utterance_id", "model_speaker_id", "is_target", "raw_score",
                    "normalized_score"])
        for r in records:
            w.writerow([r.trial.test_utterance_id, r.trial.model_speaker_id,
                        int(r.trial.is_target), _fmt(r.raw_score), _fmt(r.normalized_score)])


def write_sweep_csv(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subband_index", "span_lo_hz", "span_hi_hz", "eer_percent", "id_percent"])
        for r in report.per_subband_rows:
            w.writerow([r.index_n, f"{r.span_lo_hz:g}", f"{r.span_hi_hz:g}",
                        _fmt(r.eer_percent), _fmt(r.id_percent)])


def write_reports_csv(path, reports):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "system", "band", "k_speakers", "n_tests", "n_trials",
                    "eer_percent", "id_percent", "seed"])
        for r in reports:
            w.writerow([r.label, r.system.value, str(r.band_mode), r.n_speakers, r.n_tests,
                        r.n_trials, _fmt(r.eer_percent), _fmt(r.id_accuracy_percent), r.seed])


def write_identifications_csv(path, identifications):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test_utterance_id", "true_speaker_id", "predicted_speaker_id", "correct"])
        for utt, true, pred in identifications:
            w.writerow([utt, true, pred, int(true == pred)])
