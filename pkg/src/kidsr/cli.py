"""``kidsr`` command line: one binary, one subcommand per pipeline stage."""

import argparse
import enum
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import corpus, evaluation
from .errors import KidsrError, UsageError
from .evaluation import Grouping, System, SystemConfig
from .features import FULLBAND, BandMode
from .gmm import load_gmm, save_gmm
from .svm import load_svm, save_svm

log = logging.getLogger("kidsr")


class Command(str, enum.Enum):
    SYNTH = "synth"
    TRAIN_UBM = "train-ubm"
    ENROLL = "enroll"
    VERIFY = "verify"
    IDENTIFY = "identify"
    SUBBAND_SWEEP = "subband-sweep"
    FULLBAND_EVAL = "fullband-eval"


@dataclass(frozen=True)
class RunConfig:
    command: Command
    seed: int
    manifest_path: Path = None
    output_dir: Path = Path("out")
    system: System = System.GMM_SVM
    k: int = 64
    relevance_r: float = 16.0
    c_param: float = 1.0
    band_mode: BandMode = FULLBAND
    grouping: Grouping = Grouping.SCHOOL
    threads: int = 1
    n_speakers: int = 30

    def system_config(self):
        return SystemConfig(self.system, self.k, self.relevance_r, self.c_param,
                            self.seed, self.threads)


# option name -> (RunConfig field, converter)
def _positive_int(text):
    value = int(text)
    if value < 1:
        raise ValueError("must be a positive integer")
    return value


def _power_of_two(text):
    value = _positive_int(text)
    if value & (value - 1):
        raise ValueError(f"{value} is not a power of two")
    return value


def _nonnegative(text):
    value = float(text)
    if not value >= 0:
        raise ValueError("must be nonnegative")
    return value


def _positive(text):
    value = float(text)
    if not value > 0:
        raise ValueError("must be positive")
    return value


def _enum_parser(cls):
    def parse(text):
        key = str(text).strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"choose from {', '.join(m.name for m in cls)}") from None
    return parse


_OPTIONS = {
    "manifest": ("manifest_path", lambda s: Path(s).expanduser().resolve()),
    "out": ("output_dir", lambda s: Path(s).expanduser().resolve()),
    "system": ("system", _enum_parser(System)),
    "k": ("k", _power_of_two),
    "relevance": ("relevance_r", _nonnegative),
    "c": ("c_param", _positive),
    "band": ("band_mode", BandMode.parse),
    "grouping": ("grouping", _enum_parser(Grouping)),
    "seed": ("seed", int),
    "threads": ("threads", _positive_int),
    "speakers": ("n_speakers", _positive_int),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="kidsr", description="Speaker recognition for children's speech.")
    parser.add_argument("command", choices=[c.value for c in Command])
    parser.add_argument("--config", help="flat key=value file; flags override it")
    parser.add_argument("--manifest", help="corpus manifest CSV")
    parser.add_argument("--out", help="output directory (default ./out)")
    parser.add_argument("--system", help="GMM_UBM or GMM_SVM (default GMM_SVM)")
    parser.add_argument("--k", help="GMM components, a power of two (default 64)")
    parser.add_argument("--relevance", help="MAP relevance factor (default 16)")
    parser.add_argument("--c", help="SVM soft-margin constant (default 1)")
    parser.add_argument("--band", help="'full' or a sub-band index 1-21 (default full)")
    parser.add_argument("--grouping", help="AGE_GROUPS, CLASSROOM or SCHOOL (default SCHOOL)")
    parser.add_argument("--seed", help="random seed (required)")
    parser.add_argument("--threads", help="worker threads (default: all CPUs)")
    parser.add_argument("--speakers", help="number of synthetic speakers for synth (default 30)")
    return parser


def read_config_file(path):
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"--config: {exc}") from exc
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lstrip("-").replace("_", "-")
        if key == "c-param":
            key = "c"
        if key not in _OPTIONS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        values[key] = value
    return values


def parse_config(argv):
    """Flags override config-file keys, which override defaults."""
    args = _build_parser().parse_args(argv)
    merged = read_config_file(args.config) if args.config else {}
    for key in _OPTIONS:
        flag = getattr(args, key)
        if flag is not None:
            merged[key] = flag
    fields = {"threads": os.cpu_count() or 1}
    for key, text in merged.items():
        name, convert = _OPTIONS[key]
        try:
            fields[name] = convert(text)
        except ValueError as exc:
            raise UsageError(f"--{key} {text!r}: {exc}") from None
    if "seed" not in fields:
        raise UsageError("--seed is required")
    command = Command(args.command)
    if command is not Command.SYNTH and "manifest_path" not in fields:
        raise UsageError(f"{command.value} needs --manifest")
    return RunConfig(command=command, **fields)


# --------------------------------------------------------------------------
# commands

def _load_speakers(cfg):
    records = corpus.load_manifest(cfg.manifest_path)
    return evaluation.prepare_speakers(
        records,
        lambda r: corpus.read_wav(r.path, r.utterance_id, r.speaker_id),
        cfg.threads,
    )


def _ubm_path(cfg):
    return cfg.output_dir / "ubm.ksgm"


def _model_path(cfg, speaker_id):
    ext = "ksgm" if cfg.system is System.GMM_UBM else "ksvm"
    return cfg.output_dir / "models" / f"{speaker_id}.{ext}"


def _require(path, what):
    if not path.exists():
        raise KidsrError(f"{what} model not found: {path}")
    return path


def _cmd_synth(cfg):
    synthetic = corpus.synth_corpus(cfg.n_speakers, cfg.seed)
    for record in synthetic.records:
        corpus.write_wav(cfg.output_dir / record.path, synthetic.clips[record.utterance_id])
    records = [replace(r, path=cfg.output_dir / r.path) for r in synthetic.records]
    corpus.write_manifest(cfg.output_dir / "manifest.csv", records)
    log.info("wrote %d utterances for %d speakers", len(records), cfg.n_speakers)


def _cmd_train_ubm(cfg):
    speakers = _load_speakers(cfg)
    ubm = evaluation.train_background(speakers, cfg.band_mode, cfg.system_config())
    save_gmm(_ubm_path(cfg), ubm)


def _cmd_enroll(cfg):
    ubm = load_gmm(_require(_ubm_path(cfg), "UBM"))
    speakers = _load_speakers(cfg)
    models = evaluation.enroll_speakers(speakers, ubm, cfg.band_mode, cfg.system_config())
    for spk, model in models.items():
        if cfg.system is System.GMM_UBM:
            save_gmm(_model_path(cfg, spk), model)
        else:
            save_svm(_model_path(cfg, spk), model)


def _score(cfg):
    ubm = load_gmm(_require(_ubm_path(cfg), "UBM"))
    speakers = _load_speakers(cfg)
    models = {}
    for s in speakers:
        path = _require(_model_path(cfg, s.speaker_id), f"speaker {s.speaker_id!r}")
        models[s.speaker_id] = load_gmm(path) if cfg.system is System.GMM_UBM else load_svm(path)
    return evaluation.score_tests(speakers, models, ubm, cfg.band_mode, cfg.system_config())


def _cmd_verify(cfg):
    matrix, index, model_ids = _score(cfg)
    records = evaluation.verification_scores(matrix, index, model_ids, cfg.seed)
    evaluation.write_scores_csv(cfg.output_dir / "scores.csv", records)
    report = evaluation.EvalReport(cfg.system, cfg.band_mode, evaluation.eer_of(records), 0.0,
                                   len(records), cfg.seed, label="verify",
                                   n_speakers=len(model_ids), n_tests=len(index))
    report.id_accuracy_percent = 100.0 * _accuracy(
        evaluation.identification_results(matrix, index, model_ids))
    evaluation.write_reports_csv(cfg.output_dir / "verify_report.csv", [report])
    print(f"EER {report.eer_percent:.2f}% over {len(records)} trials")


def _accuracy(ids):
    return sum(t == p for _, t, p in ids) / len(ids) if ids else 0.0


def _cmd_identify(cfg):
    matrix, index, model_ids = _score(cfg)
    ids = evaluation.identification_results(matrix, index, model_ids)
    evaluation.write_identifications_csv(cfg.output_dir / "identification.csv", ids)
    print(f"identification {100.0 * _accuracy(ids):.2f}% over {len(ids)} tests")


def _cmd_subband_sweep(cfg):
    speakers = _load_speakers(cfg)
    report = evaluation.subband_sweep(speakers, cfg.system_config())
    evaluation.write_sweep_csv(cfg.output_dir / "subband_sweep.csv", report)
    print(f"mean sub-band EER {report.eer_percent:.2f}%, ID {report.id_accuracy_percent:.2f}%")


def _cmd_fullband_eval(cfg):
    speakers = _load_speakers(cfg)
    reports = evaluation.fullband_eval(speakers, cfg.system_config(), cfg.grouping, cfg.band_mode)
    name = f"fullband_{cfg.grouping.value.lower()}.csv"
    evaluation.write_reports_csv(cfg.output_dir / name, reports)
    for r in reports:
        print(f"{r.label}: EER {r.eer_percent:.2f}%  ID {r.id_accuracy_percent:.2f}%")


_DISPATCH = {
    Command.SYNTH: _cmd_synth,
    Command.TRAIN_UBM: _cmd_train_ubm,
    Command.ENROLL: _cmd_enroll,
    Command.VERIFY: _cmd_verify,
    Command.IDENTIFY: _cmd_identify,
    Command.SUBBAND_SWEEP: _cmd_subband_sweep,
    Command.FULLBAND_EVAL: _cmd_fullband_eval,
}


def run(cfg):
    """Execute one command. Exit codes: 0 ok, 1 pipeline failure."""
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        _DISPATCH[cfg.command](cfg)
    except (KidsrError, OSError, ValueError) as exc:
        print(f"kidsr {cfg.command.value}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"kidsr: usage error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
