"""Command-line interface.

Each subcommand wraps one pipeline stage over explicit file arguments;
``run-grid`` drives the whole cached experiment grid from a config file.

Exit codes: 0 success, 1 usage/configuration, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .config import FrontendConfig, load_config, write_default_config
from .errors import (
    ConfigurationError,
    DataError,
    NumericalError,
    SvkitError,
    TooShortUtteranceError,
)
from .evaluation import (
    TrialScore,
    evaluate_condition,
    read_scores,
    read_trials,
    report_to_json,
    report_to_text,
    write_scores,
)
from .frontend import (
    FeatureMatrix,
    append_deltas,
    compute_mfcc,
    energy_vad,
    read_wav,
    sliding_cmn,
    truncate_utterance,
    write_wav,
)
from .gmm import DiagGmm
from .pipeline import run_grid
from .plda import Gplda, center_and_length_normalize, normalize_vector
from .stats import SuffStats, accumulate_stats, center_stats
from .synthgen import CorpusManifest, UtteranceRecord, generate_corpus
from .tdnn import Tdnn, labels_to_posteriors, parse_splice_spec
from .total_variability import TotalVariability

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_arg(sub):
    sub.add_argument("--config", type=Path, default=None, help="pipeline config INI")


def _frontend_config(args):
    if args.config is not None:
        return load_config(args.config).frontend
    return FrontendConfig()


def _feature_files(directory: Path):
    files = sorted(Path(directory).glob("*.feat"))
    if not files:
        raise DataError(f"no feature files under {directory}")
    return files


def _read_feature_matrix(path, frame_shift):
    frames, kind = fileio.read_features(path)
    return FeatureMatrix(frames, frame_shift, kind)


# --- subcommand handlers -----------------------------------------------------

def _cmd_synth_corpus(args):
    config = load_config(args.spec)
    manifest = generate_corpus(config.corpus, args.out)
    print(f"wrote {len(manifest.records)} utterances under {args.out}")
    return 0


def _cmd_features(args):
    fe = _frontend_config(args)
    manifest = CorpusManifest.load(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in manifest.records:
        signal = read_wav(manifest.root / rec.path)
        if args.kind == "speaker":
            feats = compute_mfcc(
                signal, fe.speaker_coeffs, fe.frame_len, fe.frame_shift,
                n_mels=fe.speaker_mels, pre_emphasis=fe.pre_emphasis, kind="speaker",
            )
            feats = append_deltas(feats, fe.delta_context)
            window = fe.speaker_cmn_window
        else:
            feats = compute_mfcc(
                signal, fe.asr_coeffs, fe.frame_len, fe.frame_shift,
                n_mels=fe.asr_mels, pre_emphasis=fe.pre_emphasis, kind="asr",
            )
            window = fe.asr_cmn_window
        if window > 0:
            feats = sliding_cmn(feats, window)
        fileio.write_features(out_dir / f"{rec.utterance_id}.feat", feats.frames, args.kind)
    print(f"wrote {len(manifest.records)} {args.kind} feature files to {out_dir}")
    return 0


def _cmd_truncate(args):
    fe = _frontend_config(args)
    manifest = CorpusManifest.load(args.manifest)
    out_dir = Path(args.out)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    kept = []
    for rec in manifest.records:
        signal = read_wav(manifest.root / rec.path)
        feats = compute_mfcc(
            signal, fe.speaker_coeffs, fe.frame_len, fe.frame_shift,
            n_mels=fe.speaker_mels, pre_emphasis=fe.pre_emphasis,
        )
        vad = energy_vad(feats, fe.vad_offset_db)
        try:
            shorter = truncate_utterance(
                signal, vad, args.skip_active, args.keep, frame_shift=fe.frame_shift
            )
        except TooShortUtteranceError as exc:
            logger.warning("excluding %s: %s", rec.utterance_id, exc)
            continue
        write_wav(out_dir / "wav" / f"{rec.utterance_id}.wav", shorter)
        labels, n_classes = fileio.read_labels(manifest.root / rec.labels_path)
        start = int(np.argmax(np.cumsum(vad) * fe.frame_shift >= args.skip_active - 1e-9)) + 1
        n_keep = int(round(args.keep / fe.frame_shift))
        sliced = labels[min(start, len(labels)) : min(start + n_keep, len(labels))]
        fileio.write_labels(out_dir / "labels" / f"{rec.utterance_id}.lab", sliced, n_classes)
        kept.append(
            UtteranceRecord(
                rec.utterance_id, rec.speaker_id,
                f"wav/{rec.utterance_id}.wav", f"labels/{rec.utterance_id}.lab",
            )
        )
    CorpusManifest(out_dir, kept).save(out_dir / "manifest.tsv")
    print(f"kept {len(kept)} of {len(manifest.records)} utterances")
    return 0


def _cmd_train_ubm(args):
    fe = _frontend_config(args)
    pool = []
    for path in _feature_files(args.features):
        feats = _read_feature_matrix(path, fe.frame_shift)
        mask = (
            np.ones(feats.n_frames, dtype=bool)
            if args.no_vad
            else energy_vad(feats, fe.vad_offset_db)
        )
        pool.append(feats.frames[mask])
    frames = np.vstack(pool)
    if len(frames) > args.max_frames:
        rng = np.random.default_rng(args.seed)
        keep = rng.choice(len(frames), size=args.max_frames, replace=False)
        frames = frames[np.sort(keep)]
    model = DiagGmm(n_components=args.components, n_iter=args.iters, seed=args.seed).fit(frames)
    model.save(args.out)
    print(f"trained {args.components}-component model on {len(frames)} frames -> {args.out}")
    return 0


def _cmd_train_tdnn(args):
    fe = _frontend_config(args)
    feats_list, labels_list = [], []
    for path in _feature_files(args.features):
        feats = _read_feature_matrix(path, fe.frame_shift)
        labels, n_classes = fileio.read_labels(Path(args.labels) / f"{path.stem}.lab")
        if n_classes > args.senones:
            raise DataError(f"{path.stem}: labels use {n_classes} classes > {args.senones}")
        t = min(feats.n_frames, len(labels))
        feats_list.append(FeatureMatrix(feats.frames[:t], fe.frame_shift, feats.kind))
        labels_list.append(labels[:t])
    net = Tdnn(
        n_senones=args.senones,
        splices=parse_splice_spec(args.layers),
        hidden_width=args.hidden,
        group_size=args.group,
        learning_rate=args.lr,
        batch_frames=args.batch_frames,
        n_epochs=args.epochs,
        seed=args.seed,
    ).fit(feats_list, labels_list)
    net.save(args.out)
    print(f"trained network (final epoch loss {net.loss_path_[-1]:.4f}) -> {args.out}")
    return 0


def _cmd_posteriors(args):
    fe = _frontend_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.source == "gmm":
        model = DiagGmm.load(args.model)
        compute = lambda feats, stem: model.predict_proba(feats.frames)
    elif args.source == "tdnn":
        net = Tdnn.load(args.model)
        compute = lambda feats, stem: net.forward(feats)
    else:
        in_dir = Path(args.posteriors)
        compute = lambda feats, stem: fileio.read_posteriors(in_dir / f"{stem}.post")
    count = 0
    for path in _feature_files(args.features):
        feats = _read_feature_matrix(path, fe.frame_shift)
        gamma = compute(feats, path.stem)
        fileio.write_posteriors(out_dir / f"{path.stem}.post", gamma, sparse_top_k=args.sparse_top_k)
        count += 1
    print(f"wrote {count} posterior files to {out_dir}")
    return 0


def _cmd_accumulate_stats(args):
    fe = _frontend_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = args.posterior_source
    if source == "gmm":
        model = DiagGmm.load(args.model)
    elif source == "tdnn":
        net = Tdnn.load(args.model)
    count = 0
    for path in _feature_files(args.features):
        feats = _read_feature_matrix(path, fe.frame_shift)
        if source == "gmm":
            gamma = model.predict_proba(feats.frames)
        elif source == "tdnn":
            gamma = net.forward(feats)
        elif source == "oracle":
            labels, n_classes = fileio.read_labels(Path(args.labels) / f"{path.stem}.lab")
            gamma = labels_to_posteriors(labels, n_classes)
        else:
            gamma = fileio.read_posteriors(Path(args.posteriors) / f"{path.stem}.post")
        mask = (
            np.ones(feats.n_frames, dtype=bool)
            if args.no_vad
            else energy_vad(feats, fe.vad_offset_db)
        )
        stats = accumulate_stats(gamma, feats, mask)
        stats.save(out_dir / f"{path.stem}.stats")
        count += 1
    print(f"wrote {count} statistics files to {out_dir}")
    return 0


def _load_stats_dir(directory):
    files = sorted(Path(directory).glob("*.stats"))
    if not files:
        raise DataError(f"no statistics files under {directory}")
    return files


def _cmd_train_tv(args):
    _, means, variances = fileio.read_gmm(args.class_model)
    centered = [
        center_stats(SuffStats.load(path), means) for path in _load_stats_dir(args.stats)
    ]
    model = TotalVariability(rank=args.rank, n_iter=args.iters, seed=args.seed).fit(
        centered, means, variances
    )
    model.save(args.out)
    print(f"trained rank-{args.rank} subspace on {len(centered)} utterances -> {args.out}")
    return 0


def _cmd_extract_ivectors(args):
    model = TotalVariability.load(args.tv)
    records = []
    for path in _load_stats_dir(args.stats):
        stats = SuffStats.load(path)
        centered = center_stats(stats, model.ubm_means_)
        w = model.extract(centered)
        records.append((path.stem, stats.n.sum() * args.frame_shift, w))
    fileio.write_ivectors(args.out, records)
    print(f"extracted {len(records)} vectors -> {args.out}")
    return 0


def _speaker_of(utt_id: str, manifest: CorpusManifest | None) -> str:
    base = utt_id.split(":")[0]
    if manifest is not None:
        for rec in manifest.records:
            if rec.utterance_id == base:
                return rec.speaker_id
        raise DataError(f"utterance {base!r} not in manifest")
    return base.split("-")[0]


def _cmd_train_plda(args):
    records = fileio.read_ivectors(args.ivectors)
    manifest = CorpusManifest.load(args.manifest) if args.manifest else None
    vectors = np.stack([vec for _, _, vec in records])
    speakers = np.array([_speaker_of(uid, manifest) for uid, _, _ in records])
    mean = vectors.mean(axis=0)
    normalized, kept = center_and_length_normalize(vectors, mean)
    model = Gplda(n_iter=args.iters, method=args.method, seed=args.seed).fit(
        normalized, speakers[kept]
    )
    model.save(args.out)
    np.save(args.out_mean, mean)
    print(f"trained backend on {len(normalized)} vectors -> {args.out}")
    return 0


def _cmd_score(args):
    model = Gplda.load(args.plda)
    mean = np.load(args.mean)
    index = {}
    for path in args.ivectors:
        for uid, _, vec in fileio.read_ivectors(path):
            index[uid] = vec
    trials = read_trials(args.trials)
    missing = [t for t in trials if t.enrol_id not in index or t.test_id not in index]
    if missing:
        raise DataError(f"{len(missing)} trials reference vectors absent from the index")
    enrol = np.stack([normalize_vector(index[t.enrol_id], mean) for t in trials])
    test = np.stack([normalize_vector(index[t.test_id], mean) for t in trials])
    values = model.llr(enrol, test)
    write_scores(
        args.out,
        [TrialScore(t.enrol_id, t.test_id, float(v), t.label) for t, v in zip(trials, values)],
    )
    print(f"scored {len(trials)} trials -> {args.out}")
    return 0


def _cmd_evaluate(args):
    scores = read_scores(args.scores)
    trials = read_trials(args.trials)
    report = evaluate_condition(scores, trials, condition=args.condition)
    txt = Path(f"{args.out_prefix}.txt")
    txt.write_text(report_to_text(report))
    Path(f"{args.out_prefix}.json").write_text(report_to_json(report))
    print(f"condition {report.condition or '(untagged)'}: eer {100.0 * report.eer:.3f}%")
    return 0


def _cmd_run_grid(args):
    if args.write_default_config:
        write_default_config(args.write_default_config)
        print(f"wrote default config to {args.write_default_config}")
        return 0
    if args.config is None or args.workdir is None:
        raise ConfigurationError("run-grid needs --config and --workdir")
    config = load_config(args.config)
    text, _ = run_grid(config, args.workdir, force=args.force)
    print(text)
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="svkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-corpus", help="generate a synthetic labeled corpus")
    p.add_argument("--spec", type=Path, required=True, help="config INI with a [corpus] section")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=_cmd_synth_corpus)

    p = sub.add_parser("features", help="extract features from a waveform manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--kind", choices=("speaker", "asr"), required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_arg(p)
    p.set_defaults(handler=_cmd_features)

    p = sub.add_parser("truncate", help="apply the active-speech truncation protocol to waveforms")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--skip-active", type=float, default=10.0)
    p.add_argument("--keep", type=float, default=30.0)
    _add_config_arg(p)
    p.set_defaults(handler=_cmd_truncate)

    p = sub.add_parser("train-ubm", help="train the background mixture model")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--components", type=int, default=64)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--max-frames", type=int, default=200000)
    p.add_argument("--no-vad", action="store_true")
    _add_config_arg(p)
    p.set_defaults(handler=_cmd_train_ubm)

    p = sub.add_parser("train-tdnn", help="train the alignment network on labeled features")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--senones", type=int, default=64)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument(
        "--layers",
        default="-2,-1,0,1,2;-1,0,1;-2,0,2;0",
        help="semicolon-separated splice offset lists, one per layer",
    )
    p.add_argument("--hidden", type=int, default=80)
    p.add_argument("--group", type=int, default=8)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-frames", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=7)
    _add_config_arg(p)
    p.set_defaults(handler=_cmd_train_tdnn)

    p = sub.add_parser("posteriors", help="write per-utterance alignment posteriors")
    p.add_argument("--source", choices=("gmm", "tdnn", "file"), required=True)
    p.add_argument("--model", type=Path, help="model file for gmm/tdnn sources")
    p.add_argument("--posteriors", type=Path, help="input directory for the file source")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sparse-top-k", type=int, default=None)
    _add_config_arg(p)
    p.set_defaults(handler=_cmd_posteriors)

    p = sub.add_parser("accumulate-stats", help="accumulate occupancy statistics per utterance")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--posterior-source", choices=("gmm", "tdnn", "file", "oracle"), required=True)
    p.add_argument("--model", type=Path)
    p.add_argument("--posteriors", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-vad", action="store_true")
    _add_config_arg(p)
    p.set_defaults(handler=_cmd_accumulate_stats)

    p = sub.add_parser("train-tv", help="train the total-variability subspace")
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--class-model", type=Path, required=True, help="centering means/variances")
    p.add_argument("--rank", type=int, default=20)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=_cmd_train_tv)

    p = sub.add_parser("extract-ivectors", help="extract fixed-length vectors from statistics")
    p.add_argument("--stats", type=Path, required=True)
    p.add_argument("--tv", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--frame-shift", type=float, default=0.01)
    p.set_defaults(handler=_cmd_extract_ivectors)

    p = sub.add_parser("train-plda", help="train the verification backend")
    p.add_argument("--ivectors", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--out-mean", type=Path, required=True)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--method", choices=("em", "scatter"), default="em")
    p.add_argument("--manifest", type=Path, default=None, help="utterance-to-speaker map")
    p.set_defaults(handler=_cmd_train_plda)

    p = sub.add_parser("score", help="score a trial list")
    p.add_argument("--plda", type=Path, required=True)
    p.add_argument("--mean", type=Path, required=True)
    p.add_argument("--ivectors", type=Path, action="append", required=True)
    p.add_argument("--trials", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=_cmd_score)

    p = sub.add_parser("evaluate", help="equal error rate report for scored trials")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--trials", type=Path, required=True)
    p.add_argument("--condition", default="")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("run-grid", help="run the full cached experiment grid")
    p.add_argument("--config", type=Path)
    p.add_argument("--workdir", type=Path)
    p.add_argument("--force", action="store_true")
    p.add_argument("--write-default-config", type=Path, default=None)
    p.set_defaults(handler=_cmd_run_grid)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args) or 0
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SvkitError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
