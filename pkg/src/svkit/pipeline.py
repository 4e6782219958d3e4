"""Staged experiment pipeline with content-addressed caching.

Every stage records the hashes of its inputs, parameters, and outputs in a
state file. A stage is skipped when nothing changed; a tampered or stale
artifact raises an error naming the stage rather than silently recomputing.
Reports carry the hash of every upstream artifact, so a result is traceable
to the exact bytes that produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import fileio
from .config import PipelineConfig
from .errors import PipelineConfigError, StaleArtifactError, SvkitError
from .evaluation import (
    TrialScore,
    evaluate_condition,
    read_scores,
    read_trials,
    report_to_json,
    report_to_text,
    write_scores,
    write_trials,
)
from .frontend import (
    FeatureMatrix,
    append_deltas,
    compute_mfcc,
    energy_vad,
    read_wav,
    sliding_cmn,
    truncate_features,
)
from .gmm import DiagGmm
from .plda import Gplda, center_and_length_normalize, normalize_vector
from .stats import SuffStats, accumulate_stats, center_stats, occupancy_means
from .synthgen import FULL, SHORT, CorpusManifest, generate_corpus, make_trials, variant_id
from .tdnn import Tdnn, labels_to_posteriors, parse_splice_spec
from .total_variability import TotalVariability

logger = logging.getLogger(__name__)

VARIANTS = (FULL, SHORT)


def _hash_params(params: dict) -> str:
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()


class _StageRunner:
    """Executes stages with skip/verify bookkeeping under ``workdir/state``."""

    def __init__(self, workdir: Path, force: bool = False):
        self.workdir = Path(workdir)
        self.state_dir = self.workdir / "state"
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.force = force
        self._digests: dict[str, str] = {}
        self._producers: dict[str, tuple[str, str]] = {}
        for state_file in sorted(self.state_dir.glob("*.json")):
            record = json.loads(state_file.read_text())
            for rel, digest in record.get("outputs", {}).items():
                self._producers[rel] = (record["stage"], digest)

    def _digest(self, rel: str) -> str:
        if rel not in self._digests:
            self._digests[rel] = fileio.sha256_file(self.workdir / rel)
        return self._digests[rel]

    def digest_of(self, rel: str) -> str:
        return self._digest(rel)

    def run(self, name: str, params: dict, inputs: list, outputs: list, fn) -> None:
        state_path = self.state_dir / f"{name}.json"
        params_hash = _hash_params(params)

        for rel in inputs:
            if not (self.workdir / rel).exists():
                raise PipelineConfigError(f"stage '{name}': missing input artifact '{rel}'")
        input_hashes = {rel: self._digest(rel) for rel in inputs}
        if not self.force:
            for rel, digest in input_hashes.items():
                producer = self._producers.get(rel)
                if producer is not None and producer[1] != digest:
                    raise StaleArtifactError(
                        f"stage '{name}': input '{rel}' does not match the hash recorded by "
                        f"stage '{producer[0]}'; re-run required (use force)"
                    )

        if state_path.exists() and not self.force:
            record = json.loads(state_path.read_text())
            if record["params"] != params_hash or record["inputs"] != input_hashes:
                raise StaleArtifactError(
                    f"stage '{name}': recorded inputs or parameters changed; "
                    "re-run required (use force or a fresh work directory)"
                )
            for rel, digest in record["outputs"].items():
                path = self.workdir / rel
                if not path.exists() or self._digest(rel) != digest:
                    raise StaleArtifactError(
                        f"stage '{name}': output '{rel}' does not match its recorded hash; "
                        "re-run required (use force)"
                    )
            logger.info("stage %s: up to date, skipped", name)
            return

        logger.info("stage %s: running", name)
        try:
            fn()
        except SvkitError as exc:
            raise type(exc)(f"stage '{name}': {exc}") from exc
        output_hashes = {}
        for rel in outputs:
            path = self.workdir / rel
            if not path.exists():
                raise PipelineConfigError(f"stage '{name}' did not produce '{rel}'")
            self._digests.pop(rel, None)
            output_hashes[rel] = self._digest(rel)
            self._producers[rel] = (name, output_hashes[rel])
        record = {
            "stage": name,
            "params": params_hash,
            "inputs": input_hashes,
            "outputs": output_hashes,
        }
        fileio.atomic_write_bytes(state_path, (json.dumps(record, indent=2, sort_keys=True) + "\n").encode())


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class Pipeline:
    """End-to-end experiment over one synthetic corpus.

    Stage order: corpus, streams, short variants, trials, per-source
    alignment training, statistics, subspace training, vector extraction,
    per-duration PLDA training, then scoring and reports per grid cell.
    """

    def __init__(self, config: PipelineConfig, workdir, force: bool = False):
        config.validate()
        self.cfg = config
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.runner = _StageRunner(self.workdir, force=force)
        self.waveform = config.corpus.mode == "waveform"
        self._utterances: list[tuple[str, str]] | None = None

    # -- bookkeeping ---------------------------------------------------------

    def _corpus_ids(self) -> list[tuple[str, str]]:
        if self._utterances is None:
            spec = self.cfg.corpus
            self._utterances = [
                (f"s{spk:04d}-u{ses:02d}", f"s{spk:04d}")
                for spk in range(spec.n_speakers)
                for ses in range(spec.sessions_per_speaker)
            ]
        return self._utterances

    def _speakers(self) -> list[str]:
        return sorted({spk for _, spk in self._corpus_ids()})

    def dev_eval_split(self) -> tuple[list[str], list[str]]:
        speakers = self._speakers()
        rng = np.random.default_rng([self.cfg.corpus.seed, 9])
        order = rng.permutation(len(speakers))
        n_dev = max(1, int(round(self.cfg.run.dev_fraction * len(speakers))))
        n_dev = min(n_dev, len(speakers) - 1)
        dev = sorted(speakers[i] for i in order[:n_dev])
        eval_ = sorted(speakers[i] for i in order[n_dev:])
        return dev, eval_

    # -- per-utterance artifact paths -----------------------------------------

    def _corpus_feature_rel(self, utt: str) -> str:
        sub = "wav" if self.waveform else "feats"
        ext = "wav" if self.waveform else "feat"
        return f"corpus/{sub}/{utt}.{ext}"

    def _speaker_rel(self, utt: str, variant: str) -> str:
        if variant == SHORT:
            return f"short/speaker/{utt}.feat"
        if self.waveform:
            return f"streams/speaker/{utt}.feat"
        return self._corpus_feature_rel(utt)

    def _asr_rel(self, utt: str, variant: str) -> str:
        if not self.waveform:
            return self._speaker_rel(utt, variant)
        if variant == SHORT:
            return f"short/asr/{utt}.feat"
        return f"streams/asr/{utt}.feat"

    def _labels_rel(self, utt: str, variant: str) -> str:
        if variant == SHORT:
            return f"short/labels/{utt}.lab"
        return f"corpus/labels/{utt}.lab"

    def _load_features(self, rel: str) -> FeatureMatrix:
        frames, kind = fileio.read_features(self.workdir / rel)
        return FeatureMatrix(frames, self.cfg.frontend.frame_shift, kind)

    def _vad(self, features: FeatureMatrix) -> np.ndarray:
        return energy_vad(features, self.cfg.frontend.vad_offset_db)

    # -- stages ---------------------------------------------------------------

    def stage_corpus(self) -> None:
        spec = self.cfg.corpus
        outputs = ["corpus/manifest.tsv", "corpus/corpus.json", "corpus/truth.npz"]
        for utt, _ in self._corpus_ids():
            outputs.append(self._corpus_feature_rel(utt))
            outputs.append(f"corpus/labels/{utt}.lab")
        self.runner.run(
            "corpus",
            {"spec": spec.to_dict()},
            [],
            outputs,
            lambda: generate_corpus(spec, self.workdir / "corpus"),
        )

    def stage_streams(self) -> None:
        """Waveform corpora only: run the audio frontend to produce the
        speaker (cepstra + deltas) and alignment (wide cepstra) streams."""
        if not self.waveform:
            return
        fe = self.cfg.frontend
        ids = self._corpus_ids()
        inputs = [self._corpus_feature_rel(utt) for utt, _ in ids]
        outputs = [f"streams/speaker/{utt}.feat" for utt, _ in ids]
        outputs += [f"streams/asr/{utt}.feat" for utt, _ in ids]

        def build():
            (self.workdir / "streams/speaker").mkdir(parents=True, exist_ok=True)
            (self.workdir / "streams/asr").mkdir(parents=True, exist_ok=True)

            def one(item):
                utt, _ = item
                signal = read_wav(self.workdir / self._corpus_feature_rel(utt))
                speaker = compute_mfcc(
                    signal, fe.speaker_coeffs, fe.frame_len, fe.frame_shift,
                    n_mels=fe.speaker_mels, pre_emphasis=fe.pre_emphasis, kind="speaker",
                )
                speaker = append_deltas(speaker, fe.delta_context)
                if fe.speaker_cmn_window > 0:
                    speaker = sliding_cmn(speaker, fe.speaker_cmn_window)
                fileio.write_features(self.workdir / f"streams/speaker/{utt}.feat", speaker.frames, "speaker")
                asr = compute_mfcc(
                    signal, fe.asr_coeffs, fe.frame_len, fe.frame_shift,
                    n_mels=fe.asr_mels, pre_emphasis=fe.pre_emphasis, kind="asr",
                )
                if fe.asr_cmn_window > 0:
                    asr = sliding_cmn(asr, fe.asr_cmn_window)
                fileio.write_features(self.workdir / f"streams/asr/{utt}.feat", asr.frames, "asr")

            _map(one, ids, self.cfg.run.workers)

        self.runner.run("streams", dataclasses.asdict(fe), inputs, outputs, build)

    def stage_short_variants(self) -> None:
        """Cut every utterance down to the short condition: skip the opening
        active speech, keep the configured active duration, and slice the
        label (and alignment) streams over the same frame range."""
        tr = self.cfg.truncate
        ids = self._corpus_ids()
        inputs = [self._speaker_rel(utt, FULL) for utt, _ in ids]
        inputs += [self._labels_rel(utt, FULL) for utt, _ in ids]
        if self.waveform:
            inputs += [self._asr_rel(utt, FULL) for utt, _ in ids]
        outputs = [f"short/speaker/{utt}.feat" for utt, _ in ids]
        outputs += [f"short/labels/{utt}.lab" for utt, _ in ids]
        if self.waveform:
            outputs += [f"short/asr/{utt}.feat" for utt, _ in ids]

        def build():
            (self.workdir / "short/speaker").mkdir(parents=True, exist_ok=True)
            (self.workdir / "short/labels").mkdir(parents=True, exist_ok=True)
            if self.waveform:
                (self.workdir / "short/asr").mkdir(parents=True, exist_ok=True)

            def one(item):
                utt, _ = item
                feats = self._load_features(self._speaker_rel(utt, FULL))
                vad = self._vad(feats)
                short, start, stop = truncate_features(feats, vad, tr.skip_active, tr.keep_active)
                fileio.write_features(self.workdir / f"short/speaker/{utt}.feat", short.frames, "speaker")
                labels, n_classes = fileio.read_labels(self.workdir / self._labels_rel(utt, FULL))
                sliced = labels[min(start, len(labels)) : min(stop, len(labels))]
                fileio.write_labels(self.workdir / f"short/labels/{utt}.lab", sliced, n_classes)
                if self.waveform:
                    asr = self._load_features(self._asr_rel(utt, FULL))
                    lo = min(start, asr.n_frames)
                    hi = min(stop, asr.n_frames)
                    fileio.write_features(self.workdir / f"short/asr/{utt}.feat", asr.frames[lo:hi], "asr")

            _map(one, ids, self.cfg.run.workers)

        self.runner.run(
            "short-variants",
            {"skip_active": tr.skip_active, "keep_active": tr.keep_active},
            inputs,
            outputs,
            build,
        )

    def stage_trials(self) -> None:
        _, eval_speakers = self.dev_eval_split()
        manifest_rel = "corpus/manifest.tsv"
        for condition in self.cfg.run.conditions:
            rel = f"trials/{condition}.trials"

            def build(condition=condition, rel=rel):
                (self.workdir / "trials").mkdir(exist_ok=True)
                manifest = CorpusManifest.load(self.workdir / manifest_rel)
                trials = make_trials(
                    manifest,
                    condition,
                    self.cfg.trials.n_target,
                    self.cfg.trials.n_nontarget,
                    self.cfg.trials.seed,
                    speakers=eval_speakers,
                )
                write_trials(self.workdir / rel, trials)

            self.runner.run(
                f"trials-{condition}",
                {
                    "condition": condition,
                    "n_target": self.cfg.trials.n_target,
                    "n_nontarget": self.cfg.trials.n_nontarget,
                    "seed": self.cfg.trials.seed,
                    "eval_speakers": eval_speakers,
                },
                [manifest_rel],
                [rel],
                build,
            )

    # -- alignment sources -----------------------------------------------------

    def _dev_utterances(self) -> list[str]:
        dev, _ = self.dev_eval_split()
        dev_set = set(dev)
        return [utt for utt, spk in self._corpus_ids() if spk in dev_set]

    def stage_align(self, source: str) -> None:
        if source == "oracle":
            return  # ground-truth labels need no training
        dev_utts = self._dev_utterances()
        if source == "gmm":
            inputs = [self._speaker_rel(utt, FULL) for utt in dev_utts]
            outputs = ["align/gmm/ubm.bin"]
            cfg = self.cfg.ubm

            def build():
                (self.workdir / "align/gmm").mkdir(parents=True, exist_ok=True)
                pool = []
                for utt in dev_utts:
                    feats = self._load_features(self._speaker_rel(utt, FULL))
                    pool.append(feats.frames[self._vad(feats)])
                frames = np.vstack(pool)
                if len(frames) > cfg.max_frames:
                    rng = np.random.default_rng(cfg.seed)
                    keep = rng.choice(len(frames), size=cfg.max_frames, replace=False)
                    frames = frames[np.sort(keep)]
                model = DiagGmm(
                    n_components=cfg.n_components, n_iter=cfg.n_iter, seed=cfg.seed
                ).fit(frames)
                model.save(self.workdir / "align/gmm/ubm.bin")

            self.runner.run("align-gmm", dataclasses.asdict(cfg), inputs, outputs, build)
        elif source == "tdnn":
            inputs = [self._asr_rel(utt, FULL) for utt in dev_utts]
            inputs += [self._labels_rel(utt, FULL) for utt in dev_utts]
            outputs = ["align/tdnn/net.bin"]
            cfg = self.cfg.tdnn

            def build():
                (self.workdir / "align/tdnn").mkdir(parents=True, exist_ok=True)
                feats_list, labels_list = [], []
                for utt in dev_utts:
                    feats = self._load_features(self._asr_rel(utt, FULL))
                    labels, _ = fileio.read_labels(self.workdir / self._labels_rel(utt, FULL))
                    t = min(feats.n_frames, len(labels))
                    feats_list.append(FeatureMatrix(feats.frames[:t], feats.frame_shift, "asr"))
                    labels_list.append(labels[:t])
                net = Tdnn(
                    n_senones=self.cfg.corpus.n_classes,
                    splices=parse_splice_spec(cfg.splices),
                    hidden_width=cfg.hidden_width,
                    group_size=cfg.group_size,
                    learning_rate=cfg.learning_rate,
                    batch_frames=cfg.batch_frames,
                    n_epochs=cfg.n_epochs,
                    seed=cfg.seed,
                ).fit(feats_list, labels_list)
                net.save(self.workdir / "align/tdnn/net.bin")

            self.runner.run("align-tdnn", dataclasses.asdict(cfg), inputs, outputs, build)
        else:
            raise PipelineConfigError(f"unknown alignment source {source!r}")

    def _alignment_inputs(self, source: str, variant_utts) -> list[str]:
        inputs = []
        if source == "gmm":
            inputs.append("align/gmm/ubm.bin")
        elif source == "tdnn":
            inputs.append("align/tdnn/net.bin")
            inputs += [self._asr_rel(u, v) for u, v in variant_utts]
        elif source == "oracle":
            inputs += [self._labels_rel(u, v) for u, v in variant_utts]
        return inputs

    def _posterior_fn(self, source: str):
        """Returns fn(utt, variant, speaker_feats) -> posterior matrix."""
        if source == "gmm":
            model = DiagGmm.load(self.workdir / "align/gmm/ubm.bin")
            return lambda utt, variant, feats: model.predict_proba(feats.frames)
        if source == "tdnn":
            net = Tdnn.load(self.workdir / "align/tdnn/net.bin")

            def from_net(utt, variant, feats):
                asr = self._load_features(self._asr_rel(utt, variant))
                return net.forward(asr)

            return from_net
        if source == "oracle":
            n_classes = self.cfg.corpus.n_classes

            def from_labels(utt, variant, feats):
                labels, _ = fileio.read_labels(self.workdir / self._labels_rel(utt, variant))
                return labels_to_posteriors(labels, n_classes)

            return from_labels
        raise PipelineConfigError(f"unknown alignment source {source!r}")

    def stage_stats(self, source: str) -> None:
        ids = self._corpus_ids()
        variant_utts = [(utt, v) for utt, _ in ids for v in VARIANTS]
        inputs = [self._speaker_rel(u, v) for u, v in variant_utts]
        inputs += self._alignment_inputs(source, variant_utts)
        stats_rel = {(u, v): f"stats/{source}/{u}@{v}.stats" for u, v in variant_utts}
        class_rel = f"align/{source}/classmodel.bin"
        outputs = list(stats_rel.values()) + [class_rel]
        dev_utts = set(self._dev_utterances())

        def build():
            (self.workdir / f"stats/{source}").mkdir(parents=True, exist_ok=True)
            (self.workdir / class_rel).parent.mkdir(parents=True, exist_ok=True)
            posterior_fn = self._posterior_fn(source)

            def one(item):
                utt, variant = item
                feats = self._load_features(self._speaker_rel(utt, variant))
                gamma = posterior_fn(utt, variant, feats)
                stats = accumulate_stats(gamma, feats, self._vad(feats))
                stats.save(self.workdir / stats_rel[(utt, variant)])

            _map(one, variant_utts, self.cfg.run.workers)

            if source == "gmm":
                model = DiagGmm.load(self.workdir / "align/gmm/ubm.bin")
                weights, means, variances = model.weights_, model.means_, model.variances_
            else:
                dev_stats = [
                    SuffStats.load(self.workdir / stats_rel[(u, FULL)])
                    for u in sorted(dev_utts)
                ]
                means, variances = occupancy_means(dev_stats)
                total = np.sum([st.n for st in dev_stats], axis=0)
                weights = total / total.sum()
            fileio.write_gmm(self.workdir / class_rel, weights, means, variances)

        self.runner.run(
            f"stats-{source}",
            {"source": source, "frame_shift": self.cfg.frontend.frame_shift,
             "vad_offset_db": self.cfg.frontend.vad_offset_db},
            inputs,
            outputs,
            build,
        )

    def stage_tv(self, source: str) -> None:
        dev_utts = self._dev_utterances()
        class_rel = f"align/{source}/classmodel.bin"
        inputs = [f"stats/{source}/{u}@full.stats" for u in dev_utts] + [class_rel]
        out_rel = f"tv/{source}/tv.bin"
        cfg = self.cfg.tv

        def build():
            (self.workdir / f"tv/{source}").mkdir(parents=True, exist_ok=True)
            _, means, variances = fileio.read_gmm(self.workdir / class_rel)
            centered = [
                center_stats(SuffStats.load(self.workdir / f"stats/{source}/{u}@full.stats"), means)
                for u in dev_utts
            ]
            model = TotalVariability(
                rank=cfg.rank, n_iter=cfg.n_iter, seed=cfg.seed, update_sigma=cfg.update_sigma
            ).fit(centered, means, variances)
            model.save(self.workdir / out_rel)

        self.runner.run(f"tv-{source}", dataclasses.asdict(cfg), inputs, [out_rel], build)

    def stage_ivectors(self, source: str) -> None:
        dev, eval_ = self.dev_eval_split()
        groups = {"dev": set(dev), "eval": set(eval_)}
        ids = self._corpus_ids()
        tv_rel = f"tv/{source}/tv.bin"
        inputs = [f"stats/{source}/{u}@{v}.stats" for u, _ in ids for v in VARIANTS]
        inputs.append(tv_rel)
        out_rels = {
            (group, v): f"ivectors/{source}/{group}-{v}.ivec"
            for group in groups
            for v in VARIANTS
        }

        def build():
            (self.workdir / f"ivectors/{source}").mkdir(parents=True, exist_ok=True)
            model = TotalVariability.load(self.workdir / tv_rel)
            shift = self.cfg.frontend.frame_shift
            for (group, variant), rel in out_rels.items():
                records = []
                for utt, spk in ids:
                    if spk not in groups[group]:
                        continue
                    stats = SuffStats.load(self.workdir / f"stats/{source}/{utt}@{variant}.stats")
                    centered = center_stats(stats, model.ubm_means_)
                    w = model.extract(centered)
                    records.append((variant_id(utt, variant), stats.n.sum() * shift, w))
                fileio.write_ivectors(self.workdir / rel, records)

        self.runner.run(
            f"ivectors-{source}",
            {"frame_shift": self.cfg.frontend.frame_shift},
            inputs,
            list(out_rels.values()),
            build,
        )

    def stage_plda(self, source: str, duration: str) -> None:
        dev_rel = f"ivectors/{source}/dev-{duration}.ivec"
        model_rel = f"plda/{source}/{duration}.bin"
        mean_rel = f"plda/{source}/{duration}.mean.npy"
        cfg = self.cfg.plda

        def build():
            (self.workdir / f"plda/{source}").mkdir(parents=True, exist_ok=True)
            records = fileio.read_ivectors(self.workdir / dev_rel)
            vectors = np.stack([vec for _, _, vec in records])
            speakers = np.array([uid.split("-")[0] for uid, _, _ in records])
            mean = vectors.mean(axis=0)
            normalized, kept = center_and_length_normalize(vectors, mean)
            model = Gplda(n_iter=cfg.n_iter, method=cfg.method, seed=cfg.seed).fit(
                normalized, speakers[kept]
            )
            model.save(self.workdir / model_rel)
            np.save(self.workdir / mean_rel, mean)

        self.runner.run(
            f"plda-{source}-{duration}",
            dataclasses.asdict(cfg) | {"duration": duration},
            [dev_rel],
            [model_rel, mean_rel],
            build,
        )

    # -- scoring and reporting ---------------------------------------------------

    @staticmethod
    def _condition_variants(condition: str) -> tuple[str, str]:
        enrol = FULL if condition.startswith("full") else SHORT
        test = SHORT if condition.endswith("short") else FULL
        return enrol, test

    def stage_score(self, source: str, duration: str, condition: str) -> None:
        enrol_v, test_v = self._condition_variants(condition)
        model_rel = f"plda/{source}/{duration}.bin"
        mean_rel = f"plda/{source}/{duration}.mean.npy"
        trials_rel = f"trials/{condition}.trials"
        ivec_rels = sorted({f"ivectors/{source}/eval-{enrol_v}.ivec", f"ivectors/{source}/eval-{test_v}.ivec"})
        out_rel = f"scores/{source}/{duration}/{condition}.scores"

        def build():
            (self.workdir / f"scores/{source}/{duration}").mkdir(parents=True, exist_ok=True)
            model = Gplda.load(self.workdir / model_rel)
            mean = np.load(self.workdir / mean_rel)
            index = {}
            for rel in ivec_rels:
                for uid, _, vec in fileio.read_ivectors(self.workdir / rel):
                    index[uid] = vec
            trials = read_trials(self.workdir / trials_rel)
            missing = [t for t in trials if t.enrol_id not in index or t.test_id not in index]
            if missing:
                raise PipelineConfigError(
                    f"{len(missing)} trials reference unknown vectors, e.g. "
                    f"{missing[0].enrol_id}/{missing[0].test_id}"
                )
            enrol = np.stack([normalize_vector(index[t.enrol_id], mean) for t in trials])
            test = np.stack([normalize_vector(index[t.test_id], mean) for t in trials])
            values = model.llr(enrol, test)
            scores = [
                TrialScore(t.enrol_id, t.test_id, float(v), t.label)
                for t, v in zip(trials, values)
            ]
            write_scores(self.workdir / out_rel, scores)

        self.runner.run(
            f"score-{source}-{duration}-{condition}",
            {"source": source, "duration": duration, "condition": condition},
            [model_rel, mean_rel, trials_rel] + ivec_rels,
            [out_rel],
            build,
        )

    def stage_report(self, source: str, duration: str, condition: str) -> None:
        scores_rel = f"scores/{source}/{duration}/{condition}.scores"
        trials_rel = f"trials/{condition}.trials"
        upstream = [
            "corpus/manifest.tsv",
            f"align/{source}/classmodel.bin",
            f"tv/{source}/tv.bin",
            f"plda/{source}/{duration}.bin",
            trials_rel,
            scores_rel,
        ]
        if source in ("gmm", "tdnn"):
            upstream.insert(1, f"align/{source}/{'ubm' if source == 'gmm' else 'net'}.bin")
        txt_rel = f"reports/{source}/{duration}/{condition}.txt"
        json_rel = f"reports/{source}/{duration}/{condition}.json"

        def build():
            (self.workdir / f"reports/{source}/{duration}").mkdir(parents=True, exist_ok=True)
            scores = read_scores(self.workdir / scores_rel)
            trials = read_trials(self.workdir / trials_rel)
            report = evaluate_condition(scores, trials, condition=condition)
            provenance = {rel: self.runner.digest_of(rel) for rel in upstream}
            (self.workdir / txt_rel).write_text(report_to_text(report, provenance))
            (self.workdir / json_rel).write_text(report_to_json(report, provenance))

        self.runner.run(
            f"report-{source}-{duration}-{condition}",
            {"source": source, "duration": duration, "condition": condition},
            upstream,
            [txt_rel, json_rel],
            build,
        )

    # -- drivers -------------------------------------------------------------------

    def run(self) -> Path:
        """Execute every stage for the configured grid; returns the workdir."""
        self.stage_corpus()
        self.stage_streams()
        self.stage_short_variants()
        self.stage_trials()
        for source in self.cfg.run.sources:
            self.stage_align(source)
            self.stage_stats(source)
            self.stage_tv(source)
            self.stage_ivectors(source)
            for duration in self.cfg.run.plda_durations:
                self.stage_plda(source, duration)
                for condition in self.cfg.run.conditions:
                    self.stage_score(source, duration, condition)
                    self.stage_report(source, duration, condition)
        return self.workdir

    def grid_cells(self):
        for source in self.cfg.run.sources:
            for duration in self.cfg.run.plda_durations:
                for condition in self.cfg.run.conditions:
                    yield source, duration, condition

    def cell_report(self, source: str, duration: str, condition: str) -> dict:
        rel = f"reports/{source}/{duration}/{condition}.json"
        path = self.workdir / rel
        if not path.exists():
            raise PipelineConfigError(f"missing report artifact '{rel}'")
        return json.loads(path.read_text())


def _relative_improvement(baseline: float, other: float):
    if baseline <= 0.0:
        return None
    return 100.0 * (baseline - other) / baseline


def build_grid_summary(pipeline: Pipeline) -> dict:
    """EER table over (alignment source x PLDA-training duration x condition)
    plus pairwise relative improvements against the GMM baseline and against
    full-length PLDA training."""
    cfg = pipeline.cfg
    cells = {}
    for source, duration, condition in pipeline.grid_cells():
        report = pipeline.cell_report(source, duration, condition)
        cells[f"{source}/{duration}/{condition}"] = {
            "eer": report["eer"],
            "n_target": report["n_target"],
            "n_nontarget": report["n_nontarget"],
        }
    improvements = {}
    if "gmm" in cfg.run.sources:
        for source in cfg.run.sources:
            if source == "gmm":
                continue
            for duration in cfg.run.plda_durations:
                for condition in cfg.run.conditions:
                    base = cells[f"gmm/{duration}/{condition}"]["eer"]
                    other = cells[f"{source}/{duration}/{condition}"]["eer"]
                    improvements[f"{source}-vs-gmm/{duration}/{condition}"] = _relative_improvement(base, other)
    if set(("full", "short")) <= set(cfg.run.plda_durations):
        for source in cfg.run.sources:
            for condition in cfg.run.conditions:
                base = cells[f"{source}/full/{condition}"]["eer"]
                other = cells[f"{source}/short/{condition}"]["eer"]
                improvements[f"{source}/short-plda-vs-full/{condition}"] = _relative_improvement(base, other)
    return {"cells": cells, "relative_improvement_percent": improvements}


def render_grid_text(summary: dict, cfg: PipelineConfig) -> str:
    lines = ["equal error rates by grid cell", ""]
    header = "condition        " + "".join(f"{s:>12}" for s in cfg.run.sources)
    for duration in cfg.run.plda_durations:
        lines.append(f"plda training: {duration}")
        lines.append(header)
        for condition in cfg.run.conditions:
            row = f"{condition:<17}"
            for source in cfg.run.sources:
                eer = summary["cells"][f"{source}/{duration}/{condition}"]["eer"]
                row += f"{100.0 * eer:>11.3f}%"
            lines.append(row)
        lines.append("")
    if summary["relative_improvement_percent"]:
        lines.append("relative improvement (percent reduction in EER)")
        for key, value in sorted(summary["relative_improvement_percent"].items()):
            shown = "n/a (zero baseline)" if value is None else f"{value:.1f}%"
            lines.append(f"  {key}: {shown}")
        lines.append("")
    return "\n".join(lines)


def run_pipeline(config: PipelineConfig, workdir, force: bool = False) -> Path:
    """Run every stage through the per-cell reports; returns the workdir."""
    return Pipeline(config, workdir, force=force).run()


def run_grid(config: PipelineConfig, workdir, force: bool = False) -> tuple[str, dict]:
    """Run the pipeline, then write and return the grid comparison table."""
    pipeline = Pipeline(config, workdir, force=force)
    pipeline.run()
    summary = build_grid_summary(pipeline)
    text = render_grid_text(summary, config)
    payload = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    fileio.atomic_write_bytes(pipeline.workdir / "grid.json", payload.encode())
    fileio.atomic_write_bytes(pipeline.workdir / "grid.txt", text.encode())
    return text, summary
