"""Synthetic labeled corpus generator.

Speakers, sessions, frames, and ground-truth class alignments all come from
a known generative model: a sticky Markov chain picks a per-frame class;
each class emits diagonal-Gaussian features shifted by a low-rank speaker
offset and a per-session offset; and a voiced/unvoiced chain drives the log
energy in dimension 0 so energy-based voice activity detection recovers the
designed unvoiced fraction. Ground-truth labels double as supervised
alignment targets and as an oracle posterior source.

The default output is feature-domain (each session is written directly as a
speaker-feature file); waveform mode instead emits per-class shaped tones so
the full audio frontend can be exercised.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigurationError, DataError
from .evaluation import NONTARGET, TARGET, Trial
from .frontend import AudioSignal, write_wav

CONDITIONS = ("full-full", "full-short", "short-short")
FULL = "full"
SHORT = "short"


@dataclasses.dataclass
class CorpusSpec:
    """Knobs of the generative model; fixed seed means a byte-identical corpus."""

    n_speakers: int = 100
    sessions_per_speaker: int = 4
    active_seconds: float = 60.0
    n_classes: int = 32
    feature_dim: int = 12
    speaker_dim: int = 5
    seed: int = 7
    unvoiced_fraction: float = 0.5
    frame_shift: float = 0.01
    mode: str = "features"  # or "waveform"
    sample_rate: int = 8000
    class_mean_scale: float = 2.5
    emission_std: float = 2.5
    speaker_std: float = 0.4
    session_std: float = 0.15
    # The gap must dominate the jitter by enough that a mean-relative energy
    # threshold stays clear of both modes even on voicing-skewed truncations.
    energy_gap: float = 8.0
    energy_jitter: float = 0.25
    # Sticky runs plus a heavy-tailed class prior starve per-class occupancy
    # in truncated utterances: rare classes reliably covered at full length
    # drop out of short ones, the mechanism that degrades short-utterance
    # vectors. class_skew is the geometric decay of the class prior
    # (1.0 = uniform).
    class_self_transition: float = 0.98
    class_skew: float = 0.9
    voiced_self_transition: float = 0.98

    def validate(self) -> None:
        if min(self.n_speakers, self.sessions_per_speaker, self.n_classes, self.feature_dim) < 1:
            raise ConfigurationError("corpus counts must be positive")
        if self.speaker_dim < 0:
            raise ConfigurationError("speaker subspace dimension cannot be negative")
        if not 0.0 <= self.unvoiced_fraction < 1.0:
            raise ConfigurationError("unvoiced fraction must lie in [0, 1)")
        if self.active_seconds <= 0 or self.frame_shift <= 0:
            raise ConfigurationError("durations must be positive")
        if self.mode not in ("features", "waveform"):
            raise ConfigurationError(f"unknown corpus mode {self.mode!r}")
        if self.feature_dim < 2:
            raise ConfigurationError("feature dimension must leave room for the energy dimension")
        if not 0.0 < self.class_skew <= 1.0:
            raise ConfigurationError("class skew must lie in (0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        return cls(**data)


@dataclasses.dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    path: str
    labels_path: str


@dataclasses.dataclass
class CorpusManifest:
    root: Path
    records: list

    def by_speaker(self) -> dict:
        grouped: dict[str, list[UtteranceRecord]] = {}
        for rec in self.records:
            grouped.setdefault(rec.speaker_id, []).append(rec)
        return grouped

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(f"{rec.utterance_id}\t{rec.speaker_id}\t{rec.path}\t{rec.labels_path}\n")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 4:
                    raise DataError(f"{path}:{line_no}: expected 4 tab-separated fields")
                records.append(UtteranceRecord(*parts))
        seen = {r.utterance_id for r in records}
        if len(seen) != len(records):
            raise DataError(f"{path}: duplicate utterance ids")
        return cls(path.parent, records)


class _Generator:
    """Generator parameters drawn once from the corpus seed."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        d = spec.feature_dim - 1  # dimension 0 carries log energy
        rng = np.random.default_rng([spec.seed, 0])
        self.class_means = rng.standard_normal((spec.n_classes, d)) * spec.class_mean_scale
        self.class_vars = spec.emission_std**2 * rng.uniform(0.5, 1.5, size=(spec.n_classes, d))
        if spec.speaker_dim > 0:
            scale = spec.speaker_std / np.sqrt(spec.speaker_dim)
            self.speaker_map = rng.standard_normal((spec.n_classes, d, spec.speaker_dim)) * scale
        else:
            self.speaker_map = np.zeros((spec.n_classes, d, 0))
        self.tone_freqs = rng.uniform(300.0, 3400.0, size=(spec.n_classes, 3))
        self.tone_amps = rng.uniform(0.05, 0.2, size=(spec.n_classes, 3))
        prior = spec.class_skew ** np.arange(spec.n_classes)
        self.class_prior = prior / prior.sum()
        spk_rng = np.random.default_rng([spec.seed, 1])
        self.speaker_latents = spk_rng.standard_normal((spec.n_speakers, spec.speaker_dim))

    def speaker_offsets(self, speaker: int) -> np.ndarray:
        return self.speaker_map @ self.speaker_latents[speaker]


def _sticky_runs(rng, n_needed, self_transition):
    """Run lengths of a sticky chain: geometric with the leave probability."""
    leave = max(1.0 - self_transition, 1e-6)
    runs = rng.geometric(leave, size=max(8, int(n_needed * leave * 2) + 8))
    while runs.sum() < n_needed:
        runs = np.concatenate([runs, rng.geometric(leave, size=len(runs))])
    return runs


def _voiced_mask(rng, target_active, unvoiced_fraction, stickiness):
    """Alternating voiced/unvoiced runs, trimmed so the utterance ends on the
    frame that completes the requested number of voiced frames."""
    if unvoiced_fraction == 0.0:
        return np.ones(target_active, dtype=bool)
    voiced_frac = 1.0 - unvoiced_fraction
    leave = 1.0 - stickiness
    p_leave_voiced = leave * (1.0 - voiced_frac)
    p_leave_unvoiced = leave * voiced_frac
    pieces = []
    active = 0
    voiced_now = bool(rng.random() < voiced_frac)
    while active < target_active:
        p = p_leave_voiced if voiced_now else p_leave_unvoiced
        run = int(rng.geometric(max(p, 1e-6)))
        if voiced_now:
            run = min(run, target_active - active)
            active += run
        pieces.append(np.full(run, voiced_now))
        voiced_now = not voiced_now
    return np.concatenate(pieces)


def _class_labels(rng, n_frames, n_classes, self_transition, class_prior):
    """Sticky runs whose classes follow the (possibly skewed) prior;
    consecutive duplicates simply merge into longer runs."""
    if n_classes == 1:
        return np.zeros(n_frames, dtype=np.int64)
    runs = _sticky_runs(rng, n_frames, self_transition)
    states = rng.choice(n_classes, size=len(runs), p=class_prior)
    return np.repeat(states, runs)[:n_frames]


def _utterance_frames(gen: _Generator, speaker: int, utt_index: int):
    spec = gen.spec
    rng = np.random.default_rng([spec.seed, 2, utt_index])
    target_active = int(round(spec.active_seconds / spec.frame_shift))
    voiced = _voiced_mask(rng, target_active, spec.unvoiced_fraction, spec.voiced_self_transition)
    n_frames = len(voiced)
    labels = _class_labels(
        rng, n_frames, spec.n_classes, spec.class_self_transition, gen.class_prior
    )

    d = spec.feature_dim - 1
    session_offset = rng.normal(0.0, spec.session_std, size=d)
    noise = rng.standard_normal((n_frames, d)) * np.sqrt(gen.class_vars[labels])
    body = gen.class_means[labels] + gen.speaker_offsets(speaker)[labels] + session_offset + noise
    energy = np.where(voiced, spec.energy_gap, 0.0) + rng.normal(0.0, spec.energy_jitter, n_frames)
    frames = np.column_stack([energy, body])
    return frames, labels, voiced, rng


def _utterance_waveform(gen: _Generator, labels, voiced, rng) -> np.ndarray:
    """Per-class shaped tones at 10 ms hops; unvoiced hops are attenuated by
    the energy gap. Only used to exercise the audio frontend."""
    spec = gen.spec
    hop = int(round(spec.frame_shift * spec.sample_rate))
    tail = int(round(0.025 * spec.sample_rate)) - hop
    n_samples = len(labels) * hop + max(tail, 0)
    t = np.arange(n_samples) / spec.sample_rate
    samples = rng.normal(0.0, 1e-4, n_samples)
    attenuation = np.exp(-spec.energy_gap / 2.0)
    frame_gain = np.where(voiced, 1.0, attenuation)
    sample_gain = np.repeat(frame_gain, hop)
    sample_gain = np.pad(sample_gain, (0, n_samples - len(sample_gain)), mode="edge")
    sample_labels = np.repeat(labels, hop)
    sample_labels = np.pad(sample_labels, (0, n_samples - len(sample_labels)), mode="edge")
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(spec.n_classes, 3))
    for c in np.unique(sample_labels):
        sel = sample_labels == c
        tone = np.zeros(int(sel.sum()))
        for k in range(3):
            tone += gen.tone_amps[c, k] * np.sin(
                2.0 * np.pi * gen.tone_freqs[c, k] * t[sel] + phases[c, k]
            )
        samples[sel] += tone
    return np.clip(samples * sample_gain, -0.99, 0.99)


def generate_corpus(spec: CorpusSpec, out_dir) -> CorpusManifest:
    """Write the corpus under ``out_dir`` and return its manifest.

    Per-utterance randomness derives from (seed, utterance index), so
    generation order or parallelism cannot change the output.
    """
    spec.validate()
    out_dir = Path(out_dir)
    feat_dir = out_dir / ("wav" if spec.mode == "waveform" else "feats")
    labels_dir = out_dir / "labels"
    feat_dir.mkdir(parents=True, exist_ok=True)
    labels_dir.mkdir(parents=True, exist_ok=True)

    gen = _Generator(spec)
    records = []
    utt_index = 0
    for speaker in range(spec.n_speakers):
        speaker_id = f"s{speaker:04d}"
        for session in range(spec.sessions_per_speaker):
            utt_id = f"{speaker_id}-u{session:02d}"
            frames, labels, voiced, rng = _utterance_frames(gen, speaker, utt_index)
            labels_path = labels_dir / f"{utt_id}.lab"
            fileio.write_labels(labels_path, labels, spec.n_classes)
            if spec.mode == "waveform":
                path = feat_dir / f"{utt_id}.wav"
                samples = _utterance_waveform(gen, labels, voiced, rng)
                write_wav(path, AudioSignal(samples, spec.sample_rate))
            else:
                path = feat_dir / f"{utt_id}.feat"
                fileio.write_features(path, frames, "speaker")
            records.append(
                UtteranceRecord(
                    utt_id,
                    speaker_id,
                    str(path.relative_to(out_dir)),
                    str(labels_path.relative_to(out_dir)),
                )
            )
            utt_index += 1

    manifest = CorpusManifest(out_dir, records)
    manifest.save(out_dir / "manifest.tsv")
    with open(out_dir / "corpus.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    np.savez(
        out_dir / "truth.npz",
        class_means=gen.class_means,
        class_vars=gen.class_vars,
        speaker_map=gen.speaker_map,
        speaker_latents=gen.speaker_latents,
    )
    return manifest


def load_corpus_spec(path) -> CorpusSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return CorpusSpec.from_dict(json.load(fh))


def variant_id(utterance_id: str, variant: str) -> str:
    return f"{utterance_id}:{variant}"


def make_trials(
    manifest: CorpusManifest,
    condition: str,
    n_target: int,
    n_nontarget: int,
    seed: int,
    speakers=None,
) -> list[Trial]:
    """Balanced seeded trial list over (enrollment, test) utterance variants.

    Short conditions reference truncated utterance variants; the same seed
    yields the same underlying pairs for every condition, so conditions stay
    comparable. No trial pairs an utterance with itself.
    """
    if condition not in CONDITIONS:
        raise ConfigurationError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    enrol_variant = FULL if condition.startswith("full") else SHORT
    test_variant = SHORT if condition.endswith("short") else FULL

    grouped = manifest.by_speaker()
    if speakers is not None:
        wanted = set(speakers)
        grouped = {spk: recs for spk, recs in grouped.items() if spk in wanted}
    speaker_ids = sorted(grouped)
    if len(speaker_ids) < 2:
        raise DataError("need at least two speakers to build nontarget trials")

    target_pairs = []
    for spk in speaker_ids:
        utts = sorted(r.utterance_id for r in grouped[spk])
        for i in range(len(utts)):
            for j in range(i + 1, len(utts)):
                target_pairs.append((utts[i], utts[j]))
    if len(target_pairs) < n_target:
        raise DataError(
            f"only {len(target_pairs)} same-speaker pairs available, need {n_target}"
        )

    rng = np.random.default_rng([seed, 17])
    chosen = rng.choice(len(target_pairs), size=n_target, replace=False)
    trials = [
        Trial(variant_id(target_pairs[i][0], enrol_variant), variant_id(target_pairs[i][1], test_variant), TARGET)
        for i in sorted(chosen)
    ]

    seen = set()
    attempts = 0
    max_attempts = 50 * n_nontarget + 1000
    while len(seen) < n_nontarget:
        if attempts > max_attempts:
            raise DataError("could not assemble enough distinct nontarget pairs")
        attempts += 1
        si, sj = rng.choice(len(speaker_ids), size=2, replace=False)
        recs_i = grouped[speaker_ids[si]]
        recs_j = grouped[speaker_ids[sj]]
        ui = recs_i[int(rng.integers(len(recs_i)))].utterance_id
        uj = recs_j[int(rng.integers(len(recs_j)))].utterance_id
        if (ui, uj) not in seen:
            seen.add((ui, uj))
    trials.extend(
        Trial(variant_id(ui, enrol_variant), variant_id(uj, test_variant), NONTARGET)
        for ui, uj in sorted(seen)
    )
    return trials
