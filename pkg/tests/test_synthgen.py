import hashlib
from pathlib import Path

import numpy as np
import pytest

from svkit import fileio
from svkit.errors import ConfigurationError, DataError
from svkit.evaluation import NONTARGET, TARGET
from svkit.frontend import FeatureMatrix, energy_vad, truncate_features
from svkit.synthgen import CorpusManifest, CorpusSpec, generate_corpus, make_trials


def _small_spec(**overrides):
    base = dict(
        n_speakers=8,
        sessions_per_speaker=2,
        active_seconds=15.0,
        n_classes=8,
        feature_dim=5,
        speaker_dim=3,
        seed=3,
    )
    base.update(overrides)
    return CorpusSpec(**base)


def _dir_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def test_vad_recovers_designed_unvoiced_fraction(tmp_path):
    spec = _small_spec(n_speakers=10, active_seconds=30.0, unvoiced_fraction=0.5)
    manifest = generate_corpus(spec, tmp_path / "corpus")
    voiced = 0
    total = 0
    for rec in manifest.records:
        frames, _ = fileio.read_features(manifest.root / rec.path)
        mask = energy_vad(FeatureMatrix(frames, spec.frame_shift))
        voiced += int(mask.sum())
        total += len(mask)
    assert abs(voiced / total - 0.5) < 0.05


def test_same_seed_gives_byte_identical_corpus(tmp_path):
    spec = _small_spec()
    generate_corpus(spec, tmp_path / "a")
    generate_corpus(_small_spec(), tmp_path / "b")
    assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")


def test_different_seed_changes_corpus(tmp_path):
    generate_corpus(_small_spec(), tmp_path / "a")
    generate_corpus(_small_spec(seed=4), tmp_path / "b")
    assert _dir_digest(tmp_path / "a") != _dir_digest(tmp_path / "b")


def test_labels_consistent_with_emissions(tmp_path):
    # With the speaker and session offsets disabled, frames of class c are
    # i.i.d. draws of that class's Gaussian, so refitting class means from the
    # labels must land within standard-error range of the generator's means.
    spec = _small_spec(
        n_speakers=6,
        sessions_per_speaker=2,
        active_seconds=20.0,
        speaker_dim=0,
        session_std=0.0,
        n_classes=8,
        feature_dim=5,
        seed=5,
    )
    manifest = generate_corpus(spec, tmp_path / "corpus")
    truth = np.load(tmp_path / "corpus" / "truth.npz")
    sums = np.zeros((8, 4))
    counts = np.zeros(8)
    for rec in manifest.records:
        frames, _ = fileio.read_features(manifest.root / rec.path)
        labels, _ = fileio.read_labels(manifest.root / rec.labels_path)
        for c in range(8):
            sel = labels == c
            sums[c] += frames[sel, 1:].sum(axis=0)
            counts[c] += sel.sum()
    means = sums / counts[:, None]
    se = np.sqrt(truth["class_vars"] / counts[:, None])
    assert np.max(np.abs(means - truth["class_means"]) / se) < 3.0


def test_zero_speaker_dim_gives_identical_speaker_statistics(tmp_path):
    spec = _small_spec(speaker_dim=0)
    manifest = generate_corpus(spec, tmp_path / "corpus")
    truth = np.load(tmp_path / "corpus" / "truth.npz")
    assert truth["speaker_map"].shape[2] == 0


def test_utterance_active_duration_is_exact(tmp_path):
    spec = _small_spec(active_seconds=12.0, seed=9)
    manifest = generate_corpus(spec, tmp_path / "corpus")
    for rec in manifest.records[:4]:
        frames, _ = fileio.read_features(manifest.root / rec.path)
        mask = energy_vad(FeatureMatrix(frames, spec.frame_shift))
        assert mask.sum() == 1200


def test_truncated_variant_hits_active_target(tmp_path):
    spec = _small_spec(n_speakers=4, active_seconds=30.0, seed=11)
    manifest = generate_corpus(spec, tmp_path / "corpus")
    for rec in manifest.records[:4]:
        frames, _ = fileio.read_features(manifest.root / rec.path)
        feats = FeatureMatrix(frames, spec.frame_shift)
        mask = energy_vad(feats)
        short, start, stop = truncate_features(feats, mask, skip_active=2.5, keep_active=7.5)
        remask = energy_vad(short)  # VAD re-run on the truncated stream
        assert abs(int(remask.sum()) - 750) <= 1


def test_waveform_mode_emits_playable_audio(tmp_path):
    spec = _small_spec(
        n_speakers=2, sessions_per_speaker=1, active_seconds=5.0, mode="waveform", seed=2
    )
    manifest = generate_corpus(spec, tmp_path / "corpus")
    from svkit.frontend import compute_mfcc, read_wav

    rec = manifest.records[0]
    sig = read_wav(manifest.root / rec.path)
    assert sig.sample_rate == spec.sample_rate
    feats = compute_mfcc(sig, n_coeffs=5)
    mask = energy_vad(feats)
    labels, _ = fileio.read_labels(manifest.root / rec.labels_path)
    assert abs(len(labels) - feats.n_frames) <= 2
    assert 0.3 < mask.mean() < 0.7


def test_manifest_round_trip(tmp_path):
    spec = _small_spec()
    manifest = generate_corpus(spec, tmp_path / "corpus")
    back = CorpusManifest.load(tmp_path / "corpus" / "manifest.tsv")
    assert back.records == manifest.records


def test_corpus_spec_round_trip(tmp_path):
    from svkit.synthgen import load_corpus_spec

    spec = _small_spec(unvoiced_fraction=0.4)
    generate_corpus(spec, tmp_path / "corpus")
    assert load_corpus_spec(tmp_path / "corpus" / "corpus.json") == spec


def test_manifest_rejects_duplicates(tmp_path):
    path = tmp_path / "manifest.tsv"
    path.write_text("u1\ts1\ta.feat\ta.lab\nu1\ts1\tb.feat\tb.lab\n")
    with pytest.raises(DataError):
        CorpusManifest.load(path)


def test_invalid_spec_rejected():
    with pytest.raises(ConfigurationError):
        CorpusSpec(n_speakers=0).validate()
    with pytest.raises(ConfigurationError):
        CorpusSpec(unvoiced_fraction=1.0).validate()


# --- trials ---------------------------------------------------------------------

def test_make_trials_counts_and_no_self_pairs(tmp_path):
    spec = _small_spec(n_speakers=10, sessions_per_speaker=4)
    manifest = generate_corpus(spec, tmp_path / "corpus")
    trials = make_trials(manifest, "full-full", n_target=30, n_nontarget=60, seed=1)
    targets = [t for t in trials if t.label == TARGET]
    nontargets = [t for t in trials if t.label == NONTARGET]
    assert len(targets) == 30 and len(nontargets) == 60
    for t in trials:
        assert t.enrol_id != t.test_id
        assert t.enrol_id.endswith(":full") and t.test_id.endswith(":full")


def test_make_trials_same_seed_identical(tmp_path):
    spec = _small_spec(n_speakers=10, sessions_per_speaker=4)
    manifest = generate_corpus(spec, tmp_path / "corpus")
    a = make_trials(manifest, "short-short", 20, 40, seed=5)
    b = make_trials(manifest, "short-short", 20, 40, seed=5)
    assert a == b


def test_make_trials_conditions_map_variants(tmp_path):
    spec = _small_spec(n_speakers=6, sessions_per_speaker=3)
    manifest = generate_corpus(spec, tmp_path / "corpus")
    mixed = make_trials(manifest, "full-short", 10, 10, seed=2)
    assert all(t.enrol_id.endswith(":full") and t.test_id.endswith(":short") for t in mixed)
    short = make_trials(manifest, "short-short", 10, 10, seed=2)
    assert all(t.enrol_id.endswith(":short") for t in short)
    # Same seed, same underlying pairs across conditions.
    strip = lambda trial: (trial.enrol_id.split(":")[0], trial.test_id.split(":")[0])
    assert [strip(t) for t in mixed] == [strip(t) for t in short]


def test_make_trials_insufficient_pairs(tmp_path):
    spec = _small_spec(n_speakers=3, sessions_per_speaker=2)
    manifest = generate_corpus(spec, tmp_path / "corpus")
    with pytest.raises(DataError):
        make_trials(manifest, "full-full", n_target=50, n_nontarget=10, seed=0)


def test_make_trials_zero_targets_fails_at_evaluation(tmp_path):
    from svkit.errors import OneClassError
    from svkit.evaluation import TrialScore, evaluate_condition

    spec = _small_spec(n_speakers=6, sessions_per_speaker=3)
    manifest = generate_corpus(spec, tmp_path / "corpus")
    trials = make_trials(manifest, "full-full", n_target=0, n_nontarget=10, seed=4)
    scores = [TrialScore(t.enrol_id, t.test_id, 0.0) for t in trials]
    with pytest.raises(OneClassError):
        evaluate_condition(scores, trials)


def test_make_trials_speaker_subset(tmp_path):
    spec = _small_spec(n_speakers=10, sessions_per_speaker=3)
    manifest = generate_corpus(spec, tmp_path / "corpus")
    keep = {"s0000", "s0001", "s0002"}
    trials = make_trials(manifest, "full-full", 5, 10, seed=3, speakers=keep)
    for t in trials:
        assert t.enrol_id.split("-")[0] in keep
        assert t.test_id.split("-")[0] in keep
