import numpy as np
import pytest

from svkit.errors import CoverageError, DataError, OneClassError
from svkit.evaluation import (
    Trial,
    TrialScore,
    compute_eer,
    det_points,
    eer_from_scores,
    evaluate_condition,
    read_scores,
    read_trials,
    report_to_json,
    report_to_text,
    write_scores,
    write_trials,
)


def test_perfect_separation_zero_eer():
    assert compute_eer([10.0] * 20, [-10.0] * 30) == 0.0


def test_chance_eer_on_shuffled_labels():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=2000)
    eers = []
    for seed in range(10):
        r = np.random.default_rng(seed)
        labels = r.permutation(np.repeat([True, False], 1000))
        eers.append(compute_eer(scores[labels], scores[~labels]))
    assert all(abs(e - 0.5) < 0.05 for e in eers)


def test_hand_walked_four_trial_case():
    # targets {3, 1}, nontargets {2, 0}: miss and false-alarm cross at 0.5.
    assert compute_eer([3.0, 1.0], [2.0, 0.0]) == pytest.approx(0.5)


def test_det_points_hand_case_has_five_points():
    points = det_points([3.0, 1.0], [2.0, 0.0])
    assert points == [(1.0, 0.0), (0.5, 0.0), (0.5, 0.5), (0.0, 0.5), (0.0, 1.0)]


def test_det_points_separated_pair_passes_corner():
    points = det_points([5.0], [-5.0])
    assert (0.0, 0.0) in points


def test_det_points_monotone():
    rng = np.random.default_rng(1)
    tar = rng.normal(1.0, 1.0, size=600)
    non = rng.normal(-1.0, 1.0, size=400)
    points = det_points(tar, non)
    fa = [p[0] for p in points]
    miss = [p[1] for p in points]
    assert all(a >= b for a, b in zip(fa, fa[1:]))
    assert all(a <= b for a, b in zip(miss, miss[1:]))


def test_eer_invariant_under_increasing_transforms():
    rng = np.random.default_rng(2)
    tar = rng.normal(0.5, 1.0, size=300)
    non = rng.normal(-0.5, 1.0, size=500)
    base = compute_eer(tar, non)
    assert compute_eer(np.exp(tar), np.exp(non)) == base
    assert compute_eer(3.0 * tar + 7.0, 3.0 * non + 7.0) == base


def test_extreme_correct_trial_bounded_eer_change():
    rng = np.random.default_rng(3)
    for trial_seed in range(10):
        r = np.random.default_rng(trial_seed)
        tar = list(r.normal(0.4, 1.0, size=40))
        non = list(r.normal(-0.4, 1.0, size=60))
        base = compute_eer(tar, non)
        with_extra_target = compute_eer(tar + [1e6], non)
        with_extra_non = compute_eer(tar, non + [-1e6])
        assert with_extra_target <= base + 1.0 / (len(tar) + 1) + 1e-12
        assert with_extra_non <= base + 1.0 / (len(non) + 1) + 1e-12


def test_one_class_rejected():
    with pytest.raises(OneClassError):
        compute_eer([1.0, 2.0], [])


def test_eer_from_scores_uses_labels():
    scores = [
        TrialScore("a", "b", 5.0, "target"),
        TrialScore("a", "c", -5.0, "nontarget"),
    ]
    assert eer_from_scores(scores) == 0.0


# --- evaluate_condition ----------------------------------------------------------

def _toy_trials_scores():
    trials = [
        Trial("e1", "t1", "target"),
        Trial("e1", "t2", "nontarget"),
        Trial("e2", "t1", "nontarget"),
        Trial("e2", "t3", "target"),
    ]
    scores = [
        TrialScore("e1", "t1", 4.0),
        TrialScore("e1", "t2", -3.0),
        TrialScore("e2", "t1", -1.0),
        TrialScore("e2", "t3", 2.0),
    ]
    return trials, scores


def test_evaluate_condition_report():
    trials, scores = _toy_trials_scores()
    report = evaluate_condition(scores, trials, condition="full-full")
    assert report.eer == 0.0
    assert report.n_target == 2 and report.n_nontarget == 2
    assert report.condition == "full-full"


def test_evaluate_condition_missing_scores():
    trials, scores = _toy_trials_scores()
    with pytest.raises(CoverageError):
        evaluate_condition(scores[:2], trials)


def test_evaluate_condition_deterministic_serialization():
    trials, scores = _toy_trials_scores()
    r1 = evaluate_condition(scores, trials, condition="c")
    r2 = evaluate_condition(scores, trials, condition="c")
    prov = {"scores": "abc123"}
    assert report_to_text(r1, prov) == report_to_text(r2, prov)
    assert report_to_json(r1, prov) == report_to_json(r2, prov)


def test_report_text_and_json_carry_identical_numbers():
    trials, scores = _toy_trials_scores()
    report = evaluate_condition(scores, trials, condition="c")
    import json

    payload = json.loads(report_to_json(report))
    text = report_to_text(report)
    assert f"eer: {payload['eer']!r}" in text
    for fa, miss in payload["det_points"]:
        assert f"{fa!r} {miss!r}" in text


# --- text formats -----------------------------------------------------------------

def test_trial_file_round_trip(tmp_path):
    trials, _ = _toy_trials_scores()
    path = tmp_path / "x.trials"
    write_trials(path, trials)
    assert read_trials(path) == trials


def test_trial_file_rejects_bad_label(tmp_path):
    path = tmp_path / "bad.trials"
    path.write_text("e t maybe\n")
    with pytest.raises(DataError):
        read_trials(path)


def test_score_file_round_trip(tmp_path):
    _, scores = _toy_trials_scores()
    path = tmp_path / "x.scores"
    write_scores(path, scores)
    back = read_scores(path)
    assert [(s.enrol_id, s.test_id, s.score, s.label) for s in back] == [
        (s.enrol_id, s.test_id, s.score, s.label) for s in scores
    ]
