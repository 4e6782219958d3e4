"""Trial-list evaluation: equal error rate, detection operating points, and
condition reports.

Thresholds sweep the distinct score values (so tied trials flip together),
and the equal error rate interpolates linearly between the two operating
points bracketing the miss/false-alarm crossing.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .errors import CoverageError, DataError, OneClassError

TARGET = "target"
NONTARGET = "nontarget"


@dataclasses.dataclass(frozen=True)
class Trial:
    enrol_id: str
    test_id: str
    label: str


@dataclasses.dataclass
class TrialScore:
    enrol_id: str
    test_id: str
    score: float
    label: str = "unknown"


@dataclasses.dataclass
class EvalReport:
    condition: str
    eer: float
    n_target: int
    n_nontarget: int
    det: list


def read_trials(path) -> list[Trial]:
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in (TARGET, NONTARGET):
                raise DataError(f"{path}:{line_no}: expected 'enrol test target|nontarget'")
            trials.append(Trial(parts[0], parts[1], parts[2]))
    return trials


def write_trials(path, trials) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.enrol_id} {t.test_id} {t.label}\n")


def read_scores(path) -> list[TrialScore]:
    scores = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{line_no}: expected 'enrol test score label'")
            scores.append(TrialScore(parts[0], parts[1], float(parts[2]), parts[3]))
    return scores


def write_scores(path, scores) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(f"{s.enrol_id} {s.test_id} {s.score!r} {s.label}\n")


def det_points(target_scores, nontarget_scores) -> list[tuple[float, float]]:
    """(false-alarm, miss) operating points, one per distinct threshold plus
    the reject-all endpoint; false alarms are nonincreasing and misses
    nondecreasing as the threshold rises."""
    tar = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    if len(tar) == 0 or len(non) == 0:
        raise OneClassError("need both target and nontarget scores")
    thresholds = np.unique(np.concatenate([tar, non]))
    miss = np.searchsorted(tar, thresholds, side="left") / len(tar)
    fa = 1.0 - np.searchsorted(non, thresholds, side="left") / len(non)
    points = list(zip(fa.tolist(), miss.tolist()))
    points.append((0.0, 1.0))  # threshold above every score
    return points


def compute_eer(target_scores, nontarget_scores) -> float:
    """Equal error rate at the miss/false-alarm crossing, interpolated
    linearly between the bracketing empirical operating points."""
    points = det_points(target_scores, nontarget_scores)
    gap = [m - f for f, m in points]
    for i, g in enumerate(gap):
        if g >= 0.0:
            if g == 0.0 or i == 0:
                return points[i][1] if g == 0.0 else points[i][0]
            f0, m0 = points[i - 1]
            f1, m1 = points[i]
            denom = (m1 - m0) - (f1 - f0)
            alpha = (f0 - m0) / denom
            return m0 + alpha * (m1 - m0)
    raise OneClassError("no crossing found; scores are degenerate")


def eer_from_scores(scores) -> float:
    tar = [s.score for s in scores if s.label == TARGET]
    non = [s.score for s in scores if s.label == NONTARGET]
    return compute_eer(tar, non)


def evaluate_condition(scores, trials, condition: str = "") -> EvalReport:
    """Match scores to a trial list and build the condition report.

    The trial list's labels are authoritative; trials without a score raise
    CoverageError naming the missing pairs.
    """
    by_pair = {(s.enrol_id, s.test_id): s.score for s in scores}
    missing = [t for t in trials if (t.enrol_id, t.test_id) not in by_pair]
    if missing or not trials:
        ids = ", ".join(f"{t.enrol_id}/{t.test_id}" for t in missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise CoverageError(f"no score for {len(missing)} of {len(trials)} trials: {ids}{more}")
    tar = [by_pair[(t.enrol_id, t.test_id)] for t in trials if t.label == TARGET]
    non = [by_pair[(t.enrol_id, t.test_id)] for t in trials if t.label == NONTARGET]
    if not tar or not non:
        raise OneClassError("trial list must contain both targets and nontargets")
    eer = compute_eer(tar, non)
    return EvalReport(condition, eer, len(tar), len(non), det_points(tar, non))


def report_to_text(report: EvalReport, provenance: dict | None = None) -> str:
    """Human-readable report; numbers use round-trip float formatting so the
    machine-readable variant carries identical values."""
    lines = [
        f"condition: {report.condition}",
        f"eer: {report.eer!r}",
        f"n_target: {report.n_target}",
        f"n_nontarget: {report.n_nontarget}",
        "det_points:",
        "fa miss",
    ]
    lines.extend(f"{fa!r} {miss!r}" for fa, miss in report.det)
    if provenance:
        lines.append("provenance:")
        lines.extend(f"{name} {digest}" for name, digest in sorted(provenance.items()))
    return "\n".join(lines) + "\n"


def report_to_json(report: EvalReport, provenance: dict | None = None) -> str:
    payload = {
        "condition": report.condition,
        "eer": report.eer,
        "n_target": report.n_target,
        "n_nontarget": report.n_nontarget,
        "det_points": [[fa, miss] for fa, miss in report.det],
    }
    if provenance:
        payload["provenance"] = dict(sorted(provenance.items()))
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
