"""Per-utterance occupancy statistics against an alignment class set.

The zeroth-order vector holds per-class frame occupancies, the first-order
matrix occupancy-weighted feature sums, and the second-order matrix
occupancy-weighted elementwise squares. Only voiced frames contribute.
Alignment posteriors may come from any source; speaker features are a
separate stream, so the class count need not match anything about the
features themselves.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import fileio
from .errors import AlignmentError, DataError, StateError
from .frontend import FeatureMatrix

# Streams on a common 10 ms grid may disagree by a frame or two at the ends.
MAX_LENGTH_SLACK = 2


@dataclasses.dataclass
class SuffStats:
    """Zeroth (n), first (f), and diagonal second (s) order statistics."""

    n: np.ndarray
    f: np.ndarray
    s: np.ndarray
    centered: bool = False

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.float64)
        self.f = np.asarray(self.f, dtype=np.float64)
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.f.shape != self.s.shape or self.n.shape != (self.f.shape[0],):
            raise DataError(
                f"inconsistent statistic shapes n={self.n.shape} f={self.f.shape} s={self.s.shape}"
            )

    @property
    def n_classes(self) -> int:
        return self.f.shape[0]

    @property
    def dim(self) -> int:
        return self.f.shape[1]

    def copy(self) -> "SuffStats":
        return SuffStats(self.n.copy(), self.f.copy(), self.s.copy(), self.centered)

    def save(self, path) -> None:
        fileio.write_stats(path, self.n, self.f, self.s, self.centered)

    @classmethod
    def load(cls, path) -> "SuffStats":
        n, f, s, centered = fileio.read_stats(path)
        return cls(n, f, s, centered)


def _trim_to_common_length(posteriors, frames, vad):
    lengths = (len(posteriors), len(frames), len(vad))
    t_min = min(lengths)
    if max(lengths) - t_min > MAX_LENGTH_SLACK:
        raise AlignmentError(
            f"posterior/feature/mask lengths {lengths} differ by more than {MAX_LENGTH_SLACK} frames"
        )
    return posteriors[:t_min], frames[:t_min], vad[:t_min]


def accumulate_stats(posteriors: np.ndarray, speaker_features, vad: np.ndarray) -> SuffStats:
    """Accumulate uncentered statistics over the voiced frames of one
    utterance; mass is conserved: sum(n) equals the voiced frame count."""
    frames = (
        speaker_features.frames
        if isinstance(speaker_features, FeatureMatrix)
        else np.asarray(speaker_features, dtype=np.float64)
    )
    posteriors = np.asarray(posteriors, dtype=np.float64)
    vad = np.asarray(vad, dtype=bool)
    posteriors, frames, vad = _trim_to_common_length(posteriors, frames, vad)
    gamma = posteriors[vad]
    x = frames[vad]
    n = gamma.sum(axis=0)
    f = gamma.T @ x
    s = gamma.T @ x**2
    return SuffStats(n, f, s, centered=False)


def center_stats(stats: SuffStats, means: np.ndarray) -> SuffStats:
    """Shift first-order statistics by per-class occupancy times the class
    mean; zeroth and second order are untouched."""
    if stats.centered:
        raise StateError("statistics are already centered")
    means = np.asarray(means, dtype=np.float64)
    if means.shape != stats.f.shape:
        raise DataError(f"mean shape {means.shape} does not match statistics {stats.f.shape}")
    f = stats.f - stats.n[:, None] * means
    return SuffStats(stats.n.copy(), f, stats.s.copy(), centered=True)


def uncenter_stats(stats: SuffStats, means: np.ndarray) -> SuffStats:
    if not stats.centered:
        raise StateError("statistics are not centered")
    means = np.asarray(means, dtype=np.float64)
    f = stats.f + stats.n[:, None] * means
    return SuffStats(stats.n.copy(), f, stats.s.copy(), centered=False)


def merge_stats(stats_list) -> SuffStats:
    """Elementwise sum; statistics accumulate associatively across utterance
    parts, so partitioned accumulation matches single-pass accumulation."""
    stats_list = list(stats_list)
    if not stats_list:
        raise DataError("nothing to merge")
    centered = stats_list[0].centered
    if any(st.centered != centered for st in stats_list):
        raise StateError("cannot merge centered with uncentered statistics")
    total = stats_list[0].copy()
    for st in stats_list[1:]:
        if st.f.shape != total.f.shape:
            raise DataError("statistics shapes disagree")
        total.n += st.n
        total.f += st.f
        total.s += st.s
    return total


def occupancy_means(stats_list) -> tuple[np.ndarray, np.ndarray]:
    """Per-class occupancy-weighted means and variances pooled over a
    development collection of uncentered statistics.

    This is the stand-in mean/variance model centering and residual
    initialization need when the alignment source has no generative model of
    its own (supervised class posteriors). Classes with no occupancy fall
    back to the global mean and the average class variance.
    """
    total = merge_stats(stats_list)
    if total.centered:
        raise StateError("occupancy means need uncentered statistics")
    alive = total.n > 1e-8
    safe_n = np.where(alive, total.n, 1.0)
    means = np.where(alive[:, None], total.f / safe_n[:, None], 0.0)
    variances = np.where(alive[:, None], total.s / safe_n[:, None] - means**2, 0.0)
    variances = np.maximum(variances, 1e-12)
    if not np.all(alive):
        global_mean = total.f.sum(axis=0) / max(total.n.sum(), 1e-8)
        fallback_var = variances[alive].mean(axis=0) if np.any(alive) else np.ones(total.dim)
        means[~alive] = global_mean
        variances[~alive] = fallback_var
    return means, variances
