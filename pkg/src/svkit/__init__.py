"""Speaker-verification toolkit.

Implements two fixed-length-vector speaker-verification pipelines that differ
only in how frames are aligned to classes before statistics accumulation:

* unsupervised alignment from a diagonal-covariance GMM (the universal
  background model), and
* supervised alignment from a time-delay network emitting per-frame class
  posteriors (or from posterior files / ground-truth labels).

Either alignment feeds occupancy statistics into a total-variability
extractor; a two-covariance Gaussian PLDA backend scores verification trials.
A synthetic corpus generator and a cached pipeline runner make the whole
chain reproducible at desk scale.
"""

from .frontend import AudioSignal, FeatureMatrix, append_deltas, compute_mfcc, energy_vad, sliding_cmn, truncate_utterance
from .gmm import DiagGmm
from .tdnn import Tdnn, resolve_posteriors, splice, pnorm
from .stats import SuffStats, accumulate_stats, center_stats
from .total_variability import IVector, TotalVariability, extract_ivector
from .plda import Gplda, center_and_length_normalize
from .evaluation import EvalReport, Trial, TrialScore, compute_eer, det_points, evaluate_condition
from .synthgen import CorpusSpec, generate_corpus, make_trials

__version__ = "0.1.0"

__all__ = [
    "AudioSignal",
    "CorpusSpec",
    "DiagGmm",
    "EvalReport",
    "FeatureMatrix",
    "Gplda",
    "IVector",
    "SuffStats",
    "Tdnn",
    "TotalVariability",
    "Trial",
    "TrialScore",
    "accumulate_stats",
    "append_deltas",
    "center_and_length_normalize",
    "center_stats",
    "compute_eer",
    "compute_mfcc",
    "det_points",
    "energy_vad",
    "evaluate_condition",
    "extract_ivector",
    "generate_corpus",
    "make_trials",
    "pnorm",
    "resolve_posteriors",
    "sliding_cmn",
    "splice",
    "truncate_utterance",
]
