"""Audio frontend: MFCC features, delta appending, sliding mean
normalization, energy-based voice activity detection, and the active-speech
truncation protocol.

All operations are pure functions of their inputs: identical input bytes
yield identical output bytes, so frontend work can run concurrently across
utterances with no shared state.

Defaults target narrowband telephone speech: 8 kHz sampling, 25 ms Hamming
windows with a 10 ms shift, 0.97 pre-emphasis, 23 mel filters, and cepstral
coefficient 0 replaced by the log frame energy so voice activity detection
needs no separate energy stream.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.fft
from scipy.io import wavfile

from .errors import (
    ConfigurationError,
    DataError,
    EmptyInputError,
    FormatError,
    InsufficientContextError,
    TooShortUtteranceError,
)

SPEAKER = "speaker"
ASR = "asr"

DEFAULT_SAMPLE_RATE = 8000
DEFAULT_FRAME_LEN = 0.025
DEFAULT_FRAME_SHIFT = 0.010
DEFAULT_PRE_EMPHASIS = 0.97
DEFAULT_N_MELS = 23
DEFAULT_DELTA_CONTEXT = 2
DEFAULT_VAD_OFFSET_DB = -3.0

_LOG_FLOOR = 1e-12


@dataclasses.dataclass
class AudioSignal:
    """Single-channel waveform with its sampling rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("audio must be single-channel")
        if self.sample_rate <= 0:
            raise DataError("sample rate must be positive")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise DataError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclasses.dataclass
class FeatureMatrix:
    """Frames-by-dimensions feature matrix with framing metadata.

    ``kind`` distinguishes the speaker stream (statistics accumulation) from
    the ASR stream (supervised frame alignment); the two may use different
    coefficient counts and normalization windows.
    """

    frames: np.ndarray
    frame_shift: float
    kind: str = SPEAKER

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if self.frames.size and not np.all(np.isfinite(self.frames)):
            raise DataError("features must be finite")
        if self.frame_shift <= 0:
            raise DataError("frame shift must be positive")
        if self.kind not in (SPEAKER, ASR):
            raise DataError(f"unknown feature kind {self.kind!r}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def read_wav(path) -> AudioSignal:
    """Read a mono 16-bit PCM WAV file into a [-1, 1) float signal."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise FormatError(f"{path}: expected single-channel audio, got shape {data.shape}")
    if data.dtype != np.int16:
        raise FormatError(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    return AudioSignal(data.astype(np.float64) / 32768.0, int(rate))


def write_wav(path, signal: AudioSignal) -> None:
    clipped = np.clip(signal.samples, -1.0, 32767.0 / 32768.0)
    wavfile.write(path, signal.sample_rate, np.round(clipped * 32768.0).astype(np.int16))


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank as an (n_mels, n_fft//2 + 1) weight matrix."""
    edges_mel = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    edges_hz = _mel_to_hz(edges_mel)
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, ctr, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz[None, :] - lo) / np.maximum(ctr - lo, 1e-12)
    falling = (hi - bin_hz[None, :]) / np.maximum(hi - ctr, 1e-12)
    return np.clip(np.minimum(rising, falling), 0.0, 1.0)


def _frame_signal(samples: np.ndarray, frame_len: int, frame_shift: int) -> np.ndarray:
    n_frames = (len(samples) - frame_len) // frame_shift + 1
    idx = np.arange(n_frames)[:, None] * frame_shift + np.arange(frame_len)[None, :]
    return samples[idx]


def compute_mfcc(
    signal: AudioSignal,
    n_coeffs: int = 20,
    frame_len: float = DEFAULT_FRAME_LEN,
    frame_shift: float = DEFAULT_FRAME_SHIFT,
    n_mels: int = DEFAULT_N_MELS,
    pre_emphasis: float = DEFAULT_PRE_EMPHASIS,
    kind: str = SPEAKER,
) -> FeatureMatrix:
    """Extract mel-frequency cepstra with coefficient 0 replaced by log energy.

    The frame count is floor((len - frame_len) / frame_shift) + 1; a signal
    shorter than one frame raises EmptyInputError.
    """
    if n_coeffs > n_mels:
        raise ConfigurationError(
            f"n_coeffs ({n_coeffs}) cannot exceed the mel filter count ({n_mels})"
        )
    samples = signal.samples
    flen = int(round(frame_len * signal.sample_rate))
    fshift = int(round(frame_shift * signal.sample_rate))
    if flen <= 0 or fshift <= 0:
        raise ConfigurationError("frame length and shift must span at least one sample")
    if len(samples) < flen:
        raise EmptyInputError(
            f"signal of {len(samples)} samples is shorter than one {flen}-sample frame"
        )

    # Log frame energy comes from the raw frames, before pre-emphasis.
    raw_frames = _frame_signal(samples, flen, fshift)
    log_energy = np.log(np.maximum(np.sum(raw_frames**2, axis=1), _LOG_FLOOR))

    emphasized = np.append(samples[0] * (1.0 - pre_emphasis), samples[1:] - pre_emphasis * samples[:-1])
    frames = _frame_signal(emphasized, flen, fshift) * np.hamming(flen)

    n_fft = 1 << (flen - 1).bit_length()
    spectrum = np.fft.rfft(frames, n_fft)
    power = spectrum.real**2 + spectrum.imag**2
    fbank = mel_filterbank(n_mels, n_fft, signal.sample_rate)
    log_mel = np.log(np.maximum(power @ fbank.T, _LOG_FLOOR))
    cepstra = scipy.fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, :n_coeffs]
    cepstra[:, 0] = log_energy
    return FeatureMatrix(cepstra, frame_shift, kind)


def append_deltas(features: FeatureMatrix, context: int = DEFAULT_DELTA_CONTEXT) -> FeatureMatrix:
    """Append delta and delta-delta blocks computed by regression over
    +/- ``context`` frames with edge replication; output width is 3x input."""
    if context < 1:
        raise ConfigurationError("delta context must be at least 1")
    frames = features.frames
    if frames.shape[0] < 2 * context + 1:
        raise InsufficientContextError(
            f"{frames.shape[0]} frames are too few for delta context {context}"
        )
    delta = _delta(frames, context)
    delta2 = _delta(delta, context)
    return FeatureMatrix(np.hstack([frames, delta, delta2]), features.frame_shift, features.kind)


def _delta(frames: np.ndarray, context: int) -> np.ndarray:
    n_frames = frames.shape[0]
    denom = 2.0 * sum(n * n for n in range(1, context + 1))
    out = np.zeros_like(frames)
    for n in range(1, context + 1):
        fwd = np.clip(np.arange(n_frames) + n, 0, n_frames - 1)
        bwd = np.clip(np.arange(n_frames) - n, 0, n_frames - 1)
        out += n * (frames[fwd] - frames[bwd])
    return out / denom


def sliding_cmn(features: FeatureMatrix, window: float) -> FeatureMatrix:
    """Subtract the per-dimension mean of a centered window, clipped at the
    utterance edges; a window at least as long as the utterance reduces to
    global mean subtraction."""
    frames = features.frames
    n_frames = frames.shape[0]
    if n_frames == 0:
        return FeatureMatrix(frames.copy(), features.frame_shift, features.kind)
    width = max(1, int(round(window / features.frame_shift)))
    csum = np.vstack([np.zeros((1, frames.shape[1])), np.cumsum(frames, axis=0)])
    t = np.arange(n_frames)
    lo = np.maximum(t - width // 2, 0)
    hi = np.minimum(t + (width + 1) // 2, n_frames)
    means = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return FeatureMatrix(frames - means, features.frame_shift, features.kind)


def energy_vad(features: FeatureMatrix, threshold_offset: float = DEFAULT_VAD_OFFSET_DB) -> np.ndarray:
    """Boolean mask of frames whose log energy (dimension 0) exceeds the
    utterance mean log energy plus ``threshold_offset`` decibels."""
    log_energy = features.frames[:, 0]
    if log_energy.size == 0:
        return np.zeros(0, dtype=bool)
    threshold = log_energy.mean() + threshold_offset * np.log(10.0) / 10.0
    return log_energy > threshold


def _active_cut_frame(vad: np.ndarray, skip_active: float, frame_shift: float) -> int:
    """Index of the first frame after cumulative active speech reaches
    ``skip_active`` seconds."""
    vad = np.asarray(vad, dtype=bool)
    active = np.cumsum(vad) * frame_shift
    total = active[-1] if len(active) else 0.0
    if total <= skip_active + 1e-9:
        raise TooShortUtteranceError(
            f"utterance has {total:.2f} s of active speech, need more than {skip_active:.2f} s"
        )
    return int(np.argmax(active >= skip_active - 1e-9)) + 1


def truncate_utterance(
    signal: AudioSignal,
    vad: np.ndarray,
    skip_active: float,
    keep: float,
    frame_shift: float = DEFAULT_FRAME_SHIFT,
) -> AudioSignal:
    """Drop the opening ``skip_active`` seconds of active speech, then keep a
    raw span of ``keep`` seconds.

    The mask comes from features of the full signal; downstream processing
    re-runs voice activity detection on the truncated signal. The output is
    exactly ``keep`` seconds when enough signal remains, shorter otherwise.
    Because the mask is recomputed downstream, applying truncation twice with
    the same parameters is not guaranteed to be idempotent.
    """
    cut_frame = _active_cut_frame(vad, skip_active, frame_shift)
    start = int(round(cut_frame * frame_shift * signal.sample_rate))
    if start >= len(signal.samples):
        raise TooShortUtteranceError("no signal remains after the skipped active speech")
    stop = min(len(signal.samples), start + int(round(keep * signal.sample_rate)))
    return AudioSignal(signal.samples[start:stop].copy(), signal.sample_rate)


def truncate_features(
    features: FeatureMatrix,
    vad: np.ndarray,
    skip_active: float,
    keep_active: float,
) -> tuple[FeatureMatrix, int, int]:
    """Frame-domain counterpart of truncation for feature-domain corpora:
    skip ``skip_active`` seconds of active speech, then keep frames until
    another ``keep_active`` seconds of active speech have accumulated.

    Returns the truncated features plus the [start, stop) frame range so
    frame-aligned label streams can be sliced identically.
    """
    if len(vad) != features.n_frames:
        raise DataError("mask length does not match the feature frame count")
    shift = features.frame_shift
    start = _active_cut_frame(vad, skip_active, shift)
    target = int(round(keep_active / shift))
    tail_active = np.cumsum(np.asarray(vad[start:], dtype=bool))
    if len(tail_active) == 0 or tail_active[-1] < target:
        raise TooShortUtteranceError(
            f"only {tail_active[-1] if len(tail_active) else 0} active frames remain, need {target}"
        )
    stop = start + int(np.argmax(tail_active >= target)) + 1
    return (
        FeatureMatrix(features.frames[start:stop].copy(), shift, features.kind),
        start,
        stop,
    )
