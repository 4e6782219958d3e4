"""Time-delay network producing per-frame class posteriors.

Each layer splices the previous layer's output over a set of frame offsets
(edge frames replicated), applies an affine map, then a p-norm group
reduction; the final layer is a softmax over alignment classes. Training is
plain mini-batch gradient descent on frame-level cross-entropy.

``resolve_posteriors`` is the single entry point that turns any alignment
source (GMM, network, posterior file) into a dense posterior matrix for
statistics accumulation.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import fileio
from .errors import ConfigurationError, DataError, PipelineConfigError
from .frontend import FeatureMatrix

logger = logging.getLogger(__name__)

DEFAULT_SPLICES = ((-2, -1, 0, 1, 2), (-1, 0, 1), (-2, 0, 2), (0,))


def parse_splice_spec(text: str):
    """Parse per-layer splice offsets from a string like ``-1,0,1;0``."""
    layers = []
    for chunk in text.split(";"):
        offsets = tuple(int(v) for v in chunk.split(",") if v.strip())
        if not offsets:
            raise ConfigurationError(f"empty splice list in {text!r}")
        layers.append(offsets)
    return tuple(layers)


def splice(frames: np.ndarray, offsets) -> np.ndarray:
    """Concatenate rows t+o for each offset o, replicating edge frames.

    Output width is input width times the number of offsets.
    """
    offsets = tuple(int(o) for o in offsets)
    if not offsets:
        raise ConfigurationError("splice offsets must be nonempty")
    if list(offsets) != sorted(offsets):
        raise ConfigurationError("splice offsets must be sorted")
    frames = np.asarray(frames, dtype=np.float64)
    n_frames = frames.shape[0]
    idx = np.clip(np.arange(n_frames)[:, None] + np.asarray(offsets)[None, :], 0, n_frames - 1)
    return frames[idx].reshape(n_frames, -1)


def _splice_indices(n_frames: int, offsets) -> np.ndarray:
    return np.clip(np.arange(n_frames)[:, None] + np.asarray(offsets)[None, :], 0, n_frames - 1)


def pnorm(x: np.ndarray, p: float = 2.0, group_size: int = 1) -> np.ndarray:
    """Group p-norm: each output is (sum over a group of |x_i|^p)^(1/p)."""
    x = np.asarray(x, dtype=np.float64)
    width = x.shape[-1]
    if group_size <= 0 or width % group_size:
        raise ConfigurationError(f"group size {group_size} does not divide width {width}")
    grouped = np.abs(x).reshape(*x.shape[:-1], width // group_size, group_size)
    return np.power(np.sum(grouped**p, axis=-1), 1.0 / p)


def _pnorm_backward(grad_out, z, out, p, group_size):
    """Gradient of the group p-norm w.r.t. its pre-activation z."""
    safe = np.where(out > 0.0, out, 1.0)
    scale = np.where(out > 0.0, grad_out * safe ** (1.0 - p), 0.0)
    scale = np.repeat(scale, group_size, axis=-1)
    return scale * np.sign(z) * np.abs(z) ** (p - 1.0)


def _softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclasses.dataclass
class Layer:
    offsets: tuple
    weight: np.ndarray  # (out, in * n_offsets)
    bias: np.ndarray
    activation: str  # "pnorm" | "softmax" | "none"
    p: float = 2.0
    group_size: int = 1


def labels_to_posteriors(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """One-hot posterior matrix from per-frame class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError("label index out of range")
    gamma = np.zeros((len(labels), n_classes))
    gamma[np.arange(len(labels)), labels] = 1.0
    return gamma


class Tdnn(BaseEstimator):
    """Desk-scale spliced feed-forward network over frame context.

    The default topology has three p-norm hidden layers and one softmax
    output layer; splice lists, widths, and the class count are configurable
    up to full-scale recipes.
    """

    def __init__(
        self,
        n_senones: int = 64,
        splices=DEFAULT_SPLICES,
        hidden_width: int = 80,
        group_size: int = 8,
        pnorm_p: float = 2.0,
        learning_rate: float = 0.01,
        batch_frames: int = 128,
        n_epochs: int = 2,
        seed: int = 0,
    ):
        self.n_senones = n_senones
        self.splices = splices
        self.hidden_width = hidden_width
        self.group_size = group_size
        self.pnorm_p = pnorm_p
        self.learning_rate = learning_rate
        self.batch_frames = batch_frames
        self.n_epochs = n_epochs
        self.seed = seed

    # -- construction -----------------------------------------------------

    def build(self, input_dim: int) -> "Tdnn":
        """Allocate layers for the given input width with seeded uniform
        +/- sqrt(6 / (fan_in + fan_out)) weights."""
        if self.hidden_width % self.group_size:
            raise ConfigurationError(
                f"group size {self.group_size} does not divide hidden width {self.hidden_width}"
            )
        if len(self.splices) < 1:
            raise ConfigurationError("at least one splice list is required")
        rng = np.random.default_rng(self.seed)
        layers = []
        width = input_dim
        for li, offsets in enumerate(self.splices):
            offsets = tuple(int(o) for o in offsets)
            in_dim = width * len(offsets)
            last = li == len(self.splices) - 1
            out_dim = self.n_senones if last else self.hidden_width
            bound = np.sqrt(6.0 / (in_dim + out_dim))
            weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
            bias = np.zeros(out_dim)
            if last:
                layers.append(Layer(offsets, weight, bias, "softmax"))
                width = self.n_senones
            else:
                layers.append(Layer(offsets, weight, bias, "pnorm", self.pnorm_p, self.group_size))
                width = self.hidden_width // self.group_size
        self.layers_ = layers
        self.input_dim_ = input_dim
        return self

    # -- forward ------------------------------------------------------------

    def _forward(self, frames, keep_cache=False):
        h = np.asarray(frames, dtype=np.float64)
        if h.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if h.shape[1] != self.input_dim_:
            raise DataError(
                f"feature width {h.shape[1]} does not match network input width {self.input_dim_}"
            )
        cache = []
        for layer in self.layers_:
            idx = _splice_indices(h.shape[0], layer.offsets)
            spliced = h[idx].reshape(h.shape[0], -1)
            z = spliced @ layer.weight.T + layer.bias
            if layer.activation == "pnorm":
                out = pnorm(z, layer.p, layer.group_size)
            elif layer.activation == "softmax":
                out = _softmax(z)
            else:
                out = z
            if keep_cache:
                cache.append((idx, spliced, z, out, h.shape[1]))
            h = out
        return (h, cache) if keep_cache else h

    def forward(self, features) -> np.ndarray:
        """Per-frame class posteriors; rows sum to one."""
        frames = features.frames if isinstance(features, FeatureMatrix) else features
        return self._forward(frames)

    predict_proba = forward

    # -- training -----------------------------------------------------------

    def train_step(self, features, labels, learning_rate: float | None = None) -> float:
        """One gradient-descent step on a frame batch.

        Returns the mean cross-entropy of the batch under the parameters
        *before* the update. A zero learning rate leaves the model unchanged.
        """
        frames = features.frames if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if frames.shape[0] == 0:
            raise DataError("empty batch")
        if len(labels) != frames.shape[0]:
            raise DataError("labels are not aligned to frames")
        if labels.min() < 0 or labels.max() >= self.n_senones:
            raise DataError("label index out of range")
        lr = self.learning_rate if learning_rate is None else learning_rate

        posteriors, cache = self._forward(frames, keep_cache=True)
        n = frames.shape[0]
        picked = posteriors[np.arange(n), labels]
        loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))

        grad_z = posteriors.copy()
        grad_z[np.arange(n), labels] -= 1.0
        grad_z /= n

        grad_h = None
        for layer, (idx, spliced, z, out, in_width) in zip(reversed(self.layers_), reversed(cache)):
            if layer.activation == "softmax":
                dz = grad_z
            elif layer.activation == "pnorm":
                dz = _pnorm_backward(grad_h, z, out, layer.p, layer.group_size)
            else:
                dz = grad_h
            grad_weight = dz.T @ spliced
            grad_bias = dz.sum(axis=0)
            da = (dz @ layer.weight).reshape(n, len(layer.offsets), in_width)
            grad_h = np.zeros((n, in_width))
            np.add.at(grad_h, idx, da)
            if lr != 0.0:
                layer.weight -= lr * grad_weight
                layer.bias -= lr * grad_bias
        return loss

    def fit(self, features_list, labels_list) -> "Tdnn":
        """SGD over frame chunks of all utterances, with the learning rate
        halved whenever an epoch fails to improve the mean loss."""
        if len(features_list) != len(labels_list) or not features_list:
            raise DataError("need matching, nonempty feature and label lists")
        first = features_list[0]
        input_dim = (first.frames if isinstance(first, FeatureMatrix) else np.asarray(first)).shape[1]
        if not hasattr(self, "layers_"):
            self.build(input_dim)

        chunks = []
        for feats, labels in zip(features_list, labels_list):
            frames = feats.frames if isinstance(feats, FeatureMatrix) else np.asarray(feats, dtype=np.float64)
            labels = np.asarray(labels, dtype=np.int64)
            if len(labels) != frames.shape[0]:
                raise DataError("labels are not aligned to frames")
            for start in range(0, frames.shape[0], self.batch_frames):
                chunk = frames[start : start + self.batch_frames]
                if chunk.shape[0] > 0:
                    chunks.append((chunk, labels[start : start + self.batch_frames]))

        rng = np.random.default_rng(self.seed)
        lr = self.learning_rate
        epoch_losses = []
        for _ in range(self.n_epochs):
            order = rng.permutation(len(chunks))
            losses = [self.train_step(*chunks[i], learning_rate=lr) for i in order]
            mean_loss = float(np.mean(losses))
            if epoch_losses and mean_loss > epoch_losses[-1] * (1.0 - 1e-3):
                lr /= 2.0
                logger.info("loss plateau; learning rate halved to %g", lr)
            epoch_losses.append(mean_loss)
        self.loss_path_ = np.asarray(epoch_losses)
        return self

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        fileio.write_tdnn(
            path,
            [
                (l.offsets, l.weight, l.bias, l.activation, l.p, l.group_size)
                for l in self.layers_
            ],
            self.n_senones,
        )

    @classmethod
    def load(cls, path) -> "Tdnn":
        raw_layers, n_senones = fileio.read_tdnn(path)
        model = cls(n_senones=n_senones)
        model.layers_ = [
            Layer(offsets, weight, bias, activation, p, group_size or 1)
            for offsets, weight, bias, activation, p, group_size in raw_layers
        ]
        first = model.layers_[0]
        model.input_dim_ = first.weight.shape[1] // len(first.offsets)
        model.splices = tuple(l.offsets for l in model.layers_)
        return model


def resolve_posteriors(source, speaker_features=None, asr_features=None) -> np.ndarray:
    """Dense frame posteriors from whichever alignment source is configured.

    A GMM source aligns speaker features; a network source aligns ASR
    features; a path loads a posterior file. Missing streams raise
    PipelineConfigError.
    """
    from .gmm import DiagGmm  # local import keeps module load order flexible

    if isinstance(source, DiagGmm):
        if speaker_features is None:
            raise PipelineConfigError("GMM alignment needs the speaker feature stream")
        frames = speaker_features.frames if isinstance(speaker_features, FeatureMatrix) else speaker_features
        return source.predict_proba(frames)
    if isinstance(source, Tdnn):
        if asr_features is None:
            raise PipelineConfigError("network alignment needs the ASR feature stream")
        return source.forward(asr_features)
    if isinstance(source, (str, Path)):
        return fileio.read_posteriors(source)
    raise PipelineConfigError(f"unsupported posterior source {type(source).__name__}")
