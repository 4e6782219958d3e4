"""Diagonal-covariance Gaussian mixture model used as the universal
background model: k-means++ initialization, EM training, and log-domain
frame posteriors (class alignments).

All density math runs in the log domain with log-sum-exp normalization, so
posteriors stay row-stochastic even for extreme-magnitude frames.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator

from . import fileio
from .errors import DataError, DegenerateInitError
from .validation import as_float_matrix

logger = logging.getLogger(__name__)

_DEAD_COMPONENT_MASS = 1e-8


def _log_joint(X, weights, means, variances):
    """Per-frame, per-component log of weight times Gaussian density."""
    inv = 1.0 / variances
    const = -0.5 * (means.shape[1] * np.log(2.0 * np.pi) + np.sum(np.log(variances), axis=1))
    quad = X**2 @ inv.T - 2.0 * (X @ (means * inv).T) + np.sum(means**2 * inv, axis=1)
    return np.log(weights) + const - 0.5 * quad


def _logsumexp_rows(log_p):
    peak = log_p.max(axis=1, keepdims=True)
    return peak + np.log(np.sum(np.exp(log_p - peak), axis=1, keepdims=True))


def kmeans_plus_plus(X: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """Squared-distance-weighted seeding; raises if there are fewer distinct
    points than clusters."""
    centroids = np.empty((n_clusters, X.shape[1]))
    centroids[0] = X[rng.integers(len(X))]
    d2 = np.sum((X - centroids[0]) ** 2, axis=1)
    for k in range(1, n_clusters):
        total = d2.sum()
        if total <= 0.0:
            raise DegenerateInitError(
                f"fewer than {n_clusters} distinct frames available for initialization"
            )
        centroids[k] = X[rng.choice(len(X), p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centroids[k]) ** 2, axis=1))
    return centroids


def _lloyd(X, centroids, n_iter):
    assign = None
    for _ in range(n_iter):
        d2 = (
            np.sum(X**2, axis=1)[:, None]
            - 2.0 * X @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]
        )
        new_assign = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(len(centroids)):
            members = X[assign == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
            else:
                centroids[k] = X[np.argmax(d2.min(axis=1))]
    return centroids, assign


class DiagGmm(BaseEstimator):
    """Diagonal-covariance GMM with mergeable EM accumulators.

    Parameters
    ----------
    n_components : mixture size C.
    n_iter : maximum EM iterations in ``fit``.
    tol : relative log-likelihood gain below which EM stops early.
    var_floor_scale : variance floor as a fraction of the global per-dimension
        data variance, applied after initialization and every M-step.
    kmeans_iters : Lloyd refinement passes after k-means++ seeding.
    seed : RNG seed; fixed seed and data give bit-identical models.
    """

    def __init__(
        self,
        n_components: int = 64,
        n_iter: int = 20,
        tol: float = 1e-6,
        var_floor_scale: float = 1e-4,
        kmeans_iters: int = 10,
        seed: int = 0,
    ):
        self.n_components = n_components
        self.n_iter = n_iter
        self.tol = tol
        self.var_floor_scale = var_floor_scale
        self.kmeans_iters = kmeans_iters
        self.seed = seed

    # -- model state ----------------------------------------------------

    def initialize(self, X) -> "DiagGmm":
        """Seed weights/means/variances from k-means clusters of the pool."""
        X = as_float_matrix(X, "frame pool")
        if len(X) < self.n_components:
            raise DegenerateInitError(
                f"{len(X)} frames cannot seed {self.n_components} components"
            )
        rng = np.random.default_rng(self.seed)
        centroids = kmeans_plus_plus(X, self.n_components, rng)
        centroids, assign = _lloyd(X, centroids, self.kmeans_iters)

        self.var_floor_ = np.maximum(self.var_floor_scale * X.var(axis=0), 1e-12)
        weights = np.empty(self.n_components)
        means = np.empty((self.n_components, X.shape[1]))
        variances = np.empty_like(means)
        global_var = np.maximum(X.var(axis=0), self.var_floor_)
        for k in range(self.n_components):
            members = X[assign == k]
            weights[k] = max(len(members), 1) / len(X)
            if len(members):
                means[k] = members.mean(axis=0)
                variances[k] = np.maximum(members.var(axis=0), self.var_floor_)
            else:
                means[k] = centroids[k]
                variances[k] = global_var
        self.weights_ = weights / weights.sum()
        self.means_ = means
        self.variances_ = variances
        return self

    def em_step(self, X) -> float:
        """One EM update in place; returns the total log-likelihood of ``X``
        under the model as it was *before* the update."""
        X = as_float_matrix(X, "frame pool")
        self._check_dim(X)
        log_p = _log_joint(X, self.weights_, self.means_, self.variances_)
        norm = _logsumexp_rows(log_p)
        loglik = float(norm.sum())
        gamma = np.exp(log_p - norm)

        n = gamma.sum(axis=0)
        f = gamma.T @ X
        s = gamma.T @ X**2

        alive = n > _DEAD_COMPONENT_MASS
        safe_n = np.where(alive, n, 1.0)
        means = np.where(alive[:, None], f / safe_n[:, None], 0.0)
        variances = np.where(
            alive[:, None], s / safe_n[:, None] - means**2, 1.0
        )

        if not np.all(alive):
            dead = np.flatnonzero(~alive)
            for j, c in enumerate(dead):
                donor = int(np.argmax(np.where(alive, variances.sum(axis=1), -np.inf)))
                direction = np.where(np.arange(X.shape[1]) % 2 == 0, 1.0, -1.0)
                if j % 2:
                    direction = -direction
                means[c] = means[donor] + 0.5 * np.sqrt(np.maximum(variances[donor], 0.0)) * direction
                variances[c] = variances[donor]
                n[c] = n[donor] / 2.0
                n[donor] = n[donor] / 2.0
                logger.warning("reseeded dead component %d from component %d", c, donor)

        self.means_ = means
        self.variances_ = np.maximum(variances, self.var_floor_)
        self.weights_ = n / n.sum()
        return loglik

    def fit(self, X, y=None) -> "DiagGmm":
        X = as_float_matrix(X, "frame pool")
        self.initialize(X)
        path = []
        for _ in range(self.n_iter):
            loglik = self.em_step(X)
            path.append(loglik)
            if len(path) >= 2 and abs(path[-1] - path[-2]) < self.tol * abs(path[-2]):
                break
        self.log_likelihood_path_ = np.asarray(path)
        return self

    # -- inference --------------------------------------------------------

    def predict_proba(self, X) -> np.ndarray:
        """Frame posteriors: rows normalized in the log domain, summing to 1."""
        X = as_float_matrix(X, "features")
        self._check_dim(X)
        log_p = _log_joint(X, self.weights_, self.means_, self.variances_)
        return np.exp(log_p - _logsumexp_rows(log_p))

    def log_likelihood(self, X) -> float:
        X = as_float_matrix(X, "features")
        self._check_dim(X)
        log_p = _log_joint(X, self.weights_, self.means_, self.variances_)
        return float(_logsumexp_rows(log_p).sum())

    def _check_dim(self, X):
        if X.shape[1] != self.means_.shape[1]:
            raise DataError(
                f"feature dimension {X.shape[1]} does not match model dimension {self.means_.shape[1]}"
            )

    @property
    def dim(self) -> int:
        return self.means_.shape[1]

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        fileio.write_gmm(path, self.weights_, self.means_, self.variances_)

    @classmethod
    def load(cls, path) -> "DiagGmm":
        weights, means, variances = fileio.read_gmm(path)
        model = cls(n_components=len(weights))
        model.weights_ = weights
        model.means_ = means
        model.variances_ = variances
        model.var_floor_ = np.full(means.shape[1], 1e-12)
        return model
