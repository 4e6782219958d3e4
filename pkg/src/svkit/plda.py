"""Two-covariance Gaussian PLDA backend.

Vectors are centered on a development mean and length-normalized to the unit
sphere. The generative model puts a class (speaker) variable y ~ N(mu, AC)
under each observation w ~ N(y, WC); training is EM on the exact marginal
likelihood, with a moment-matching scatter estimator available behind a
flag. Verification scores are the log-likelihood ratio of the joint
same-class Gaussian against the product of independent marginals, evaluated
from factorization-derived quadratic forms precomputed at fit/load time.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator

from . import fileio
from .errors import DataError, DegenerateIvectorError, ModelError, TrainingError
from .validation import as_float_matrix, as_float_vector

logger = logging.getLogger(__name__)


def normalize_vector(w: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Center one vector and scale it to unit norm."""
    v = as_float_vector(w, "vector") - as_float_vector(mean, "mean")
    norm = np.linalg.norm(v)
    if norm < 1e-300:
        raise DegenerateIvectorError("vector equals the centering mean; norm is zero")
    return v / norm


def center_and_length_normalize(vectors, mean) -> tuple[np.ndarray, np.ndarray]:
    """Center a batch on ``mean`` and project to the unit sphere.

    Zero-norm rows cannot be normalized; they are dropped and logged, and the
    indices of the surviving rows are returned alongside the result.
    """
    vectors = as_float_matrix(vectors, "vectors")
    mean = as_float_vector(mean, "mean")
    centered = vectors - mean
    norms = np.linalg.norm(centered, axis=1)
    keep = norms >= 1e-300
    if not np.all(keep):
        for idx in np.flatnonzero(~keep):
            logger.warning("dropping degenerate vector at row %d (zero norm)", idx)
    kept_idx = np.flatnonzero(keep)
    return centered[keep] / norms[keep, None], kept_idx


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _clip_psd(m: np.ndarray, floor: float = 0.0) -> np.ndarray:
    vals, vecs = np.linalg.eigh(_symmetrize(m))
    return _symmetrize((vecs * np.maximum(vals, floor)) @ vecs.T)


class Gplda(BaseEstimator):
    """Gaussian PLDA with full-rank across-class and within-class covariances.

    Parameters
    ----------
    n_iter : EM iterations; zero returns the split-covariance initialization.
    method : "em" (default) or "scatter" for direct moment estimates.
    wc_floor_scale : eigenvalue floor on the within-class covariance as a
        fraction of trace/rank, guarding rank-deficient normalized data.
    seed : recorded for bookkeeping; the estimator itself is deterministic.
    """

    def __init__(self, n_iter: int = 20, method: str = "em", wc_floor_scale: float = 1e-8, seed: int = 0):
        self.n_iter = n_iter
        self.method = method
        self.wc_floor_scale = wc_floor_scale
        self.seed = seed

    # -- training ---------------------------------------------------------

    def fit(self, X, y) -> "Gplda":
        X = as_float_matrix(X, "vectors")
        y = np.asarray(y)
        if len(y) != len(X):
            raise DataError("labels are not aligned to vectors")
        labels, label_idx = np.unique(y, return_inverse=True)
        groups = [np.flatnonzero(label_idx == k) for k in range(len(labels))]
        counts = np.array([len(g) for g in groups])
        if counts.max() < 2:
            raise TrainingError(
                "every class has a single observation; within-class covariance is unidentifiable"
            )
        if len(labels) < 2:
            logger.warning("training on a single class; across-class covariance will collapse")

        mu = X.mean(axis=0)
        total = _symmetrize((X - mu).T @ (X - mu) / len(X))
        self.mu_ = mu
        self.ac_ = 0.5 * total
        self.wc_ = 0.5 * total

        if self.method == "scatter":
            self._fit_scatter(X, groups)
        elif self.method == "em":
            self._fit_em(X, groups)
        else:
            raise DataError(f"unknown training method {self.method!r}")
        self._finalize()
        return self

    def _fit_scatter(self, X, groups):
        mu = X.mean(axis=0)
        within = np.zeros((X.shape[1], X.shape[1]))
        between = np.zeros_like(within)
        for g in groups:
            class_mean = X[g].mean(axis=0)
            resid = X[g] - class_mean
            within += resid.T @ resid
            between += len(g) * np.outer(class_mean - mu, class_mean - mu)
        rank = X.shape[1]
        wc = within / len(X)
        self.mu_ = mu
        self.wc_ = _clip_psd(wc, self.wc_floor_scale * max(np.trace(wc), 1e-30) / rank)
        self.ac_ = _clip_psd(between / len(X))
        self.objective_path_ = np.asarray([self.marginal_log_likelihood(X, self._group_labels(groups, len(X)))])

    @staticmethod
    def _group_labels(groups, n):
        y = np.empty(n, dtype=np.int64)
        for k, g in enumerate(groups):
            y[g] = k
        return y

    def _fit_em(self, X, groups):
        rank = X.shape[1]
        class_sums = np.stack([X[g].sum(axis=0) for g in groups])
        counts = np.array([len(g) for g in groups], dtype=np.int64)
        objective = []
        for _ in range(self.n_iter):
            objective.append(self._marginal_loglik_grouped(X, groups, class_sums, counts))
            # E-step: posterior of each class mean in covariance form, which
            # stays well-defined as the across-class covariance collapses.
            post_means = np.empty((len(groups), rank))
            post_cov_sum = np.zeros((rank, rank))
            post_cov_by_class = np.empty((len(groups), rank, rank))
            for n in np.unique(counts):
                sel = np.flatnonzero(counts == n)
                sn = _symmetrize(self.ac_ + self.wc_ / n)
                gain = cho_solve(cho_factor(sn, lower=True), self.ac_).T  # AC Sn^-1
                cov = _symmetrize(self.ac_ - gain @ self.ac_)
                for k in sel:
                    class_mean = class_sums[k] / n
                    post_means[k] = self.mu_ + gain @ (class_mean - self.mu_)
                    post_cov_by_class[k] = cov
                    post_cov_sum += cov
            # M-step
            mu = post_means.mean(axis=0)
            centered = post_means - mu
            ac = (post_cov_sum + centered.T @ centered) / len(groups)
            wc = np.zeros((rank, rank))
            for k, g in enumerate(groups):
                resid = X[g] - post_means[k]
                wc += resid.T @ resid + counts[k] * post_cov_by_class[k]
            wc /= counts.sum()
            self.mu_ = mu
            self.ac_ = _clip_psd(ac)
            self.wc_ = _clip_psd(wc, self.wc_floor_scale * max(np.trace(wc), 1e-30) / rank)
        self.objective_path_ = np.asarray(objective)

    def _marginal_loglik_grouped(self, X, groups, class_sums, counts) -> float:
        rank = X.shape[1]
        wc_cho = cho_factor(_symmetrize(self.wc_), lower=True)
        logdet_wc = 2.0 * np.log(np.diag(wc_cho[0])).sum()
        total = 0.0
        for n in np.unique(counts):
            sel = np.flatnonzero(counts == n)
            sn = _symmetrize(self.ac_ + self.wc_ / n)
            sn_cho = cho_factor(sn, lower=True)
            logdet_sn = 2.0 * np.log(np.diag(sn_cho[0])).sum()
            for k in sel:
                class_mean = class_sums[k] / n
                diff = class_mean - self.mu_
                quad_between = float(diff @ cho_solve(sn_cho, diff))
                resid = X[groups[k]] - class_mean
                quad_within = float(np.sum(resid * cho_solve(wc_cho, resid.T).T))
                total += -0.5 * (
                    rank * np.log(2.0 * np.pi) + logdet_sn + quad_between
                    + (n - 1) * rank * np.log(2.0 * np.pi) + (n - 1) * logdet_wc
                    + rank * np.log(n) + quad_within
                )
        return total

    def marginal_log_likelihood(self, X, y) -> float:
        """Exact marginal log-likelihood of labeled vectors under the model."""
        X = as_float_matrix(X, "vectors")
        y = np.asarray(y)
        labels, label_idx = np.unique(y, return_inverse=True)
        groups = [np.flatnonzero(label_idx == k) for k in range(len(labels))]
        class_sums = np.stack([X[g].sum(axis=0) for g in groups])
        counts = np.array([len(g) for g in groups], dtype=np.int64)
        return self._marginal_loglik_grouped(X, groups, class_sums, counts)

    # -- scoring ------------------------------------------------------------

    def _finalize(self) -> None:
        """Precompute the quadratic forms of the likelihood ratio."""
        rank = self.mu_.shape[0]
        total = _symmetrize(self.ac_ + self.wc_)
        try:
            total_cho = cho_factor(total, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ModelError("across- plus within-class covariance is not positive definite") from exc
        eye = np.eye(rank)
        total_inv = cho_solve(total_cho, eye)
        cross = cho_solve(total_cho, self.ac_)  # S^-1 AC
        schur = _symmetrize(total - self.ac_ @ cross)
        try:
            schur_cho = cho_factor(schur, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ModelError("joint trial covariance is not positive definite") from exc
        p = cho_solve(schur_cho, eye)
        self._quad_same = _symmetrize(total_inv - p)
        self._quad_cross = _symmetrize(total_inv @ self.ac_ @ p)
        logdet_total = 2.0 * np.log(np.diag(total_cho[0])).sum()
        logdet_schur = 2.0 * np.log(np.diag(schur_cho[0])).sum()
        self._score_const = 0.5 * (logdet_total - logdet_schur)

    def llr(self, enrol, test) -> np.ndarray:
        """Batch log-likelihood ratios for row-paired enrollment/test vectors."""
        enrol = np.atleast_2d(np.asarray(enrol, dtype=np.float64))
        test = np.atleast_2d(np.asarray(test, dtype=np.float64))
        if enrol.shape != test.shape or enrol.shape[1] != self.mu_.shape[0]:
            raise DataError("enrollment/test vectors must pair up at the model rank")
        x = enrol - self.mu_
        y = test - self.mu_
        quad = 0.5 * np.sum(x * (x @ self._quad_same), axis=1)
        quad += 0.5 * np.sum(y * (y @ self._quad_same), axis=1)
        cross = np.sum(x * (y @ self._quad_cross), axis=1)
        return quad + cross + self._score_const

    def score_pair(self, enrol, test) -> float:
        return float(self.llr(enrol, test)[0])

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        fileio.write_plda(path, self.mu_, self.ac_, self.wc_)

    @classmethod
    def load(cls, path) -> "Gplda":
        mu, ac, wc = fileio.read_plda(path)
        model = cls()
        model.mu_ = mu
        model.ac_ = ac
        model.wc_ = wc
        model._finalize()
        return model
