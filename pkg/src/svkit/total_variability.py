"""Total-variability subspace: EM estimation over centered statistics and
fixed-length vector extraction.

For an utterance with per-class occupancies n and centered first-order
supervector f, the extracted vector solves

    (I + T' Sigma^-1 N T) w = T' Sigma^-1 f

where N expands each class occupancy across that class's feature block and
Sigma is the diagonal residual covariance. The system matrix is the identity
plus a positive-semidefinite term, so a symmetric positive-definite
factorization always applies; no explicit inverse is formed.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator

from . import fileio
from .errors import ConfigurationError, DataError, StateError
from .stats import SuffStats

_TV_INIT_SCALE = 1e-3


@dataclasses.dataclass
class IVector:
    """Fixed-length utterance summary with bookkeeping for trial assembly."""

    w: np.ndarray
    utterance_id: str = ""
    duration_active: float = 0.0


def _check_stats(stats: SuffStats, n_classes: int, dim: int) -> None:
    if not stats.centered:
        raise StateError("statistics must be centered before extraction")
    if stats.n_classes != n_classes or stats.dim != dim:
        raise DataError(
            f"statistics shape ({stats.n_classes} x {stats.dim}) does not match "
            f"model ({n_classes} x {dim})"
        )


def _posterior_system(t3, tw3, gram, stats):
    """System matrix and right-hand side of the posterior-mean equations.

    t3/tw3 are (C, D, R) views of T and Sigma^-1 T; gram[c] = T_c' Sig_c^-1 T_c.
    """
    rank = t3.shape[2]
    a = np.eye(rank) + np.tensordot(stats.n, gram, axes=1)
    b = np.einsum("cdr,cd->r", tw3, stats.f)
    return a, b


def extract_ivector(t_matrix: np.ndarray, sigma: np.ndarray, stats: SuffStats) -> np.ndarray:
    """Solve the posterior-mean system for one utterance's statistics."""
    size, rank = t_matrix.shape
    dim = stats.dim
    if size % dim:
        raise DataError("subspace rows are not a whole number of feature blocks")
    _check_stats(stats, size // dim, dim)
    t3 = t_matrix.reshape(stats.n_classes, dim, rank)
    tw3 = t3 / sigma.reshape(stats.n_classes, dim)[:, :, None]
    gram = np.einsum("cdr,cds->crs", tw3, t3)
    a, b = _posterior_system(t3, tw3, gram, stats)
    return cho_solve(cho_factor(a, lower=True), b)


class TotalVariability(BaseEstimator):
    """EM-trained low-rank subspace mapping statistics to fixed-length vectors.

    Parameters
    ----------
    rank : subspace dimension R (R <= classes x feature dim).
    n_iter : EM iterations; zero returns the seeded initialization.
    seed : RNG seed for the subspace initialization.
    update_sigma : re-estimate the diagonal residual covariance each
        iteration (floored like the alignment model's variances).
    sigma_floor_scale : floor on residual variances, as a fraction of the
        alignment model variances supplied to ``fit``.
    """

    def __init__(
        self,
        rank: int = 20,
        n_iter: int = 20,
        seed: int = 0,
        update_sigma: bool = True,
        sigma_floor_scale: float = 1e-4,
    ):
        self.rank = rank
        self.n_iter = n_iter
        self.seed = seed
        self.update_sigma = update_sigma
        self.sigma_floor_scale = sigma_floor_scale

    # -- training ---------------------------------------------------------

    def fit(self, stats_list, ubm_means: np.ndarray, ubm_variances: np.ndarray) -> "TotalVariability":
        """Estimate the subspace from centered development statistics.

        ``ubm_means`` are kept for record/centering downstream;
        ``ubm_variances`` initialize the residual covariance.
        """
        stats_list = list(stats_list)
        if len(stats_list) < 2:
            raise DataError("need at least two utterances of statistics")
        means = np.asarray(ubm_means, dtype=np.float64)
        variances = np.asarray(ubm_variances, dtype=np.float64)
        n_classes, dim = means.shape
        size = n_classes * dim
        if self.rank > size:
            raise ConfigurationError(f"rank {self.rank} exceeds supervector size {size}")
        for st in stats_list:
            _check_stats(st, n_classes, dim)

        sigma = variances.reshape(-1).copy()
        floor = np.maximum(self.sigma_floor_scale * variances.reshape(-1), 1e-12)
        rng = np.random.default_rng(self.seed)
        t_matrix = rng.standard_normal((size, self.rank)) * (_TV_INIT_SCALE * sigma.mean())

        # Centered second moments feed the exact marginal likelihood and the
        # residual update: s~ = s - 2 m f~ - n m^2, elementwise per class.
        s_cent = [st.s - 2.0 * means * st.f - st.n[:, None] * means**2 for st in stats_list]
        n_tot = np.sum([st.n for st in stats_list], axis=0)
        s_cent_tot = np.sum(s_cent, axis=0)

        objective = []
        for _ in range(self.n_iter):
            loglik, t_matrix, sigma = self._em_iteration(
                stats_list, s_cent, s_cent_tot, n_tot, t_matrix, sigma, floor,
                n_classes, dim,
            )
            objective.append(loglik)

        self.t_matrix_ = t_matrix
        self.sigma_ = sigma
        self.ubm_means_ = means
        self.objective_path_ = np.asarray(objective)
        return self

    def _em_iteration(self, stats_list, s_cent, s_cent_tot, n_tot, t_matrix, sigma, floor, n_classes, dim):
        rank = self.rank
        t3 = t_matrix.reshape(n_classes, dim, rank)
        tw3 = t3 / sigma.reshape(n_classes, dim)[:, :, None]
        gram = np.einsum("cdr,cds->crs", tw3, t3)
        inv_sigma = (1.0 / sigma).reshape(n_classes, dim)
        logdet_sigma = np.log(sigma).reshape(n_classes, dim).sum(axis=1)

        a_acc = np.zeros((n_classes, rank, rank))
        c_acc = np.zeros((n_classes, dim, rank))
        loglik = 0.0
        eye = np.eye(rank)
        for st, s_u in zip(stats_list, s_cent):
            a = eye + np.tensordot(st.n, gram, axes=1)
            b = np.einsum("cdr,cd->r", tw3, st.f)
            cho = cho_factor(a, lower=True)
            w_mean = cho_solve(cho, b)
            w_cov = cho_solve(cho, eye)
            moment = w_cov + np.outer(w_mean, w_mean)

            a_acc += st.n[:, None, None] * moment
            c_acc += st.f[:, :, None] * w_mean[None, None, :]

            logdet_a = 2.0 * np.log(np.diag(cho[0])).sum()
            loglik += (
                -0.5 * np.dot(st.n, dim * np.log(2.0 * np.pi) + logdet_sigma)
                - 0.5 * np.sum(s_u * inv_sigma)
                - 0.5 * logdet_a
                + 0.5 * float(b @ w_mean)
            )

        new_t3 = t3.copy()
        occupied = n_tot > 1e-8
        for c in range(n_classes):
            if occupied[c]:
                new_t3[c] = np.linalg.solve(a_acc[c], c_acc[c].T).T
        if self.update_sigma:
            new_sigma = sigma.reshape(n_classes, dim).copy()
            resid = s_cent_tot - np.einsum("cdr,cdr->cd", new_t3, c_acc)
            new_sigma[occupied] = resid[occupied] / n_tot[occupied, None]
            sigma = np.maximum(new_sigma.reshape(-1), floor)
        return loglik, new_t3.reshape(-1, rank), sigma

    # -- extraction ---------------------------------------------------------

    def extract(self, stats: SuffStats) -> np.ndarray:
        return extract_ivector(self.t_matrix_, self.sigma_, stats)

    def transform(self, stats_list) -> np.ndarray:
        """Vectors for a collection of centered statistics, one row each."""
        stats_list = list(stats_list)
        out = np.empty((len(stats_list), self.rank))
        for i, st in enumerate(stats_list):
            out[i] = self.extract(st)
        return out

    @property
    def n_classes(self) -> int:
        return self.ubm_means_.shape[0]

    @property
    def dim(self) -> int:
        return self.ubm_means_.shape[1]

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        fileio.write_tv(path, self.t_matrix_, self.sigma_, self.ubm_means_)

    @classmethod
    def load(cls, path) -> "TotalVariability":
        t_matrix, sigma, means = fileio.read_tv(path)
        model = cls(rank=t_matrix.shape[1])
        model.t_matrix_ = t_matrix
        model.sigma_ = sigma
        model.ubm_means_ = means
        return model
