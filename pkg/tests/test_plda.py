import numpy as np
import pytest
from scipy.stats import kendalltau, multivariate_normal

from svkit.errors import DataError, DegenerateIvectorError, TrainingError
from svkit.plda import Gplda, center_and_length_normalize, normalize_vector


def _random_spd(rng, dim, scale=1.0):
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    vals = rng.uniform(0.2, 1.0, size=dim) * scale
    return (q * vals) @ q.T


def _decaying_spd(rng, dim, scale, decay):
    """SPD matrix with a geometrically decaying spectrum, the shape real
    speaker/session covariances take after dimensionality reduction."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    vals = scale * decay ** np.arange(dim)
    return (q * vals) @ q.T


def _model_data(rng, n_speakers, n_sessions, dim, ac_scale=1.0, wc_scale=0.3):
    mu = rng.normal(size=dim)
    ac = _random_spd(rng, dim, ac_scale)
    wc = _random_spd(rng, dim, wc_scale)
    ys = rng.multivariate_normal(mu, ac, size=n_speakers)
    X = np.vstack([rng.multivariate_normal(y, wc, size=n_sessions) for y in ys])
    labels = np.repeat(np.arange(n_speakers), n_sessions)
    return mu, ac, wc, X, labels


# --- length normalization ----------------------------------------------------

def test_normalize_vector_at_mean_is_degenerate():
    mean = np.array([1.0, 2.0, 3.0])
    with pytest.raises(DegenerateIvectorError):
        normalize_vector(mean.copy(), mean)


def test_normalize_vector_three_four_five():
    out = normalize_vector(np.array([3.0, 4.0, 0.0]), np.zeros(3))
    assert np.allclose(out, [0.6, 0.8, 0.0], atol=1e-15)


def test_batch_normalization_unit_norms():
    rng = np.random.default_rng(0)
    vectors = rng.normal(size=(50, 8))
    mean = vectors.mean(axis=0)
    out, kept = center_and_length_normalize(vectors, mean)
    assert len(kept) == 50
    assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 1e-12


def test_batch_normalization_drops_degenerate_rows():
    rng = np.random.default_rng(1)
    vectors = rng.normal(size=(5, 4))
    mean = np.zeros(4)
    vectors[2] = 0.0
    out, kept = center_and_length_normalize(vectors, mean)
    assert list(kept) == [0, 1, 3, 4]
    assert out.shape == (4, 4)


# --- training -----------------------------------------------------------------

def generative_recovery_case(seed=10, n_speakers=200, n_sessions=8, dim=10):
    """Known-model data for the recovery check; 200 speaker draws bound how
    well any estimator can pin a 10x10 across-class matrix, so the planted
    spectra decay geometrically the way reduced speaker covariances do."""
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=dim)
    ac = _decaying_spd(rng, dim, 2.0, 0.55)
    wc = _decaying_spd(rng, dim, 0.5, 0.8)
    ys = rng.multivariate_normal(mu, ac, size=n_speakers)
    X = np.vstack([rng.multivariate_normal(y, wc, size=n_sessions) for y in ys])
    labels = np.repeat(np.arange(n_speakers), n_sessions)
    return ac, wc, X, labels


def test_em_recovers_generating_covariances():
    ac_true, wc_true, X, labels = generative_recovery_case()
    model = Gplda(n_iter=20).fit(X, labels)
    ac_err = np.linalg.norm(model.ac_ - ac_true) / np.linalg.norm(ac_true)
    wc_err = np.linalg.norm(model.wc_ - wc_true) / np.linalg.norm(wc_true)
    assert ac_err < 0.15
    assert wc_err < 0.15


def test_single_speaker_collapses_across_class():
    rng = np.random.default_rng(3)
    dim = 6
    wc = _random_spd(rng, dim, 0.5)
    center = rng.normal(size=dim)
    X = rng.multivariate_normal(center, wc, size=3000)
    labels = np.zeros(3000, dtype=int)
    model = Gplda(n_iter=400).fit(X, labels)
    assert np.linalg.eigvalsh(model.ac_).max() < 1e-6
    sample_cov = np.cov(X.T, bias=True)
    assert np.linalg.norm(model.wc_ - sample_cov) / np.linalg.norm(sample_cov) < 0.05


def test_zero_iterations_returns_split_covariance_init():
    rng = np.random.default_rng(4)
    _, _, _, X, labels = _model_data(rng, n_speakers=20, n_sessions=4, dim=5)
    model = Gplda(n_iter=0).fit(X, labels)
    total = (X - X.mean(axis=0)).T @ (X - X.mean(axis=0)) / len(X)
    assert np.allclose(model.mu_, X.mean(axis=0), atol=1e-12)
    assert np.allclose(model.ac_, 0.5 * total, atol=1e-12)
    assert np.allclose(model.wc_, 0.5 * total, atol=1e-12)


def test_all_singleton_speakers_rejected():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(30, 4))
    with pytest.raises(TrainingError):
        Gplda().fit(X, np.arange(30))


def test_em_objective_nondecreasing():
    rng = np.random.default_rng(6)
    _, _, _, X, labels = _model_data(rng, n_speakers=40, n_sessions=5, dim=6)
    model = Gplda(n_iter=12).fit(X, labels)
    path = model.objective_path_
    for prev, cur in zip(path, path[1:]):
        assert cur >= prev - 1e-8 * abs(prev)


def test_scatter_method_close_to_em_on_balanced_data():
    rng = np.random.default_rng(7)
    _, ac_true, wc_true, X, labels = _model_data(rng, n_speakers=150, n_sessions=8, dim=6)
    model = Gplda(method="scatter").fit(X, labels)
    assert np.linalg.norm(model.wc_ - wc_true) / np.linalg.norm(wc_true) < 0.2
    assert np.linalg.norm(model.ac_ - ac_true) / np.linalg.norm(ac_true) < 0.3


# --- scoring ------------------------------------------------------------------

def _manual_model(rng, dim):
    model = Gplda()
    model.mu_ = rng.normal(size=dim)
    model.ac_ = _random_spd(rng, dim, 0.8)
    model.wc_ = _random_spd(rng, dim, 0.4)
    model._finalize()
    return model


def test_zero_across_class_gives_zero_scores():
    rng = np.random.default_rng(8)
    model = Gplda()
    model.mu_ = rng.normal(size=5)
    model.ac_ = np.zeros((5, 5))
    model.wc_ = _random_spd(rng, 5, 0.5)
    model._finalize()
    scores = model.llr(rng.normal(size=(100, 5)), rng.normal(size=(100, 5)))
    assert np.max(np.abs(scores)) < 1e-9


def test_score_symmetry():
    rng = np.random.default_rng(9)
    model = _manual_model(rng, 6)
    e = rng.normal(size=(1000, 6))
    t = rng.normal(size=(1000, 6))
    assert np.max(np.abs(model.llr(e, t) - model.llr(t, e))) < 1e-10


def test_score_matches_dense_gaussian_oracle():
    rng = np.random.default_rng(10)
    model = _manual_model(rng, 2)
    total = model.ac_ + model.wc_
    joint_mean = np.concatenate([model.mu_, model.mu_])
    joint_cov = np.block([[total, model.ac_], [model.ac_, total]])
    for _ in range(25):
        e = rng.normal(size=2)
        t = rng.normal(size=2)
        expected = (
            multivariate_normal.logpdf(np.concatenate([e, t]), joint_mean, joint_cov)
            - multivariate_normal.logpdf(e, model.mu_, total)
            - multivariate_normal.logpdf(t, model.mu_, total)
        )
        assert abs(model.score_pair(e, t) - expected) < 1e-9


def test_target_scores_separate_from_nontarget():
    rng = np.random.default_rng(11)
    mu, ac, wc, X, labels = _model_data(rng, n_speakers=200, n_sessions=4, dim=10)
    model = Gplda(n_iter=10).fit(X, labels)
    grouped = X.reshape(200, 4, 10)
    tar = model.llr(grouped[:, 0], grouped[:, 1])
    non = model.llr(grouped[:-1, 2], grouped[1:, 3])
    assert tar.mean() - non.mean() > 1.0


def test_rank_order_invariant_under_common_affine_map():
    rng = np.random.default_rng(12)
    _, _, _, X, labels = _model_data(rng, n_speakers=60, n_sessions=4, dim=5)
    transform = rng.normal(size=(5, 5)) + 3.0 * np.eye(5)
    shift = rng.normal(size=5)
    X_mapped = X @ transform.T + shift

    enrol_idx = rng.integers(len(X), size=100)
    test_idx = rng.integers(len(X), size=100)
    base = Gplda(n_iter=8).fit(X, labels)
    mapped = Gplda(n_iter=8).fit(X_mapped, labels)
    s0 = base.llr(X[enrol_idx], X[test_idx])
    s1 = mapped.llr(X_mapped[enrol_idx], X_mapped[test_idx])
    tau, _ = kendalltau(s0, s1)
    assert tau == 1.0


def test_llr_shape_validation():
    rng = np.random.default_rng(13)
    model = _manual_model(rng, 4)
    with pytest.raises(DataError):
        model.llr(rng.normal(size=(3, 4)), rng.normal(size=(2, 4)))


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    _, _, _, X, labels = _model_data(rng, n_speakers=30, n_sessions=4, dim=5)
    model = Gplda(n_iter=5).fit(X, labels)
    path = tmp_path / "plda.bin"
    model.save(path)
    back = Gplda.load(path)
    e = rng.normal(size=(10, 5))
    t = rng.normal(size=(10, 5))
    assert np.allclose(back.llr(e, t), model.llr(e, t), atol=1e-12)


def test_non_positive_definite_model_rejected_at_load(tmp_path):
    from svkit import fileio
    from svkit.errors import ModelError

    rng = np.random.default_rng(15)
    mu = rng.normal(size=4)
    ac = np.zeros((4, 4))
    wc = -np.eye(4)  # not positive definite
    path = tmp_path / "broken.bin"
    fileio.write_plda(path, mu, ac, wc)
    with pytest.raises(ModelError):
        Gplda.load(path)
