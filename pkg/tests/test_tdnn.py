import copy

import numpy as np
import pytest

from svkit.errors import ConfigurationError, DataError, PipelineConfigError
from svkit.fileio import write_posteriors
from svkit.frontend import FeatureMatrix
from svkit.gmm import DiagGmm
from svkit.tdnn import Layer, Tdnn, labels_to_posteriors, pnorm, resolve_posteriors, splice


# --- splice -------------------------------------------------------------------

def test_splice_identity_offsets():
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(6, 3))
    assert np.array_equal(splice(frames, (0,)), frames)


def test_splice_edge_replication():
    frames = np.arange(6.0).reshape(3, 2)
    out = splice(frames, (-1, 0, 1))
    assert np.array_equal(out[0], np.concatenate([frames[0], frames[0], frames[1]]))
    assert np.array_equal(out[2], np.concatenate([frames[1], frames[2], frames[2]]))


def test_splice_matches_gather_loop_oracle():
    rng = np.random.default_rng(1)
    frames = rng.normal(size=(6, 2))
    offsets = (-2, 0, 2)
    out = splice(frames, offsets)
    for t in range(6):
        row = np.concatenate([frames[min(max(t + o, 0), 5)] for o in offsets])
        assert np.array_equal(out[t], row)


def test_splice_width_multiplies():
    rng = np.random.default_rng(2)
    frames = rng.normal(size=(4, 5))
    for offsets in ((0,), (-1, 0, 1), (-3, -1, 0, 2, 4)):
        assert splice(frames, offsets).shape == (4, 5 * len(offsets))


def test_splice_rejects_unsorted_or_empty():
    frames = np.zeros((3, 2))
    with pytest.raises(ConfigurationError):
        splice(frames, (1, 0))
    with pytest.raises(ConfigurationError):
        splice(frames, ())


# --- pnorm --------------------------------------------------------------------

def test_pnorm_pythagorean_triple():
    assert pnorm(np.array([3.0, 4.0]), p=2.0, group_size=2)[0] == pytest.approx(5.0)


def test_pnorm_zero_group():
    assert pnorm(np.zeros(4), p=2.0, group_size=4)[0] == 0.0


def test_pnorm_matches_formula_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=8)
    out = pnorm(x, p=2.0, group_size=2)
    for g in range(4):
        expect = (abs(x[2 * g]) ** 2 + abs(x[2 * g + 1]) ** 2) ** 0.5
        assert abs(out[g] - expect) < 1e-12


def test_pnorm_positively_homogeneous():
    rng = np.random.default_rng(4)
    x = rng.normal(size=12)
    for alpha in (-2.5, 0.3, 7.0):
        lhs = pnorm(alpha * x, p=2.0, group_size=3)
        rhs = abs(alpha) * pnorm(x, p=2.0, group_size=3)
        assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_pnorm_nondivisible_group_rejected():
    with pytest.raises(ConfigurationError):
        pnorm(np.zeros(5), p=2.0, group_size=2)


# --- forward ------------------------------------------------------------------

def _manual_net():
    net = Tdnn(n_senones=2)
    net.layers_ = [Layer((0,), np.eye(2), np.zeros(2), "softmax")]
    net.input_dim_ = 2
    return net


def test_forward_equal_logits_give_uniform_posteriors():
    net = _manual_net()
    frames = np.array([[0.3, 0.3], [-1.0, -1.0], [5.0, 5.0]])
    assert np.allclose(net.forward(frames), 0.5)


def test_forward_softmax_bias_shift_invariance():
    net = Tdnn(n_senones=4, splices=((-1, 0, 1), (0,)), hidden_width=8, group_size=2, seed=5)
    net.build(3)
    rng = np.random.default_rng(6)
    frames = rng.normal(size=(9, 3))
    base = net.forward(frames)
    net.layers_[-1].bias += 17.3
    shifted = net.forward(frames)
    assert np.max(np.abs(base - shifted)) < 1e-12


def test_forward_matches_independent_oracle():
    net = Tdnn(n_senones=3, splices=((-1, 0, 1), (0,)), hidden_width=8, group_size=2, seed=7)
    net.build(2)
    rng = np.random.default_rng(8)
    frames = rng.normal(size=(5, 2))

    # Oracle: explicit per-frame gather, matrix multiply, p-norm, softmax.
    l0, l1 = net.layers_
    hidden = np.empty((5, 4))
    for t in range(5):
        spliced = np.concatenate([frames[min(max(t + o, 0), 4)] for o in (-1, 0, 1)])
        z = l0.weight @ spliced + l0.bias
        for g in range(4):
            hidden[t, g] = np.sqrt(z[2 * g] ** 2 + z[2 * g + 1] ** 2)
    expect = np.empty((5, 3))
    for t in range(5):
        z = l1.weight @ hidden[t] + l1.bias
        e = np.exp(z - z.max())
        expect[t] = e / e.sum()

    assert np.max(np.abs(net.forward(frames) - expect)) < 1e-10


def test_forward_rows_stochastic_at_huge_logits():
    net = _manual_net()
    frames = np.array([[1e3, -1e3], [-1e3, 1e3], [500.0, 500.0]])
    gamma = net.forward(frames)
    assert np.allclose(gamma.sum(axis=1), 1.0, atol=1e-9)


def test_forward_width_mismatch():
    net = _manual_net()
    with pytest.raises(DataError):
        net.forward(np.zeros((4, 3)))


# --- training -------------------------------------------------------------------

def test_train_step_zero_learning_rate_is_identity():
    net = Tdnn(n_senones=3, splices=((-1, 0, 1), (0,)), hidden_width=8, group_size=2, seed=9)
    net.build(2)
    rng = np.random.default_rng(10)
    frames = rng.normal(size=(12, 2))
    labels = rng.integers(3, size=12)
    before = [(l.weight.copy(), l.bias.copy()) for l in net.layers_]
    net.train_step(frames, labels, learning_rate=0.0)
    for layer, (w, b) in zip(net.layers_, before):
        assert np.array_equal(layer.weight, w)
        assert np.array_equal(layer.bias, b)


def _mean_ce(net, frames, labels):
    p = net.forward(frames)
    return -np.mean(np.log(p[np.arange(len(labels)), labels]))


def test_analytic_gradient_matches_central_differences():
    net = Tdnn(n_senones=3, splices=((-1, 0, 1), (0,)), hidden_width=8, group_size=2, seed=11)
    net.build(3)
    rng = np.random.default_rng(12)
    frames = rng.normal(size=(7, 3))
    labels = rng.integers(3, size=7)

    # A unit learning-rate step recovers the analytic gradient exactly.
    probe = copy.deepcopy(net)
    probe.train_step(frames, labels, learning_rate=1.0)
    grads = [
        (ref.weight - new.weight, ref.bias - new.bias)
        for ref, new in zip(net.layers_, probe.layers_)
    ]

    eps = 1e-5
    worst = 0.0
    for li, layer in enumerate(net.layers_):
        for arr, grad in ((layer.weight, grads[li][0]), (layer.bias, grads[li][1])):
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                keep = arr[idx]
                arr[idx] = keep + eps
                up = _mean_ce(net, frames, labels)
                arr[idx] = keep - eps
                down = _mean_ce(net, frames, labels)
                arr[idx] = keep
                numeric = (up - down) / (2 * eps)
                rel = abs(grad[idx] - numeric) / max(abs(numeric), abs(grad[idx]), 1e-6)
                worst = max(worst, rel)
                it.iternext()
    assert worst < 1e-4


def test_training_loss_decreases_on_separable_data():
    rng = np.random.default_rng(13)
    n = 120
    labels = rng.integers(2, size=n)
    frames = np.where(labels[:, None] == 0, -2.0, 2.0) + rng.normal(0, 0.1, size=(n, 2))
    net = Tdnn(n_senones=2, splices=((0,), (0,)), hidden_width=8, group_size=2, seed=14)
    net.build(2)
    losses = [net.train_step(frames, labels, learning_rate=0.05) for _ in range(200)]
    for k in range(len(losses) - 10):
        assert losses[k + 10] < losses[k]


def test_train_step_empty_batch_rejected():
    net = _manual_net()
    with pytest.raises(DataError):
        net.train_step(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_fit_learns_frame_classification():
    rng = np.random.default_rng(15)
    utts, labs = [], []
    centers = np.array([[-3.0, 0.0], [0.0, 3.0], [3.0, -3.0]])
    for seed in range(4):
        r = np.random.default_rng(seed)
        y = r.integers(3, size=300)
        x = centers[y] + r.normal(0, 0.4, size=(300, 2))
        utts.append(FeatureMatrix(x, 0.01, "asr"))
        labs.append(y)
    net = Tdnn(
        n_senones=3, splices=((0,), (0,)), hidden_width=16, group_size=2,
        learning_rate=0.2, batch_frames=64, n_epochs=8, seed=16,
    ).fit(utts, labs)
    pred = net.forward(utts[0]).argmax(axis=1)
    assert (pred == labs[0]).mean() > 0.9


# --- persistence and dispatch -----------------------------------------------------

def test_save_load_round_trip(tmp_path):
    net = Tdnn(n_senones=3, splices=((-1, 0, 1), (0,)), hidden_width=8, group_size=2, seed=17)
    net.build(2)
    path = tmp_path / "net.bin"
    net.save(path)
    back = Tdnn.load(path)
    rng = np.random.default_rng(18)
    frames = rng.normal(size=(6, 2))
    assert np.array_equal(net.forward(frames), back.forward(frames))


def test_labels_to_posteriors_one_hot():
    gamma = labels_to_posteriors(np.array([2, 0, 1]), 3)
    assert np.array_equal(gamma, np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]], dtype=float))


def test_resolve_posteriors_gmm_delegation():
    rng = np.random.default_rng(19)
    X = rng.normal(size=(200, 2))
    ubm = DiagGmm(n_components=2, seed=0).initialize(X)
    feats = FeatureMatrix(X[:30], 0.01, "speaker")
    out = resolve_posteriors(ubm, speaker_features=feats)
    assert np.array_equal(out, ubm.predict_proba(X[:30]))


def test_resolve_posteriors_tdnn_delegation():
    net = Tdnn(n_senones=3, splices=((0,), (0,)), hidden_width=8, group_size=2, seed=20)
    net.build(2)
    rng = np.random.default_rng(21)
    feats = FeatureMatrix(rng.normal(size=(10, 2)), 0.01, "asr")
    assert np.array_equal(resolve_posteriors(net, asr_features=feats), net.forward(feats))


def test_resolve_posteriors_file_round_trip(tmp_path):
    net = Tdnn(n_senones=3, splices=((0,), (0,)), hidden_width=8, group_size=2, seed=22)
    net.build(2)
    rng = np.random.default_rng(23)
    feats = FeatureMatrix(rng.normal(size=(10, 2)), 0.01, "asr")
    gamma = net.forward(feats)
    path = tmp_path / "utt.post"
    write_posteriors(path, gamma)
    assert np.array_equal(resolve_posteriors(path), gamma)


def test_resolve_posteriors_missing_stream():
    rng = np.random.default_rng(24)
    ubm = DiagGmm(n_components=2, seed=0).initialize(rng.normal(size=(50, 2)))
    with pytest.raises(PipelineConfigError):
        resolve_posteriors(ubm, asr_features=FeatureMatrix(np.zeros((3, 2)), 0.01, "asr"))
