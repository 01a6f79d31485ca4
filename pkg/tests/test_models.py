import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import transferlab as tl
from transferlab import gradcheck, models
from transferlab.models import (
    DegenerateEmbeddingError,
    DimensionMismatchError,
    cross_entropy_and_grads,
    cross_entropy_input_gradient,
    log_softmax,
    softmax,
)

from conftest import random_model


# -- forward passes -----------------------------------------------------------

def test_zero_parameter_model_gives_zero_representation(rng):
    m = random_model(input_dim=12, embed=5)
    for W, b in m.feature:
        W[...] = 0.0
        b[...] = 0.0
    x = rng.uniform(-0.9, 0.9, 12)
    assert np.array_equal(m.representation(x), np.zeros(5))


def test_forward_is_deterministic(rng):
    m = random_model(seed=11)
    x = rng.uniform(-0.9, 0.9, 10)
    assert np.array_equal(m.representation(x), m.representation(x))
    assert np.array_equal(m.logits(x), m.logits(x))


def test_forward_repr_matches_finite_differences(rng):
    m = random_model(input_dim=9, hidden=(7, 5), embed=4, seed=2)
    x = rng.uniform(-0.8, 0.8, 9)
    v = rng.normal(size=4)
    _, acts = m.feature_forward(x)
    analytic = m.feature_backward(acts, v[None, :])[0]
    numeric = gradcheck.numeric_gradient(lambda z: float(v @ m.representation(z)), x)
    assert gradcheck.relative_error(analytic, numeric) < 1e-4


def test_input_dim_mismatch_raises():
    m = random_model(input_dim=10)
    with pytest.raises(DimensionMismatchError):
        m.representation(np.zeros(11))


def test_logits_zero_weights_return_bias(rng):
    m = random_model(input_dim=6, embed=3, classes=4)
    m.w_c[...] = 0.0
    m.b_c[...] = np.array([0.5, -1.0, 2.0, 0.0])
    x = rng.uniform(-0.5, 0.5, 6)
    assert np.allclose(m.logits(x), m.b_c)


def test_logits_match_naive_triple_loop(rng):
    # independent oracle: naive matrix multiply, no numpy dot
    m = random_model(input_dim=6, embed=3, classes=4, seed=9)
    x = rng.uniform(-0.5, 0.5, 6)
    r = m.representation(x)
    expected = np.zeros(4)
    for i in range(4):
        acc = m.b_c[i]
        for j in range(3):
            acc += m.w_c[i, j] * r[j]
        expected[i] = acc
    assert np.allclose(m.logits(x), expected, atol=1e-12)


def test_probs_uniform_logits_give_uniform():
    assert np.allclose(softmax(np.zeros(7)), np.full(7, 1 / 7), atol=1e-15)


def test_probs_dominant_logit_saturates():
    p = softmax(np.array([50.0, -50.0]))
    assert p[0] > 1.0 - 1e-12


def test_probs_two_logit_case():
    # direct evaluation: softmax(1, 2) = (1/(1+e), e/(1+e))
    p = softmax(np.array([1.0, 2.0]))
    e = np.e
    assert np.allclose(p, [1 / (1 + e), e / (1 + e)], atol=1e-12)
    assert abs(p[0] - 0.2689414213699951) < 1e-12


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_probs_sum_to_one_and_argmax_matches(seed):
    rng = np.random.default_rng(seed)
    m = random_model(seed=seed % 1000)
    x = rng.uniform(-0.9, 0.9, 10)
    z = m.logits(x)
    p = m.probs(x)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p > 0)
    assert np.argmax(p) == np.argmax(z)


# -- training -----------------------------------------------------------------

def _separable_toy(rng, n=40):
    X = np.concatenate([
        rng.normal(-0.5, 0.08, size=(n // 2, 4)),
        rng.normal(0.5, 0.08, size=(n // 2, 4)),
    ])
    y = np.array([0] * (n // 2) + [1] * (n // 2))
    return np.clip(X, -0.95, 0.95), y


def test_train_separable_reaches_full_accuracy(rng):
    X, y = _separable_toy(rng)
    m = random_model(input_dim=4, hidden=(6,), embed=3, classes=2, seed=1)
    trained = tl.train_softmax(m, (X, y), tl.TrainConfig(lr=0.5, epochs=60, batch=8, seed=2))
    assert tl.accuracy(trained, (X, y)) == 1.0
    assert trained.m_train == len(X)


def test_train_zero_epochs_leaves_model_unchanged(rng):
    X, y = _separable_toy(rng)
    m = random_model(input_dim=4, classes=2, embed=3, hidden=(6,), seed=1)
    before = m.param_vector()
    trained = tl.train_softmax(m, (X, y), tl.TrainConfig(epochs=0, seed=2))
    assert np.array_equal(trained.param_vector(), before)


def test_train_same_seed_is_bit_identical(rng):
    X, y = _separable_toy(rng)
    m = random_model(input_dim=4, classes=2, embed=3, hidden=(6,), seed=1)
    hyper = tl.TrainConfig(lr=0.3, epochs=15, batch=8, seed=5)
    a = tl.train_softmax(m, (X, y), hyper)
    b = tl.train_softmax(m, (X, y), hyper)
    assert np.array_equal(a.param_vector(), b.param_vector())


def test_train_loss_decreases_smoothed(rng):
    X, y = _separable_toy(rng, n=60)
    m = random_model(input_dim=4, classes=2, embed=3, hidden=(8,), seed=3)
    trained = tl.train_softmax(m, (X, y), tl.TrainConfig(lr=0.3, epochs=30, batch=8, seed=5))
    losses = np.array(trained.loss_history)
    window = 5
    smoothed = np.convolve(losses, np.ones(window) / window, mode="valid")
    assert np.all(np.diff(smoothed) <= 1e-9)


def test_train_empty_dataset_raises():
    m = random_model(input_dim=4, classes=2, embed=3)
    with pytest.raises(ValueError):
        tl.train_softmax(m, (np.empty((0, 4)), np.empty(0, dtype=int)), tl.TrainConfig())


def test_train_label_out_of_range_raises(rng):
    m = random_model(input_dim=4, classes=2, embed=3)
    X = rng.uniform(-0.5, 0.5, (4, 4))
    with pytest.raises(ValueError):
        tl.train_softmax(m, (X, np.array([0, 1, 2, 0])), tl.TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_reports_hyperparameters(rng):
    X, y = _separable_toy(rng)
    m = random_model(input_dim=4, classes=2, embed=3, seed=1)
    with pytest.raises(models.TrainingDivergedError, match="lr="):
        tl.train_softmax(m, (X * 1e6, y), tl.TrainConfig(lr=1e12, epochs=50, batch=8, seed=2))


# -- gradients ----------------------------------------------------------------

def test_constant_objective_has_zero_gradient(rng):
    x = rng.normal(size=6)
    assert np.allclose(gradcheck.numeric_gradient(lambda z: 3.5, x), 0.0)


def test_quadratic_objective_gradient(rng):
    x = rng.normal(size=6)
    numeric = gradcheck.numeric_gradient(lambda z: float(z @ z), x)
    assert gradcheck.relative_error(numeric, 2 * x) < 1e-8


def test_cross_entropy_param_gradients_match_fd(rng):
    m = random_model(input_dim=7, hidden=(5,), embed=4, classes=3, seed=4)
    X = rng.uniform(-0.8, 0.8, (5, 7))
    y = rng.integers(0, 3, 5)
    _, grads = cross_entropy_and_grads(m, X, y)
    flat = np.concatenate(
        [np.concatenate([gW.ravel(), gb.ravel()]) for gW, gb in grads.feature]
        + [grads.w_c.ravel(), grads.b_c.ravel()]
    )

    def f(theta):
        probe = m.copy()
        probe.set_param_vector(theta)
        return cross_entropy_and_grads(probe, X, y)[0]

    numeric = gradcheck.numeric_gradient(f, m.param_vector())
    assert gradcheck.relative_error(flat, numeric) < 1e-4


def test_cross_entropy_input_gradient_matches_fd(rng):
    m = random_model(input_dim=7, hidden=(5,), embed=4, classes=3, seed=4)
    x = rng.uniform(-0.8, 0.8, 7)
    analytic = cross_entropy_input_gradient(m, x, 1)
    numeric = gradcheck.numeric_gradient(
        lambda z: float(-log_softmax(m.logits_batch(z[None, :]))[0, 1]), x)
    assert gradcheck.relative_error(analytic, numeric) < 1e-4


def test_random_triples_input_gradient_invariant():
    # 10 random (model, input, objective direction) triples at h = 1e-5
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        m = random_model(input_dim=8, hidden=(6,), embed=4, classes=4, seed=trial)
        x = rng.uniform(-0.8, 0.8, 8)
        label = int(rng.integers(0, 4))
        analytic = cross_entropy_input_gradient(m, x, label)
        numeric = gradcheck.numeric_gradient(
            lambda z: float(-log_softmax(m.logits_batch(z[None, :]))[0, label]),
            x, h=1e-5)
        assert gradcheck.relative_error(analytic, numeric) < 1e-4


# -- cosine geometry ----------------------------------------------------------

def test_cosine_trivial_cases():
    assert tl.cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == pytest.approx(1.0)
    assert tl.cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0, abs=1e-15)
    assert tl.cosine(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(
        np.sqrt(2) / 2)


def test_cosine_symmetry(rng):
    u, v = rng.normal(size=(2, 6))
    assert tl.cosine(u, v) == pytest.approx(tl.cosine(v, u), abs=1e-15)


def test_cosine_near_zero_vector_raises():
    with pytest.raises(DegenerateEmbeddingError):
        tl.cosine(np.zeros(3), np.ones(3))


def test_cosine_gradient_zero_for_same_ray(rng):
    x = rng.normal(size=5)
    assert np.allclose(tl.cosine_input_gradient(x, x), 0.0, atol=1e-12)
    assert np.allclose(tl.cosine_input_gradient(3.0 * x, x), 0.0, atol=1e-12)


def test_cosine_gradient_matches_fd(rng):
    x = rng.normal(size=5)
    x_ref = rng.normal(size=5)
    analytic = tl.cosine_input_gradient(x, x_ref)
    numeric = gradcheck.numeric_gradient(lambda z: tl.cosine(z, x_ref), x, h=1e-6)
    assert gradcheck.relative_error(analytic, numeric) < 1e-6


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=50, deadline=None)
def test_cosine_gradient_orthogonal_to_x(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=6) + 0.1
    x_ref = rng.normal(size=6) + 0.1
    g = tl.cosine_input_gradient(x, x_ref)
    bound = 1e-9 * np.linalg.norm(x) * max(np.linalg.norm(g), 1e-30)
    assert abs(float(g @ x)) <= max(bound, 1e-18)


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path, toy_model):
    path = tmp_path / "model.emd"
    tl.save_model(toy_model, path)
    loaded = tl.load_model(path)
    path2 = tmp_path / "model2.emd"
    tl.save_model(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()
    assert loaded.m_train == toy_model.m_train
    assert loaded.config == toy_model.config
    for (W1, b1), (W2, b2) in zip(toy_model.feature, loaded.feature):
        assert np.array_equal(W1.astype(np.float32), W2.astype(np.float32))
        assert np.array_equal(b1.astype(np.float32), b2.astype(np.float32))


def test_checkpoint_bad_magic(tmp_path, toy_model):
    path = tmp_path / "model.emd"
    tl.save_model(toy_model, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    from transferlab.binio import BadMagicError

    with pytest.raises(BadMagicError):
        tl.load_model(path)


def test_checkpoint_truncated(tmp_path, toy_model):
    path = tmp_path / "model.emd"
    tl.save_model(toy_model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    from transferlab.binio import TruncatedFileError

    with pytest.raises(TruncatedFileError):
        tl.load_model(path)


def test_checkpoint_version_mismatch(tmp_path, toy_model):
    path = tmp_path / "model.emd"
    tl.save_model(toy_model, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    from transferlab.binio import VersionError

    with pytest.raises(VersionError):
        tl.load_model(path)


def test_trained_representation_not_zero(toy_model, toy_gallery):
    for i in range(0, len(toy_gallery), 7):
        r = toy_model.representation(toy_gallery.images[i])
        assert np.linalg.norm(r) > 1e-9
