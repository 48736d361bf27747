import os
import sys
import tempfile

import numpy as np

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.esmlr.esmlr_core import (
    FeatureMode, LorsalConfig, ModelConfig, Regressor, RidgeConfig, Variant, assemble_input,
    load_model, log_likelihood, log_likelihood_gradient, lorsal_train, map_objective,
    mlr_posteriors, one_hot_targets, predict, predict_proba, ridge_init, save_model,
    soft_threshold, train,
)
from src.esmlr.feature_maps import identity_features
from src.models.types import EmapsDescriptor
from src.utils.errors import ConfigError, DataError


def _blobs(n_per_class: int = 30, d: int = 5, M: int = 3, spread: float = 0.08, seed: int = 0):
    """Well-separated Gaussian clusters in [0, 1]^d, labels 1..M."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2, 0.8, size=(M, d))
    X = np.hstack([centres[m][:, None] + spread * rng.normal(size=(d, n_per_class)) for m in range(M)])
    labels = np.repeat(np.arange(1, M + 1), n_per_class)
    return X, labels


def _noisy_instance(seed: int = 0, d: int = 4, n: int = 80, M: int = 3):
    """Labels drawn from a softmax model, so the classes overlap and the MAP optimum is finite."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(d, n))
    W_true = rng.normal(scale=1.5, size=(M - 1, d + 1))
    H = identity_features(X)
    P = mlr_posteriors(W_true, H)
    labels = np.array([rng.choice(M, p=P[:, j]) + 1 for j in range(n)])
    return H, labels, M


def test_one_hot_targets_drop_last_class():
    Y = one_hot_targets(np.array([1, 3, 2, 3]), 3).Y
    assert Y.shape == (2, 4)
    assert Y.tolist() == [[1, 0, 0, 0], [0, 0, 1, 0]]
    try:
        one_hot_targets(np.array([0, 1]), 3)
        assert False, "expected DataError"
    except DataError:
        pass


def test_ridge_matches_normal_equations():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rows = int(rng.integers(1, 21))
        n = int(rng.integers(2, 31))
        M = int(rng.integers(2, 6))
        C = 2.0 ** int(rng.integers(0, 11))
        H = rng.uniform(-1, 1, size=(rows, n))
        labels = rng.integers(1, M + 1, size=n)
        Y = one_hot_targets(labels, M)

        oracle = np.linalg.solve(H @ H.T + np.eye(rows) / C, H @ Y.Y.T).T
        primal = ridge_init(H, Y, RidgeConfig(C), form='primal').W
        dual = ridge_init(H, Y, RidgeConfig(C), form='dual').W
        auto = ridge_init(H, Y, RidgeConfig(C)).W

        scale = max(np.linalg.norm(oracle), 1e-300)
        assert np.linalg.norm(primal - oracle) / scale < 1e-8
        assert np.linalg.norm(dual - oracle) / scale < 1e-8
        assert np.linalg.norm(primal - dual) / scale < 1e-8
        assert auto.shape == (M - 1, rows)


def test_ridge_rejects_bad_weight():
    for C in (0.0, -1.0):
        try:
            RidgeConfig(C)
            assert False, "expected ConfigError"
        except ConfigError:
            pass
    assert RidgeConfig.from_exponent(10).C == 1024.0


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    step = 1e-5
    for _ in range(20):
        rows = int(rng.integers(2, 7))
        n = int(rng.integers(5, 16))
        M = int(rng.integers(2, 5))
        H = rng.normal(size=(rows, n))
        labels = rng.integers(1, M + 1, size=n)
        W = rng.normal(scale=0.5, size=(M - 1, rows))

        analytic = log_likelihood_gradient(W, H, one_hot_targets(labels, M))
        numeric = np.zeros_like(W)
        for idx in np.ndindex(*W.shape):
            E = np.zeros_like(W)
            E[idx] = step
            numeric[idx] = (log_likelihood(W + E, H, labels) - log_likelihood(W - E, H, labels)) / (2 * step)

        assert np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-12) < 1e-5


def test_posteriors_are_distributions():
    rng = np.random.default_rng(2)
    for _ in range(20):
        M = int(rng.integers(2, 8))
        rows = int(rng.integers(1, 10))
        W = rng.normal(scale=3.0, size=(M - 1, rows))
        H = rng.normal(size=(rows, 25))
        P = mlr_posteriors(W, H)
        assert P.shape == (M, 25)
        assert np.all(P >= 0)
        assert np.max(np.abs(P.sum(axis=0) - 1.0)) < 1e-12


def test_posteriors_invariant_to_shifting_all_classes():
    rng = np.random.default_rng(3)
    W_full = rng.normal(size=(4, 6))
    H = rng.normal(size=(6, 10))
    scores = W_full @ H
    expected = np.exp(scores - scores.max(axis=0)) / np.exp(scores - scores.max(axis=0)).sum(axis=0)
    gauge_fixed = W_full[:-1] - W_full[-1]
    assert np.allclose(mlr_posteriors(gauge_fixed, H), expected, atol=1e-12)


def test_posteriors_reject_shape_mismatch():
    try:
        mlr_posteriors(np.zeros((2, 3)), np.zeros((4, 5)))
        assert False, "expected DataError"
    except DataError:
        pass


def test_soft_threshold():
    v = np.array([-3.0, -0.5, 0.0, 0.2, 2.0])
    assert soft_threshold(v, 1.0).tolist() == [-2.0, 0.0, 0.0, 0.0, 1.0]
    assert np.array_equal(soft_threshold(v, 0.0), v)
    try:
        soft_threshold(v, -1.0)
        assert False, "expected ConfigError"
    except ConfigError:
        pass


def test_lorsal_objective_never_decreases():
    H, labels, M = _noisy_instance(seed=4)
    cfg = LorsalConfig.from_exponent(-4, max_iter=300, tol=1e-12)
    fitted = lorsal_train(H, labels, np.zeros((M - 1, H.rows)), cfg)

    history = np.array(fitted.history)
    assert len(history) > 2
    assert np.all(np.diff(history) >= -1e-9)
    assert history[-1] > history[0]
    assert abs(history[-1] - map_objective(fitted.W, H, labels, cfg.lam)) < 1e-9


def test_lorsal_sparsity_grows_with_lambda():
    H, labels, M = _noisy_instance(seed=5)
    W0 = np.zeros((M - 1, H.rows))
    counts = []
    for b in range(-15, 1, 3):
        fitted = lorsal_train(H, labels, W0, LorsalConfig.from_exponent(b, max_iter=2000, tol=1e-12))
        counts.append(fitted.nnz)

    assert all(later <= earlier for earlier, later in zip(counts, counts[1:])), counts
    assert counts[0] == W0.size


def test_lorsal_large_lambda_gives_zero_regressor():
    H, labels, M = _noisy_instance(seed=6)
    fitted = lorsal_train(H, labels, np.zeros((M - 1, H.rows)), LorsalConfig.from_exponent(12))
    assert fitted.nnz == 0


def test_lorsal_config_validation():
    for kwargs in (dict(lam=-1.0), dict(lam=1.0, mu=0.0), dict(lam=1.0, max_iter=0), dict(lam=1.0, tol=0.0)):
        try:
            LorsalConfig(**kwargs)
            assert False, "expected ConfigError"
        except ConfigError:
            pass
    assert LorsalConfig(lam=0.0).penalty > 0
    assert LorsalConfig(lam=2.0 ** -10).penalty >= 1e-4


def test_map_objective_at_zero_and_without_penalty():
    H, labels, M = _noisy_instance(seed=8)
    n = H.n
    zero = np.zeros((M - 1, H.rows))
    assert abs(map_objective(zero, H, labels, 0.5) - (-n * np.log(M))) < 1e-9

    W = np.random.default_rng(8).normal(size=(M - 1, H.rows))
    assert map_objective(W, H, labels, 0.0) == log_likelihood(W, H, labels)


def test_map_objective_matches_per_sample_sum():
    H, labels, M = _noisy_instance(seed=9, n=25)
    W = np.random.default_rng(9).normal(size=(M - 1, H.rows))
    lam = 0.3

    expected = 0.0
    for j in range(H.n):
        h = H.H[:, j]
        scores = [float(W[m] @ h) for m in range(M - 1)] + [0.0]
        expected += scores[labels[j] - 1] - np.log(np.sum(np.exp(scores)))
    expected -= lam * np.abs(W).sum()

    assert abs(map_objective(W, H, labels, lam) - expected) < 1e-9


def test_lorsal_without_sparsity_separates_two_classes():
    rng = np.random.default_rng(10)
    X = np.hstack([rng.uniform(-2.0, -1.0, size=(2, 15)), rng.uniform(1.0, 2.0, size=(2, 15))])
    labels = np.repeat([1, 2], 15)
    H = identity_features(X)
    fitted = lorsal_train(H, labels, np.zeros((1, H.rows)), LorsalConfig(lam=0.0, max_iter=100))

    assert np.all(np.isfinite(fitted.W))
    predicted = np.argmax(mlr_posteriors(fitted, H), axis=0) + 1
    assert np.array_equal(predicted, labels)


def test_single_pixels_score_as_in_the_full_batch():
    X, labels = _blobs(n_per_class=100)
    for variant, config in ((Variant.ESMLR, ModelConfig(L=40)),
                            (Variant.K_SMLR, ModelConfig()),
                            (Variant.K_ESMLR, ModelConfig(L=40, kernel_input='mapped'))):
        model = train(variant, FeatureMode.SPECTRAL, X, labels, 3, config, seed=13)
        batch = predict_proba(model, X)
        for j in range(0, X.shape[1], 11):
            assert np.array_equal(predict_proba(model, X[:, j:j + 1])[:, 0], batch[:, j]), (variant, j)


def _mfl_input(spectral_dim: int = 5, spatial_dim: int = 3):
    X_spe, labels = _blobs(d=spectral_dim, seed=1)
    X_spa, _ = _blobs(d=spatial_dim, seed=2)
    emaps = EmapsDescriptor(thresholds=[10], connectivity=4, share=0.99, components=1, features=spatial_dim)
    return np.vstack([X_spe, X_spa]), labels, emaps


def test_mfl_models_record_their_layout_and_reload():
    X, labels, emaps = _mfl_input()
    model = train(Variant.ESMLR, FeatureMode.MFL, X, labels, 3, ModelConfig(L=30), seed=4,
                  emaps=emaps, spectral_dim=5)

    assert model.pipeline['mfl_layout'] == {'spectral_rows': 5, 'spatial_rows': 3}
    assert model.pipeline['emaps'] == emaps

    spatial_only = train(Variant.SMLR, FeatureMode.EMAPS, X[5:], labels, 3, ModelConfig(), emaps=emaps)
    assert spatial_only.pipeline['mfl_layout'] is None
    assert spatial_only.pipeline['emaps'] == emaps

    spectral = train(Variant.SMLR, FeatureMode.SPECTRAL, X[:5], labels, 3, ModelConfig())
    assert spectral.pipeline['mfl_layout'] is None and spectral.pipeline['emaps'] is None

    with tempfile.TemporaryDirectory() as tmp:
        prefix = os.path.join(tmp, 'mfl')
        save_model(model, prefix)
        loaded = load_model(prefix)

    assert loaded.pipeline == model.pipeline
    assert loaded.pipeline['mfl_layout']['spectral_rows'] == 5
    assert np.array_equal(predict_proba(loaded, X), predict_proba(model, X))


def test_spatial_modes_need_their_layout():
    X, labels, emaps = _mfl_input()
    for mode, kwargs in ((FeatureMode.EMAPS, {}), (FeatureMode.MFL, dict(spectral_dim=5)),
                         (FeatureMode.MFL, dict(emaps=emaps))):
        try:
            train(Variant.SMLR, mode, X, labels, 3, **kwargs)
            assert False, "expected ConfigError"
        except ConfigError:
            pass

    try:
        train(Variant.SMLR, FeatureMode.MFL, X, labels, 3, emaps=emaps, spectral_dim=4)
        assert False, "expected DataError"
    except DataError:
        pass


def test_variants_train_and_classify_blobs():
    X_all, labels_all = _blobs(n_per_class=60)
    X, labels = X_all[:, ::2], labels_all[::2]
    X_test, labels_test = X_all[:, 1::2], labels_all[1::2]
    for variant in Variant:
        config = ModelConfig(L=60, b=-10.0, sigma=0.3)
        model = train(variant, FeatureMode.SPECTRAL, X, labels, 3, config, seed=7)
        accuracy = float(np.mean(predict(model, X_test) == labels_test))
        assert accuracy >= 0.9, (variant, accuracy)
        assert model.regressor.W.shape[0] == 2
        assert np.array_equal(model.regressor.W, model.regressor.W.astype(np.float32))


def test_esmlr_features_follow_the_random_map():
    X, labels = _blobs()
    model = train(Variant.ESMLR, FeatureMode.SPECTRAL, X, labels, 3, ModelConfig(L=25), seed=3)
    assert model.pipeline['feature_dim'] == 26
    assert model.pipeline['random_map']['L'] == 25
    assert model.pipeline['kernel'] is None

    kernel = train(Variant.K_SMLR, FeatureMode.SPECTRAL, X, labels, 3, ModelConfig(), seed=3)
    assert kernel.pipeline['feature_dim'] == X.shape[1] + 1
    assert kernel.feature_map is None

    mapped = train(Variant.K_ESMLR, FeatureMode.SPECTRAL, X, labels, 3,
                   ModelConfig(L=25, kernel_input='mapped'), seed=3)
    assert mapped.kernel.anchors.shape == (25, X.shape[1])


def test_kernel_variants_refuse_mfl():
    X, labels = _blobs()
    for variant in (Variant.K_SMLR, Variant.K_ESMLR):
        try:
            train(variant, FeatureMode.MFL, X, labels, 3)
            assert False, "expected ConfigError"
        except ConfigError:
            pass


def test_assemble_input_modes():
    spectral = np.ones((4, 6))
    spatial = np.zeros((3, 6))
    assert assemble_input(FeatureMode.SPECTRAL, spectral, spatial) is spectral
    assert assemble_input(FeatureMode.EMAPS, spectral, spatial) is spatial
    stacked = assemble_input(FeatureMode.MFL, spectral, spatial)
    assert stacked.shape == (7, 6)
    assert np.array_equal(stacked[:4], spectral) and np.array_equal(stacked[4:], spatial)
    try:
        assemble_input(FeatureMode.MFL, spectral, None)
        assert False, "expected DataError"
    except DataError:
        pass


def test_ties_go_to_the_smallest_class():
    X, labels = _blobs()
    model = train(Variant.SMLR, FeatureMode.SPECTRAL, X, labels, 3, ModelConfig(b=-10.0))
    model.regressor = Regressor(np.zeros_like(model.regressor.W))
    assert np.all(predict(model, X) == 1)
    assert np.allclose(predict_proba(model, X), 1.0 / 3.0)


def test_saved_models_reload_identically():
    X, labels = _blobs()
    with tempfile.TemporaryDirectory() as tmp:
        for variant, config in ((Variant.ESMLR, ModelConfig(L=30)),
                                (Variant.K_ESMLR, ModelConfig(L=30, kernel_input='mapped')),
                                (Variant.K_SMLR, ModelConfig())):
            model = train(variant, FeatureMode.SPECTRAL, X, labels, 3, config, seed=11)
            prefix = os.path.join(tmp, variant.value)
            save_model(model, prefix)
            loaded = load_model(prefix)

            assert np.array_equal(loaded.regressor.W, model.regressor.W)
            assert loaded.pipeline == model.pipeline
            assert np.array_equal(predict_proba(loaded, X), predict_proba(model, X))


def test_load_model_missing_descriptor():
    with tempfile.TemporaryDirectory() as tmp:
        try:
            load_model(os.path.join(tmp, 'absent'))
            assert False, "expected DataError"
        except DataError:
            pass

def test_load_model_missing_arrays():
    X, labels = _blobs()
    with tempfile.TemporaryDirectory() as tmp:
        for variant, suffix in ((Variant.SMLR, '.w.f32'), (Variant.K_SMLR, '.anchors.f64')):
            prefix = os.path.join(tmp, variant.value)
            save_model(train(variant, FeatureMode.SPECTRAL, X, labels, 3, ModelConfig()), prefix)
            os.remove(prefix + suffix)
            try:
                load_model(prefix)
                assert False, f"expected DataError without {suffix}"
            except DataError:
                pass



if __name__ == "__main__":
    for name, test in list(globals().items()):
        if name.startswith('test_') and callable(test):
            test()
            print(f"ok  {name}")
