import numpy as np
import pytest
from sklearn.base import clone

from dare_lab.datagen import regression_1d, two_moons
from dare_lab.errors import ConfigurationError, ShapeError
from dare_lab.estimators import DareEnsembleClassifier, DareEnsembleRegressor
from dare_lab.losses import LossKind


def small_regressor(**kw):
    base = dict(
        hidden_dims=(16,), n_members=2, tau=0.5, learning_rate=3e-3,
        batch_size=16, max_epochs=30, checkpointing=False, seed=2,
    )
    base.update(kw)
    return DareEnsembleRegressor(**base)


def small_classifier(**kw):
    base = dict(
        hidden_dims=(16,), n_members=2, tau=0.05, learning_rate=3e-3,
        batch_size=16, max_epochs=40, checkpointing=False, seed=2,
    )
    base.update(kw)
    return DareEnsembleClassifier(**base)


def test_estimators_clone_cleanly():
    reg = small_regressor(delta=0.4)
    copy = clone(reg)
    assert copy.get_params() == reg.get_params()
    assert copy.delta == 0.4


def test_regressor_fit_predict_shapes():
    ds = regression_1d(80, seed=1)
    reg = small_regressor().fit(ds.X, ds.y)
    assert reg.n_features_in_ == 1
    assert reg.tau_ == 0.5
    assert reg.vanilla_ensemble_ is None
    assert reg.ensemble_.loss_kind is LossKind.GAUSSIAN_NLL

    grid = np.linspace(0.0, 5.0, 20).reshape(-1, 1)
    mu = reg.predict(grid)
    assert mu.shape == (20,)
    mu2, var = reg.predict_dist(grid)
    assert mu2.shape == (20, 1) and var.shape == (20, 1)
    assert np.all(var > 0)
    assert reg.uncertainty_score(grid).shape == (20,)
    assert np.isfinite(reg.score(ds.X, ds.y))


def test_regressor_deterministic_across_fits():
    ds = regression_1d(60, seed=4)
    grid = np.linspace(-1.0, 6.0, 9).reshape(-1, 1)
    a = small_regressor().fit(ds.X, ds.y).predict(grid)
    b = small_regressor().fit(ds.X, ds.y).predict(grid)
    assert np.array_equal(a, b)


def test_regressor_far_field_variance_exceeds_in_data():
    ds = regression_1d(80, seed=3)
    # permissive threshold keeps the large-weight reward switched on
    reg = small_regressor(tau=np.inf, max_epochs=50).fit(ds.X, ds.y)
    near = reg.uncertainty_score(np.array([[1.0], [4.0]]))
    far = reg.uncertainty_score(np.array([[40.0], [-40.0]]))
    assert far.min() > near.max()


def test_regressor_auto_tau_two_phase():
    ds = regression_1d(60, seed=6)
    reg = small_regressor(tau="auto", delta=0.25, max_epochs=15).fit(ds.X, ds.y)
    assert reg.vanilla_ensemble_ is not None
    best = [min(r.val_loss for r in t.records) for t in reg.vanilla_ensemble_.telemetries]
    assert reg.reference_val_loss_ == pytest.approx(float(np.mean(best)))
    assert reg.tau_ == pytest.approx(1.25 * reg.reference_val_loss_)
    # both phases share the member seed ladder
    assert reg.vanilla_ensemble_.member_seeds == reg.ensemble_.member_seeds


def test_regressor_explicit_validation_set():
    ds = regression_1d(60, seed=8)
    reg = small_regressor(max_epochs=10)
    reg.fit(ds.X[:45], ds.y[:45], X_val=ds.X[45:], y_val=ds.y[45:])
    assert reg.ensemble_.n_members == 2
    with pytest.raises(ConfigurationError):
        small_regressor().fit(ds.X, ds.y, X_val=ds.X[:5])


def test_regressor_rejects_mismatched_rows():
    with pytest.raises(ShapeError):
        small_regressor().fit(np.zeros((10, 2)), np.zeros(9))


def test_regressor_unfitted_predict_raises():
    with pytest.raises(ConfigurationError):
        small_regressor().predict(np.zeros((3, 1)))


def test_classifier_binary_with_string_labels():
    ds = two_moons(120, noise=0.1, seed=5)
    labels = np.where(ds.y[:, 0] > 0.5, "pos", "neg")
    clf = small_classifier().fit(ds.X, labels)
    assert clf.classes_.tolist() == ["neg", "pos"]
    assert clf.ensemble_.loss_kind is LossKind.MSE
    preds = clf.predict(ds.X)
    assert set(preds) <= {"neg", "pos"}
    assert clf.score(ds.X, labels) > 0.85
    scores = clf.uncertainty_score(np.array([[0.5, 0.25], [30.0, 30.0]]))
    assert scores.shape == (2,)


def test_classifier_multiclass_blobs():
    rng = np.random.default_rng(9)
    centers = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    labels = rng.integers(0, 3, size=120)
    X = centers[labels] + 0.4 * rng.normal(size=(120, 2))
    clf = small_classifier(tau=0.5).fit(X, labels)
    assert clf.classes_.tolist() == [0, 1, 2]
    assert clf.ensemble_.loss_kind is LossKind.CLASSIFICATION_MSE
    assert clf.ensemble_.members[0].layer_dims[-1] == 3
    assert clf.score(X, labels) > 0.85
    assert clf.uncertainty_score(X).shape == (120,)


def test_classifier_rejects_single_class():
    with pytest.raises(ConfigurationError):
        small_classifier().fit(np.zeros((8, 2)), np.zeros(8))


def test_classifier_validation_labels_must_be_known():
    ds = two_moons(40, noise=0.1, seed=2)
    labels = ds.y[:, 0].astype(int)
    clf = small_classifier(max_epochs=5)
    with pytest.raises(ConfigurationError):
        clf.fit(ds.X[:30], labels[:30], X_val=ds.X[30:],
                y_val=np.full(10, 7))
