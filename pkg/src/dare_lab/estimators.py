"""Estimator wrappers with the familiar fit/predict/get_params surface.

These wrap the functional training API for interactive use and for anything
expecting scikit-learn conventions (cloning, grid search, pipelines). The
heavy lifting stays in ensemble.py; fitted state lands in trailing-underscore
attributes.

tau="auto" runs the two-phase recipe: first a plain ensemble to measure an
achievable validation loss, then the anti-regularized ensemble with
tau = (1 + delta) * that reference.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .ensemble import (
    binary_uncertainty_score,
    ood_score_classification,
    predict_regression,
    train_ensemble,
)
from .errors import ConfigurationError, ShapeError
from .losses import LossKind, scaled_one_hot
from .metrics import nll_regression
from .network import NetworkSpec
from .training import TrainConfig, select_tau
from .validation import as_float_matrix


def _holdout_split(X, y, val_fraction, seed):
    n = X.shape[0]
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ConfigurationError("validation split leaves no training rows")
    order = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = order[:n_val], order[n_val:]
    return (X[train_idx], y[train_idx]), (X[val_idx], y[val_idx])


class _DareBase(BaseEstimator):
    def __init__(self, hidden_dims=(100, 100, 100), n_members=5, tau="auto",
                 delta=0.25, learning_rate=1e-3, batch_size=128, max_epochs=100,
                 lambda_mode="controlled", param_scope="weights",
                 checkpointing=True, val_fraction=0.2, seed=0, workers=1):
        self.hidden_dims = hidden_dims
        self.n_members = n_members
        self.tau = tau
        self.delta = delta
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lambda_mode = lambda_mode
        self.param_scope = param_scope
        self.checkpointing = checkpointing
        self.val_fraction = val_fraction
        self.seed = seed
        self.workers = workers

    def _config(self, tau, loss_kind, lambda_mode=None):
        return TrainConfig(
            tau=tau,
            loss_kind=loss_kind,
            lambda_mode=lambda_mode or self.lambda_mode,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=self.seed,
            param_scope=self.param_scope,
            checkpointing=self.checkpointing,
        )

    def _fit_ensembles(self, train_set, val_set, spec, loss_kind):
        """Resolve tau (two-phase when "auto") and train the working ensemble."""
        if self.tau == "auto":
            plain_cfg = self._config(-np.inf, loss_kind, lambda_mode="always_off")
            plain = train_ensemble(
                train_set, val_set, spec, plain_cfg, self.n_members, self.workers
            )
            reference = float(
                np.mean([min(r.val_loss for r in t.records) for t in plain.telemetries])
            )
            tau = select_tau(reference, self.delta)
            self.vanilla_ensemble_ = plain
            self.reference_val_loss_ = reference
        else:
            tau = float(self.tau)
            self.vanilla_ensemble_ = None
            self.reference_val_loss_ = None
        self.tau_ = tau
        cfg = self._config(tau, loss_kind)
        self.ensemble_ = train_ensemble(
            train_set, val_set, spec, cfg, self.n_members, self.workers
        )
        return self

    def _validate_fit_args(self, X, y, X_val, y_val):
        X = as_float_matrix(X, "X")
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise ShapeError(
                f"y has {y.shape[0]} rows but X has {X.shape[0]}"
            )
        if (X_val is None) != (y_val is None):
            raise ConfigurationError("pass X_val and y_val together or neither")
        self.n_features_in_ = X.shape[1]
        return X, y

    def _check_fitted(self):
        if not hasattr(self, "ensemble_"):
            raise ConfigurationError("estimator is not fitted yet; call fit first")


class DareEnsembleRegressor(_DareBase):
    """Ensemble regressor with mean and variance heads and inflated far-field
    uncertainty.

    predict returns the mixture mean; predict_dist adds the mixture variance,
    which doubles as the out-of-distribution score.
    """

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = self._validate_fit_args(X, y, X_val, y_val)
        y = as_float_matrix(np.asarray(y, dtype=np.float64), "y")
        q = y.shape[1]
        if X_val is None:
            train_set, val_set = _holdout_split(X, y, self.val_fraction, self.seed)
        else:
            train_set = (X, y)
            val_set = (as_float_matrix(X_val, "X_val"),
                       as_float_matrix(np.asarray(y_val, dtype=np.float64), "y_val"))
        spec = NetworkSpec((X.shape[1], *self.hidden_dims, 2 * q))
        return self._fit_ensembles(train_set, val_set, spec, LossKind.GAUSSIAN_NLL)

    def predict(self, X):
        self._check_fitted()
        pred = predict_regression(self.ensemble_, as_float_matrix(X, "X"))
        mu = pred.mu
        return mu[:, 0] if mu.shape[1] == 1 else mu

    def predict_dist(self, X):
        self._check_fitted()
        pred = predict_regression(self.ensemble_, as_float_matrix(X, "X"))
        return pred.mu, pred.var

    def uncertainty_score(self, X):
        """Total predictive variance per row; larger = farther from the data."""
        _, var = self.predict_dist(X)
        return var.sum(axis=1)

    def score(self, X, y):
        """Negative mean Gaussian NLL (greater is better)."""
        mu, var = self.predict_dist(X)
        y = as_float_matrix(np.asarray(y, dtype=np.float64), "y")
        return -nll_regression((mu, var), y)


class DareEnsembleClassifier(_DareBase):
    """Ensemble classifier trained by regression onto class targets.

    Two classes: members emit one value fit to 0/1 and the uncertainty score
    combines per-member confidence with across-member spread. More classes:
    members fit n_classes-scaled one-hot targets and the score adds the
    residual to the nearest confident vote.
    """

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = self._validate_fit_args(X, y, X_val, y_val)
        y = np.asarray(y).ravel()
        if y.shape[0] != X.shape[0]:
            raise ConfigurationError("y must have one label per row of X")
        self.classes_ = np.unique(y)
        n_classes = self.classes_.shape[0]
        if n_classes < 2:
            raise ConfigurationError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)

        if n_classes == 2:
            targets = codes.astype(np.float64).reshape(-1, 1)
            out_dim, loss_kind = 1, LossKind.MSE
        else:
            targets = scaled_one_hot(codes, n_classes)
            out_dim, loss_kind = n_classes, LossKind.CLASSIFICATION_MSE

        if X_val is None:
            train_set, val_set = _holdout_split(X, targets, self.val_fraction, self.seed)
        else:
            yv = np.asarray(y_val).ravel()
            vcodes = np.clip(np.searchsorted(self.classes_, yv), 0, n_classes - 1)
            if not np.array_equal(self.classes_[vcodes], yv):
                raise ConfigurationError("validation labels outside training classes")
            if n_classes == 2:
                vtargets = vcodes.astype(np.float64).reshape(-1, 1)
            else:
                vtargets = scaled_one_hot(vcodes, n_classes)
            train_set = (X, targets)
            val_set = (as_float_matrix(X_val, "X_val"), vtargets)

        spec = NetworkSpec((X.shape[1], *self.hidden_dims, out_dim))
        return self._fit_ensembles(train_set, val_set, spec, loss_kind)

    def predict(self, X):
        self._check_fitted()
        from .ensemble import predict_labels

        codes = predict_labels(self.ensemble_, as_float_matrix(X, "X"))
        return self.classes_[codes]

    def uncertainty_score(self, X):
        """Out-of-distribution score; larger = farther from the data."""
        self._check_fitted()
        X = as_float_matrix(X, "X")
        if self.classes_.shape[0] == 2:
            return binary_uncertainty_score(self.ensemble_, X)
        return ood_score_classification(self.ensemble_, X)

    def score(self, X, y):
        self._check_fitted()
        return float(np.mean(self.predict(X) == np.asarray(y).ravel()))
