"""Training losses, the anti-regularization term, and small score helpers.

Every loss returns (scalar value, gradient w.r.t. the network outputs) so the
training loop can feed the gradient straight into reverse mode. Values are
means over all batch entries, which keeps losses comparable across batch
sizes and output widths.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ShapeError
from .network import Gradient, MlpNetwork

# floor inside log(theta^2 + eps): keeps the term finite through zero
# crossings without measurably biasing weights of magnitude >= 1e-3
REG_EPS = 1e-8

# variance head: sigma^2 = softplus(raw) + VAR_FLOOR, strictly positive
VAR_FLOOR = 1e-6

PARAM_SCOPES = ("weights", "weights_and_biases")


class LossKind(str, Enum):
    MSE = "mse"
    GAUSSIAN_NLL = "gaussian_nll"
    CLASSIFICATION_MSE = "classification_mse"


def _check_same_shape(a, b, names):
    if a.shape != b.shape:
        raise ShapeError(f"{names[0]} {a.shape} and {names[1]} {b.shape} differ")


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all entries; grad = 2(pred-target)/(n*q)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(pred, target, ("pred", "target"))
    diff = pred - target
    value = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return value, grad


def classification_mse_loss(logits: np.ndarray, scaled_targets: np.ndarray):
    """Squared error against C-scaled one-hot targets (rows C * e_c).

    Numerically identical to mse_loss; kept separate because the target
    convention (scaled one-hot, linear output layer) is part of the contract.
    """
    return mse_loss(logits, scaled_targets)


def scaled_one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Targets C * e_c for class labels in {0..C-1}."""
    labels = np.asarray(labels).ravel().astype(np.int64)
    if n_classes < 2:
        raise ConfigurationError("n_classes must be >= 2")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ConfigurationError("labels outside [0, n_classes)")
    out = np.zeros((labels.shape[0], n_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = float(n_classes)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def raw_to_variance(raw: np.ndarray) -> np.ndarray:
    """Map the free variance-head output to a strictly positive variance."""
    return softplus(raw) + VAR_FLOOR


def gaussian_nll_loss(pred_mean, pred_rawvar, target):
    """Heteroscedastic Gaussian negative log likelihood, constant included.

    Per entry: 0.5*log(2*pi*v) + (y-mu)^2/(2v) with v = softplus(raw)+1e-6.
    Returns the mean over entries and gradients w.r.t. both heads.
    """
    mu = np.asarray(pred_mean, dtype=np.float64)
    raw = np.asarray(pred_rawvar, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    _check_same_shape(mu, y, ("pred_mean", "target"))
    _check_same_shape(raw, y, ("pred_rawvar", "target"))

    v = raw_to_variance(raw)
    resid = y - mu
    per = 0.5 * np.log(2.0 * np.pi * v) + resid * resid / (2.0 * v)
    m = mu.size
    value = float(np.mean(per))
    grad_mean = (mu - y) / (v * m)
    dldv = (0.5 / v - resid * resid / (2.0 * v * v)) / m
    grad_rawvar = dldv * expit(raw)
    return value, (grad_mean, grad_rawvar)


def split_gaussian_outputs(outputs: np.ndarray):
    """Split a (n, 2q) output batch into mean and raw-variance halves."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.ndim != 2 or outputs.shape[1] % 2 != 0:
        raise ShapeError(
            f"gaussian outputs need an even column count, got {outputs.shape}"
        )
    q = outputs.shape[1] // 2
    return outputs[:, :q], outputs[:, q:]


def gaussian_nll_from_outputs(outputs: np.ndarray, target: np.ndarray):
    """NLL on a network whose output columns are [q means | q raw variances]."""
    mu, raw = split_gaussian_outputs(outputs)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != mu.shape:
        raise ShapeError(
            f"target {target.shape} does not match mean head {mu.shape}"
        )
    value, (gm, gr) = gaussian_nll_loss(mu, raw, target)
    upstream = np.concatenate([gm, gr], axis=1)
    return value, upstream


def evaluate_loss(kind: LossKind, outputs: np.ndarray, targets: np.ndarray):
    """Dispatch on loss kind; returns (value, gradient w.r.t. outputs)."""
    kind = LossKind(kind)
    if kind is LossKind.MSE:
        return mse_loss(outputs, targets)
    if kind is LossKind.CLASSIFICATION_MSE:
        return classification_mse_loss(outputs, targets)
    return gaussian_nll_from_outputs(outputs, targets)


@dataclass
class RegTerm:
    """Value and gradient of the mean-log-squared-weight term."""

    value: float
    gradient: Gradient


def anti_reg(net: MlpNetwork, param_scope: str = "weights") -> RegTerm:
    """R(theta) = (1/d) sum log(theta_k^2 + eps) over the scoped parameters.

    d counts only in-scope parameters; out-of-scope entries get zero gradient.
    By default biases are out of scope: they start at zero and say nothing
    about feature amplification, so inflating them only distorts outputs.
    """
    if param_scope not in PARAM_SCOPES:
        raise ConfigurationError(f"unknown param_scope {param_scope!r}")
    theta = net.theta
    sq = theta * theta + REG_EPS
    if param_scope == "weights":
        mask = net.weight_mask()
        d = int(mask.sum())
        value = float(np.log(sq[mask]).sum() / d)
        flat = np.where(mask, 2.0 * theta / (d * sq), 0.0)
    else:
        d = theta.size
        value = float(np.mean(np.log(sq)))
        flat = 2.0 * theta / (d * sq)
    return RegTerm(value, Gradient(net.layer_dims, flat))


def single_net_classif_uncertainty(h: np.ndarray) -> np.ndarray:
    """min(h^2, (1-h)^2): distance of a scalar 0/1-score from its nearest label."""
    h = np.asarray(h, dtype=np.float64)
    return np.minimum(h * h, (1.0 - h) * (1.0 - h))
