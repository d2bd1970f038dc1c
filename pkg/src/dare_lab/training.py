"""Single-network training loop with loss-thresholded anti-regularization.

The objective per update is loss(batch) - lambda * R(theta), where R is the
mean log squared weight and lambda is a binary switch: 1 while the
controlling loss sits at or below the threshold tau, 0 otherwise. The
controlling loss never includes the anti-regularization term itself, so the
switch compares plain data fit against tau.

lambda_mode:
    controlled  - lambda recomputed every batch from the controlling loss
    always_off  - plain training; with tau = -inf, controlled reduces to this
                  bit for bit (same updates, same shuffles)
    always_on   - anti-regularization in every step regardless of loss;
                  expected to blow the loss up, kept for diagnostics

Checkpointing follows the threshold rule: after each epoch the network is
saved if its validation loss is at or below tau; training always runs to
max_epochs and returns the last saved network. If no epoch ever qualified,
the best-validation network is returned and the telemetry is flagged.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .losses import LossKind, PARAM_SCOPES, anti_reg, evaluate_loss
from .network import MlpNetwork, backward, forward

LAMBDA_MODES = ("controlled", "always_off", "always_on")
CONTROL_SOURCES = ("current_batch", "epoch_running_mean")

TELEMETRY_COLUMNS = ("epoch", "train_loss", "val_loss", "mean_log_theta2", "mean_lambda")


@dataclass
class TrainConfig:
    tau: float
    loss_kind: LossKind = LossKind.MSE
    lambda_mode: str = "controlled"
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    seed: int = 0
    param_scope: str = "weights"
    control_loss_source: str = "current_batch"
    checkpointing: bool = True

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        if self.lambda_mode not in LAMBDA_MODES:
            raise ConfigurationError(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.control_loss_source not in CONTROL_SOURCES:
            raise ConfigurationError(
                f"unknown control_loss_source {self.control_loss_source!r}"
            )
        if self.param_scope not in PARAM_SCOPES:
            raise ConfigurationError(f"unknown param_scope {self.param_scope!r}")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if np.isnan(self.tau):
            raise ConfigurationError("tau must not be NaN")


@dataclass
class AdamState:
    """First/second moment accumulators over the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params))

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_apply(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates state, returns the new theta.

    theta' = theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def lambda_update(loss: float, tau: float) -> int:
    """Binary control: 1 iff the controlling loss is at or below tau."""
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite controlling loss {loss!r}")
    return 1 if loss <= tau else 0


def _composite_gradient(net, x, y, config, lam, loss_fn):
    out, trace = forward(net, x)
    loss_val, upstream = loss_fn(out, y)
    grad = backward(net, x, upstream, trace).flat
    if lam:
        grad = grad - anti_reg(net, config.param_scope).gradient.flat
    return loss_val, grad


def train_step(net, batch, config: TrainConfig, adam_state: AdamState, lam: int, loss_fn=None):
    """One Adam update on loss - lambda * R; returns (updated net, batch loss).

    With lam = 0 the anti-regularization code path is never touched, so the
    update is exactly a vanilla step given the same optimizer state.
    """
    if lam not in (0, 1):
        raise ConfigurationError(f"lambda must be 0 or 1, got {lam!r}")
    x, y = batch
    if loss_fn is None:
        loss_fn = lambda out, t: evaluate_loss(config.loss_kind, out, t)
    loss_val, grad = _composite_gradient(net, x, y, config, lam, loss_fn)
    if not np.isfinite(loss_val):
        raise DivergenceError(f"non-finite batch loss {loss_val!r}")
    if not np.isfinite(grad).all():
        raise DivergenceError("non-finite gradient")
    theta = adam_apply(net.theta, grad, adam_state, config.learning_rate)
    return net.with_theta(theta), loss_val


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    mean_log_theta2: float
    mean_lambda: float


@dataclass
class TrainTelemetry:
    """One record per completed epoch plus checkpoint bookkeeping."""

    records: list = field(default_factory=list)
    checkpoint_epoch: int | None = None
    fell_back_to_best: bool = False
    warning: str | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            self._write(fh)

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self._write(buf)
        return buf.getvalue()

    def _write(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow(TELEMETRY_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                        repr(r.mean_log_theta2), repr(r.mean_lambda)])

    @property
    def final_train_loss(self) -> float:
        return self.records[-1].train_loss if self.records else float("nan")


@dataclass
class BatchEvent:
    """Snapshot handed to the training hook before each update is applied."""

    epoch: int
    batch_index: int
    lam: int
    control_loss: float
    batch_loss: float
    net: MlpNetwork
    adam: AdamState


def _full_loss(net, x, y, loss_fn):
    out, _ = forward(net, x)
    value, _ = loss_fn(out, y)
    return value


def train_network(net: MlpNetwork, train_set, val_set, config: TrainConfig,
                  batch_hook=None, loss_fn=None):
    """Batch-gradient training with the binary anti-regularization control.

    train_set and val_set are (X, y) pairs; val_set may be None or empty only
    when checkpointing is off. Shuffling uses a generator seeded from
    config.seed, so identical inputs give identical runs. Returns
    (network per the checkpoint policy, TrainTelemetry).
    """
    x_train, y_train = train_set
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    if x_train.shape[0] == 0:
        raise ConfigurationError("empty training set")
    if x_train.shape[0] != y_train.shape[0]:
        raise ConfigurationError("train X and y row counts differ")

    have_val = val_set is not None and np.asarray(val_set[0]).shape[0] > 0
    if config.checkpointing and not have_val:
        raise ConfigurationError("checkpointing requires a non-empty validation set")
    if have_val:
        x_val = np.asarray(val_set[0], dtype=np.float64)
        y_val = np.asarray(val_set[1], dtype=np.float64)

    if loss_fn is None:
        kind = config.loss_kind
        loss_fn = lambda out, t: evaluate_loss(kind, out, t)

    n = x_train.shape[0]
    rng = np.random.default_rng(config.seed)
    adam = AdamState.init(net.n_params)
    telemetry = TrainTelemetry()
    checkpoint = None
    best_val = np.inf
    best_net = net

    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        lambdas = []
        running_sum = 0.0
        for b_idx, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start : start + config.batch_size]
            xb = x_train[idx]
            yb = y_train[idx]

            out, trace = forward(net, xb)
            batch_loss, upstream = loss_fn(out, yb)
            if not np.isfinite(batch_loss):
                raise DivergenceError(
                    f"non-finite batch loss at epoch {epoch} batch {b_idx}",
                    telemetry=telemetry,
                    step_info={"epoch": epoch, "batch": b_idx, "loss": batch_loss},
                )
            running_sum += batch_loss
            if config.lambda_mode == "controlled":
                if config.control_loss_source == "current_batch":
                    control = batch_loss
                else:
                    control = running_sum / (b_idx + 1)
                lam = lambda_update(control, config.tau)
            elif config.lambda_mode == "always_on":
                control = batch_loss
                lam = 1
            else:
                control = batch_loss
                lam = 0

            if batch_hook is not None:
                batch_hook(BatchEvent(epoch, b_idx, lam, control, batch_loss, net, adam))

            grad = backward(net, xb, upstream, trace).flat
            if lam:
                grad = grad - anti_reg(net, config.param_scope).gradient.flat
            if not np.isfinite(grad).all():
                raise DivergenceError(
                    f"non-finite gradient at epoch {epoch} batch {b_idx}",
                    telemetry=telemetry,
                    step_info={"epoch": epoch, "batch": b_idx, "loss": batch_loss},
                )
            net = net.with_theta(adam_apply(net.theta, grad, adam, config.learning_rate))
            epoch_losses.append(batch_loss)
            lambdas.append(lam)

        if have_val:
            val_loss = _full_loss(net, x_val, y_val, loss_fn)
        else:
            val_loss = float("nan")
        reg_now = anti_reg(net, config.param_scope).value
        telemetry.records.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)),
            val_loss=float(val_loss),
            mean_log_theta2=float(reg_now),
            mean_lambda=float(np.mean(lambdas)),
        ))

        if have_val and np.isfinite(val_loss):
            if val_loss < best_val:
                best_val = val_loss
                best_net = net
            if config.checkpointing and val_loss <= config.tau:
                checkpoint = net
                telemetry.checkpoint_epoch = epoch

    if not config.checkpointing:
        return net, telemetry
    if checkpoint is not None:
        return checkpoint, telemetry
    telemetry.fell_back_to_best = True
    telemetry.warning = (
        f"validation loss never reached tau={config.tau!r}; "
        f"returning best-validation network (val_loss={best_val!r})"
    )
    return best_net, telemetry


def select_tau(de_val_loss: float, delta: float = 0.25) -> float:
    """Threshold heuristic: tau = (1 + delta) * reference validation loss."""
    if not np.isfinite(de_val_loss):
        raise ConfigurationError("reference validation loss must be finite")
    if delta < 0:
        raise ConfigurationError("delta must be >= 0")
    return (1.0 + delta) * de_val_loss


def vanilla_config(config: TrainConfig) -> TrainConfig:
    """Same settings with the anti-regularization switch forced off."""
    return replace(config, lambda_mode="always_off")
