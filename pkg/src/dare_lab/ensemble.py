"""Ensembles of independently trained networks and their uncertainty scores.

Member i is built and shuffled from seed base_seed + i, so a run is fully
reproducible and members never share randomness. Training members in any
order (or in parallel workers) gives identical results because nothing is
shared beyond the immutable inputs.

Scores are oriented "larger = more out-of-distribution":

  regression          predictive variance of the equal-weight Gaussian mixture
  scalar binary       mean min(h^2, (1-h)^2) + across-member variance of h
  multi-class         mean squared distance to each member's own scaled
                      one-hot vote + mean squared distance to the member mean
  softmax baseline    entropy of the averaged class distribution
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from .errors import (
    ConfigurationError,
    DivergenceError,
    EnsembleTrainingError,
    LossKindError,
)
from .losses import LossKind, raw_to_variance, single_net_classif_uncertainty, split_gaussian_outputs
from .network import MlpNetwork, NetworkSpec, forward, network_from_dict, network_to_dict
from .training import TrainConfig, TrainTelemetry, train_network


@dataclass
class Ensemble:
    members: list
    loss_kind: LossKind
    member_seeds: list
    config: TrainConfig = None
    telemetries: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("ensemble needs at least one member")
        self.loss_kind = LossKind(self.loss_kind)
        if len(self.member_seeds) != len(self.members):
            raise ConfigurationError("member_seeds length does not match members")
        if len(set(self.member_seeds)) != len(self.member_seeds):
            raise ConfigurationError("member seeds must be pairwise distinct")

    @property
    def n_members(self) -> int:
        return len(self.members)


def _train_one_member(args):
    net_spec, train_set, val_set, config, seed, loss_tag = args
    member_config = replace(config, seed=seed)
    net = net_spec.build(seed=seed)
    loss_fn = _BASELINE_LOSSES.get(loss_tag)
    return train_network(net, train_set, val_set, member_config, loss_fn=loss_fn)


def train_ensemble(train_set, val_set, net_spec: NetworkSpec, config: TrainConfig,
                   n_members: int, workers: int = 1, _loss_tag=None) -> Ensemble:
    """Train n_members networks from seeds config.seed + 0 .. + n_members - 1.

    workers > 1 fans member training out over processes; results are ordered
    by member index either way, so parallel and sequential runs are
    identical. Any member divergence aborts with the failed seeds listed.
    """
    if n_members < 1:
        raise ConfigurationError("n_members must be >= 1")
    seeds = [config.seed + i for i in range(n_members)]
    jobs = [(net_spec, train_set, val_set, config, s, _loss_tag) for s in seeds]

    results = [None] * n_members
    failures = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, outcome in enumerate(pool.map(_train_one_member_safe, jobs)):
                results[i] = outcome
    else:
        results = [_train_one_member_safe(job) for job in jobs]
    for seed, outcome in zip(seeds, results):
        if isinstance(outcome, DivergenceError):
            failures.append((seed, outcome))
    if failures:
        raise EnsembleTrainingError(
            f"{len(failures)} member(s) diverged: seeds {[s for s, _ in failures]}",
            failed_seeds=[s for s, _ in failures],
            causes=[e for _, e in failures],
        )
    members = [net for net, _ in results]
    telemetries = [tel for _, tel in results]
    return Ensemble(members, config.loss_kind, seeds, config, telemetries)


def _train_one_member_safe(args):
    try:
        return _train_one_member(args)
    except DivergenceError as exc:
        return exc


def member_outputs(ensemble: Ensemble, X) -> np.ndarray:
    """Stack member forward passes into an (M, n, out) array."""
    X = np.asarray(X, dtype=np.float64)
    return np.stack([forward(net, X)[0] for net in ensemble.members])


@dataclass
class PredictiveDistribution:
    """Equal-weight Gaussian mixture collapsed to its first two moments."""

    mu: np.ndarray
    var: np.ndarray
    member_mu: np.ndarray
    member_var: np.ndarray


def predict_regression(ensemble: Ensemble, X) -> PredictiveDistribution:
    """Mixture mean/variance from members with mean and variance heads.

    mu* = mean_m mu_m; var* = mean_m var_m + mean_m (mu_m - mu*)^2, the exact
    law-of-total-variance form, so var* >= min_m var_m always holds.
    """
    if ensemble.loss_kind is not LossKind.GAUSSIAN_NLL:
        raise LossKindError(
            f"predict_regression needs gaussian_nll members, got {ensemble.loss_kind.value}"
        )
    outs = member_outputs(ensemble, X)
    mus = []
    vars_ = []
    for m in range(outs.shape[0]):
        mu_m, raw_m = split_gaussian_outputs(outs[m])
        mus.append(mu_m)
        vars_.append(raw_to_variance(raw_m))
    member_mu = np.stack(mus)
    member_var = np.stack(vars_)
    mu = member_mu.mean(axis=0)
    var = member_var.mean(axis=0) + ((member_mu - mu) ** 2).mean(axis=0)
    return PredictiveDistribution(mu, var, member_mu, member_var)


def binary_uncertainty_score(ensemble: Ensemble, X) -> np.ndarray:
    """Scalar-output classification score: mean member uncertainty + spread.

    Members output a single 0/1-regression value h; the score averages
    min(h^2, (1-h)^2) over members and adds the across-member population
    variance of h. A single member contributes no variance term.
    """
    outs = member_outputs(ensemble, X)
    if outs.shape[2] != 1:
        raise LossKindError("binary score needs single-output members")
    h = outs[:, :, 0]                                   # (M, n)
    return single_net_classif_uncertainty(h).mean(axis=0) + h.var(axis=0)


def ood_score_classification(ensemble: Ensemble, X) -> np.ndarray:
    """Fit-plus-diversity score for scaled one-hot classification members.

    fit_m = ||h_m(x) - C*onehot(argmax h_m(x))||^2 penalizes logits far from
    any confident vote; the diversity term is the spread around the member
    mean. Both are averaged over members.
    """
    outs = member_outputs(ensemble, X)                  # (M, n, C)
    n_classes = outs.shape[2]
    if n_classes < 2:
        raise LossKindError("classification score needs >= 2 output classes")
    votes = outs.argmax(axis=2)
    targets = np.zeros_like(outs)
    np.put_along_axis(targets, votes[:, :, None], float(n_classes), axis=2)
    fit = ((outs - targets) ** 2).sum(axis=2).mean(axis=0)
    center = outs.mean(axis=0)
    diversity = ((outs - center) ** 2).sum(axis=2).mean(axis=0)
    return fit + diversity


def entropy_score_softmax(ensemble: Ensemble, X) -> np.ndarray:
    """Entropy of the member-averaged class distribution (natural log)."""
    for net in ensemble.members:
        if net.output_activation != "softmax":
            raise LossKindError("entropy score needs softmax-output members")
    probs = member_outputs(ensemble, X).mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=1)


def disagreement_score(ensemble: Ensemble, X) -> np.ndarray:
    """Across-member population variance of the raw outputs, summed over dims.

    The generic spread score for ensembles without a variance head; on
    anti-regularized members it inflates off the data like the others.
    """
    outs = member_outputs(ensemble, X)
    return outs.var(axis=0).sum(axis=1)


def predict_labels(ensemble: Ensemble, X) -> np.ndarray:
    """Hard class predictions from the member-mean output."""
    mean_out = member_outputs(ensemble, X).mean(axis=0)
    if mean_out.shape[1] == 1:
        return (mean_out[:, 0] >= 0.5).astype(np.int64)
    return mean_out.argmax(axis=1)


# ---------------------------------------------------------------------------
# softmax + NLL baseline (competitor path only; the anti-regularized models
# never train through a softmax)

def softmax_nll_loss(probs: np.ndarray, onehot: np.ndarray):
    """Cross entropy w.r.t. post-softmax outputs; pairs with softmax networks.

    The gradient is taken w.r.t. the probabilities; composed with the softmax
    Jacobian in reverse mode this yields the usual (p - y)/n logit gradient.
    """
    probs = np.asarray(probs, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if probs.shape != onehot.shape:
        raise ConfigurationError("probs and onehot shapes differ")
    n = probs.shape[0]
    clipped = np.maximum(probs, 1e-300)
    value = float(-(onehot * np.log(clipped)).sum() / n)
    grad = -onehot / (clipped * n)
    return value, grad


_BASELINE_LOSSES = {"softmax_nll": softmax_nll_loss}


def train_softmax_nll_ensemble(train_set, val_set, hidden_dims, config: TrainConfig,
                               n_members: int, n_classes: int, workers: int = 1) -> Ensemble:
    """Vanilla softmax cross-entropy ensemble, the usual classification baseline.

    train_set targets must be plain one-hot rows (not scaled). The
    anti-regularization control is forced off.
    """
    x = np.asarray(train_set[0], dtype=np.float64)
    spec = NetworkSpec(
        (x.shape[1], *hidden_dims, n_classes), output_activation="softmax"
    )
    config = replace(config, lambda_mode="always_off")
    return train_ensemble(
        train_set, val_set, spec, config, n_members, workers, _loss_tag="softmax_nll"
    )


# ---------------------------------------------------------------------------
# internal layer analysis

@dataclass
class LayerComponents:
    """One layer's components ranked by training-activation variance."""

    layer_index: int
    component_order: np.ndarray           # original indices, variance descending
    activation_variance: np.ndarray       # sorted descending
    mean_abs_outgoing_weight: np.ndarray  # aligned to the order
    probe_activations: np.ndarray = None  # (n_probe, width) aligned, optional


@dataclass
class LayerAnalysis:
    layers: list

    def to_csv(self, path) -> None:
        import csv

        n_probe = 0
        for layer in self.layers:
            if layer.probe_activations is not None:
                n_probe = layer.probe_activations.shape[0]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["layer", "rank", "component", "activation_variance",
                 "mean_abs_outgoing_weight"]
                + [f"probe_{i}" for i in range(n_probe)]
            )
            for layer in self.layers:
                for rank in range(layer.component_order.shape[0]):
                    row = [
                        layer.layer_index,
                        rank,
                        int(layer.component_order[rank]),
                        repr(float(layer.activation_variance[rank])),
                        repr(float(layer.mean_abs_outgoing_weight[rank])),
                    ]
                    if layer.probe_activations is not None:
                        row += [repr(float(v)) for v in layer.probe_activations[:, rank]]
                    w.writerow(row)


def internal_analysis(member: MlpNetwork, X_train, probe_points=None) -> LayerAnalysis:
    """Rank each non-output layer's components by training-activation variance.

    For every layer from the input (index 0) through the last hidden layer,
    components are sorted by their activation variance over X_train
    (descending) and paired with the mean absolute weight leaving them toward
    the next layer. Optional probe points ride along in the same order, so
    weakly-activated components can be compared against what an off-data
    input wakes up.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    _, trace = forward(member, X_train)
    probe_trace = None
    if probe_points is not None:
        probe_points = np.asarray(probe_points, dtype=np.float64)
        _, probe_trace = forward(member, probe_points)

    layers = []
    for l in range(len(member.layer_dims) - 1):
        acts = trace.activations[l]
        variance = acts.var(axis=0)
        order = np.argsort(-variance, kind="stable")
        outgoing = np.abs(member.weights[l]).mean(axis=1)
        probe = None
        if probe_trace is not None:
            probe = probe_trace.activations[l][:, order]
        layers.append(
            LayerComponents(
                layer_index=l,
                component_order=order,
                activation_variance=variance[order],
                mean_abs_outgoing_weight=outgoing[order],
                probe_activations=probe,
            )
        )
    return LayerAnalysis(layers)


def layer_weight_variance_correlation(analysis: LayerAnalysis, layer_index: int) -> float:
    """Spearman correlation of activation variance vs mean |outgoing weight|."""
    for layer in analysis.layers:
        if layer.layer_index == layer_index:
            return float(
                spearmanr(layer.activation_variance, layer.mean_abs_outgoing_weight).statistic
            )
    raise ConfigurationError(f"no layer {layer_index} in the analysis")


# ---------------------------------------------------------------------------
# serialization

def ensemble_to_dict(ensemble: Ensemble) -> dict:
    config = None
    if ensemble.config is not None:
        config = asdict(ensemble.config)
        config["loss_kind"] = ensemble.config.loss_kind.value
    return {
        "loss_kind": ensemble.loss_kind.value,
        "member_seeds": list(ensemble.member_seeds),
        "members": [network_to_dict(net) for net in ensemble.members],
        "config": config,
    }


def ensemble_from_dict(blob: dict) -> Ensemble:
    config = None
    if blob.get("config") is not None:
        config = TrainConfig(**blob["config"])
    return Ensemble(
        members=[network_from_dict(b) for b in blob["members"]],
        loss_kind=LossKind(blob["loss_kind"]),
        member_seeds=list(blob["member_seeds"]),
        config=config,
    )


def save_ensemble(ensemble: Ensemble, path) -> None:
    with open(path, "w") as fh:
        json.dump(ensemble_to_dict(ensemble), fh)


def load_ensemble(path) -> Ensemble:
    with open(path) as fh:
        return ensemble_from_dict(json.load(fh))
