import json
import math

import numpy as np
import pytest

from dare_lab.datagen import split_train_val, two_moons
from dare_lab.ensemble import (
    Ensemble,
    LayerAnalysis,
    binary_uncertainty_score,
    disagreement_score,
    ensemble_from_dict,
    ensemble_to_dict,
    entropy_score_softmax,
    internal_analysis,
    layer_weight_variance_correlation,
    load_ensemble,
    member_outputs,
    ood_score_classification,
    predict_labels,
    predict_regression,
    save_ensemble,
    softmax_nll_loss,
    train_ensemble,
    train_softmax_nll_ensemble,
)
from dare_lab.errors import (
    ConfigurationError,
    EnsembleTrainingError,
    LossKindError,
)
from dare_lab.losses import VAR_FLOOR, LossKind
from dare_lab.network import NetworkSpec, backward, forward
from dare_lab.training import TrainConfig, train_network


def const_net(values, d_in=1, output_activation="linear"):
    # no hidden layer, zero weights: output = activation(bias), same for any x
    spec = NetworkSpec((d_in, len(values)), output_activation=output_activation)
    net = spec.build(seed=0)
    net.theta[:] = 0.0
    net.biases[-1][:] = np.asarray(values, dtype=np.float64)
    return net


def raw_for_variance(v):
    # inverse of softplus(raw) + VAR_FLOOR
    return math.log(math.expm1(v - VAR_FLOOR))


def hand_ensemble(member_biases, loss_kind=LossKind.MSE, d_in=1, output_activation="linear"):
    members = [const_net(b, d_in, output_activation) for b in member_biases]
    return Ensemble(members, loss_kind, list(range(len(members))))


# ---------------------------------------------------------------------------
# regression mixture

def test_predict_regression_hand_case():
    # two members, one point: mu 1 and 3, var 0.5 and 1.5
    ens = hand_ensemble(
        [[1.0, raw_for_variance(0.5)], [3.0, raw_for_variance(1.5)]],
        loss_kind=LossKind.GAUSSIAN_NLL,
    )
    pred = predict_regression(ens, np.zeros((1, 1)))
    assert pred.mu[0, 0] == pytest.approx(2.0, abs=1e-12)
    # mean variance 1.0 plus mean squared deviation of means 1.0
    assert pred.var[0, 0] == pytest.approx(2.0, rel=1e-10)
    assert pred.member_mu.shape == (2, 1, 1)


def test_predict_regression_matches_monte_carlo():
    # oracle: sample a member uniformly, then sample its Gaussian
    rng = np.random.default_rng(7)
    mus = rng.normal(size=4)
    vs = rng.uniform(0.2, 2.0, size=4)
    ens = hand_ensemble(
        [[m, raw_for_variance(v)] for m, v in zip(mus, vs)],
        loss_kind=LossKind.GAUSSIAN_NLL,
    )
    pred = predict_regression(ens, np.zeros((1, 1)))

    n = 400_000
    picks = rng.integers(0, 4, size=n)
    draws = rng.normal(mus[picks], np.sqrt(vs[picks]))
    assert pred.mu[0, 0] == pytest.approx(float(draws.mean()), abs=0.01)
    assert pred.var[0, 0] == pytest.approx(float(draws.var()), rel=0.02)


def test_predict_regression_variance_dominates_member_minimum():
    ens = hand_ensemble(
        [[0.0, raw_for_variance(0.3)], [5.0, raw_for_variance(0.4)]],
        loss_kind=LossKind.GAUSSIAN_NLL,
    )
    pred = predict_regression(ens, np.zeros((3, 1)))
    assert np.all(pred.var >= 0.3)


def test_predict_regression_rejects_mse_members():
    ens = hand_ensemble([[1.0, 0.0]], loss_kind=LossKind.MSE)
    with pytest.raises(LossKindError):
        predict_regression(ens, np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# classification scores

def test_binary_score_hand_case():
    ens = hand_ensemble([[0.2], [0.8]])
    score = binary_uncertainty_score(ens, np.zeros((1, 1)))
    # member uncertainties both 0.04; variance of {0.2, 0.8} is 0.09
    assert score[0] == pytest.approx(0.04 + 0.09, abs=1e-12)


def test_binary_score_single_member_has_no_spread_term():
    ens = hand_ensemble([[0.3]])
    score = binary_uncertainty_score(ens, np.zeros((2, 1)))
    assert np.allclose(score, 0.09)


def test_binary_score_rejects_vector_outputs():
    ens = hand_ensemble([[0.2, 0.8]])
    with pytest.raises(LossKindError):
        binary_uncertainty_score(ens, np.zeros((1, 1)))


def test_ood_score_agreeing_confident_members():
    # both members sit exactly on different scaled one-hot corners:
    # zero fit residual, diversity ||(2,0)-(1,1)||^2 averaged = 2
    ens = hand_ensemble([[2.0, 0.0], [0.0, 2.0]], d_in=1)
    score = ood_score_classification(ens, np.zeros((1, 1)))
    assert score[0] == pytest.approx(2.0, abs=1e-12)


def test_ood_score_single_unconfident_member():
    ens = hand_ensemble([[1.5, 0.5]])
    score = ood_score_classification(ens, np.zeros((1, 1)))
    # vote is class 0 with target (2, 0): residual 0.25 + 0.25, no diversity
    assert score[0] == pytest.approx(0.5, abs=1e-12)


def test_ood_score_zero_when_members_identical_and_confident():
    ens = hand_ensemble([[0.0, 3.0, 0.0], [0.0, 3.0, 0.0]])
    score = ood_score_classification(ens, np.zeros((4, 1)))
    assert np.allclose(score, 0.0)


def test_ood_score_rejects_single_output():
    ens = hand_ensemble([[0.5]])
    with pytest.raises(LossKindError):
        ood_score_classification(ens, np.zeros((1, 1)))


def test_entropy_score_uniform_and_degenerate():
    uniform = hand_ensemble([[0.0, 0.0, 0.0]], output_activation="softmax")
    score = entropy_score_softmax(uniform, np.zeros((1, 1)))
    assert score[0] == pytest.approx(math.log(3.0), abs=1e-12)

    # exp(-1000) underflows to exactly zero: the 0 log 0 = 0 branch
    onehot = hand_ensemble([[1000.0, 0.0, 0.0]], output_activation="softmax")
    score = entropy_score_softmax(onehot, np.zeros((1, 1)))
    assert score[0] == 0.0


def test_entropy_score_averages_before_entropy():
    # members disagree sharply; the averaged distribution is uniform
    ens = hand_ensemble(
        [[1000.0, 0.0], [0.0, 1000.0]], output_activation="softmax"
    )
    score = entropy_score_softmax(ens, np.zeros((1, 1)))
    assert score[0] == pytest.approx(math.log(2.0), abs=1e-12)


def test_entropy_score_rejects_non_softmax_members():
    ens = hand_ensemble([[0.5, 0.5]])
    with pytest.raises(LossKindError):
        entropy_score_softmax(ens, np.zeros((1, 1)))


def test_disagreement_score_hand_case():
    # outputs 1 and 3: population variance 1; two dims double it
    ens = hand_ensemble([[1.0, 1.0], [3.0, 3.0]])
    score = disagreement_score(ens, np.zeros((2, 1)))
    assert np.allclose(score, 2.0)
    single = hand_ensemble([[5.0]])
    assert np.allclose(disagreement_score(single, np.zeros((1, 1))), 0.0)


def test_predict_labels_scalar_and_argmax():
    scalar = hand_ensemble([[0.2], [0.9]])
    assert predict_labels(scalar, np.zeros((1, 1)))[0] == 1  # mean 0.55
    multi = hand_ensemble([[0.0, 2.0, 1.0]])
    assert predict_labels(multi, np.zeros((1, 1)))[0] == 1


# ---------------------------------------------------------------------------
# training

def moons_sets():
    ds = two_moons(40, noise=0.1, seed=3)
    train, val = split_train_val(ds, val_fraction=0.25, seed=5)
    return (train.X, train.y), (val.X, val.y)


def quick_config(**kw):
    base = dict(
        tau=-np.inf, lambda_mode="always_off", learning_rate=1e-3,
        batch_size=16, max_epochs=15, seed=11, checkpointing=False,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_train_ensemble_member_seeds_and_determinism():
    train, val = moons_sets()
    spec = NetworkSpec((2, 8, 1))
    cfg = quick_config()
    ens_a = train_ensemble(train, val, spec, cfg, n_members=3)
    ens_b = train_ensemble(train, val, spec, cfg, n_members=3)
    assert ens_a.member_seeds == [11, 12, 13]
    for a, b in zip(ens_a.members, ens_b.members):
        assert np.array_equal(a.theta, b.theta)
    assert len(ens_a.telemetries) == 3


def test_train_ensemble_members_match_manual_training():
    train, val = moons_sets()
    spec = NetworkSpec((2, 8, 1))
    cfg = quick_config()
    ens = train_ensemble(train, val, spec, cfg, n_members=2)
    for i in range(2):
        from dataclasses import replace

        manual, _ = train_network(
            spec.build(seed=11 + i), train, val, replace(cfg, seed=11 + i)
        )
        assert np.array_equal(ens.members[i].theta, manual.theta)


def test_train_ensemble_members_differ_from_each_other():
    train, val = moons_sets()
    ens = train_ensemble(train, val, NetworkSpec((2, 8, 1)), quick_config(), 2)
    assert not np.array_equal(ens.members[0].theta, ens.members[1].theta)


def test_train_ensemble_parallel_matches_sequential():
    train, val = moons_sets()
    spec = NetworkSpec((2, 6, 1))
    cfg = quick_config(max_epochs=8)
    seq = train_ensemble(train, val, spec, cfg, n_members=2, workers=1)
    par = train_ensemble(train, val, spec, cfg, n_members=2, workers=2)
    for a, b in zip(seq.members, par.members):
        assert np.array_equal(a.theta, b.theta)


def test_train_ensemble_reports_diverged_seeds():
    train, val = moons_sets()
    cfg = quick_config(learning_rate=1e200, max_epochs=3)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(EnsembleTrainingError) as err:
            train_ensemble(train, val, NetworkSpec((2, 8, 1)), cfg, 2)
    assert err.value.failed_seeds == [11, 12]
    assert len(err.value.causes) == 2


def test_train_ensemble_rejects_zero_members():
    train, val = moons_sets()
    with pytest.raises(ConfigurationError):
        train_ensemble(train, val, NetworkSpec((2, 8, 1)), quick_config(), 0)


# ---------------------------------------------------------------------------
# softmax + cross-entropy baseline

def test_softmax_nll_loss_hand_value():
    value, grad = softmax_nll_loss(
        np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])
    )
    assert value == pytest.approx(math.log(2.0), abs=1e-12)
    assert np.allclose(grad, [[-2.0, 0.0]])


def test_softmax_nll_gradient_through_network_matches_fd():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    onehot = np.zeros((5, 4))
    onehot[np.arange(5), rng.integers(0, 4, 5)] = 1.0
    net = NetworkSpec((3, 6, 4), output_activation="softmax").build(seed=2)

    probs, trace = forward(net, x)
    _, upstream = softmax_nll_loss(probs, onehot)
    grad = backward(net, x, upstream, trace).flat

    def scalar_loss(theta):
        out, _ = forward(net.with_theta(theta), x)
        return softmax_nll_loss(out, onehot)[0]

    eps = 1e-6
    fd = np.empty_like(net.theta)
    for k in range(net.theta.size):
        up = net.theta.copy()
        dn = net.theta.copy()
        up[k] += eps
        dn[k] -= eps
        fd[k] = (scalar_loss(up) - scalar_loss(dn)) / (2 * eps)
    assert np.allclose(grad, fd, rtol=1e-5, atol=1e-8)


def test_softmax_baseline_trains_and_predicts():
    rng = np.random.default_rng(4)
    centers = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])
    labels = rng.integers(0, 3, size=90)
    X = centers[labels] + 0.3 * rng.normal(size=(90, 2))
    onehot = np.eye(3)[labels]
    train = (X[:70], onehot[:70])
    val = (X[70:], onehot[70:])

    cfg = TrainConfig(
        tau=-np.inf, learning_rate=3e-3, batch_size=16, max_epochs=60,
        seed=1, checkpointing=False,
    )
    ens = train_softmax_nll_ensemble(train, val, (16,), cfg, n_members=2, n_classes=3)
    outs = member_outputs(ens, X)
    assert np.allclose(outs.sum(axis=2), 1.0)
    for tel in ens.telemetries:
        assert tel.records[-1].train_loss < tel.records[0].train_loss
    acc = (predict_labels(ens, X) == labels).mean()
    assert acc > 0.9
    # the control never engages on the baseline
    assert ens.config.lambda_mode == "always_off"


# ---------------------------------------------------------------------------
# layer analysis

def analysis_net():
    spec = NetworkSpec((2, 3, 2))
    net = spec.build(seed=0)
    net.theta[:] = 0.0
    net.weights[0][:] = [[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]]
    net.weights[1][:] = [[1.0, -1.0], [2.0, 2.0], [0.5, 0.0]]
    return net


def test_internal_analysis_orders_by_variance():
    net = analysis_net()
    X = np.array([[1.0, 1.0], [2.0, 3.0], [4.0, 2.0]])
    probe = np.array([[10.0, 10.0]])
    analysis = internal_analysis(net, X, probe_points=probe)
    assert [layer.layer_index for layer in analysis.layers] == [0, 1]

    inp = analysis.layers[0]
    assert inp.component_order.tolist() == [0, 1]
    assert np.allclose(inp.activation_variance, [14.0 / 9.0, 2.0 / 3.0])
    assert np.allclose(inp.mean_abs_outgoing_weight, [1.0, 1.0 / 3.0])
    assert np.allclose(inp.probe_activations, [[10.0, 10.0]])

    hid = analysis.layers[1]
    # activations equal the pre-activations here (all positive, relu)
    assert hid.component_order.tolist() == [2, 0, 1]
    assert np.allclose(hid.activation_variance, [56.0 / 9.0, 14.0 / 9.0, 2.0 / 3.0])
    assert np.allclose(hid.mean_abs_outgoing_weight, [0.25, 1.0, 2.0])
    assert np.allclose(hid.probe_activations, [[20.0, 10.0, 10.0]])


def test_layer_weight_variance_correlation_exact():
    net = analysis_net()
    X = np.array([[1.0, 1.0], [2.0, 3.0], [4.0, 2.0]])
    analysis = internal_analysis(net, X)
    # variance order (2, 0, 1) maps to outgoing means (0.25, 1, 2): reversed
    assert layer_weight_variance_correlation(analysis, 1) == pytest.approx(-1.0)
    with pytest.raises(ConfigurationError):
        layer_weight_variance_correlation(analysis, 9)


def test_layer_analysis_csv(tmp_path):
    net = analysis_net()
    X = np.array([[1.0, 1.0], [2.0, 3.0], [4.0, 2.0]])
    probe = np.array([[10.0, 10.0], [0.0, 0.0]])
    analysis = internal_analysis(net, X, probe_points=probe)
    path = tmp_path / "layers.csv"
    analysis.to_csv(path)

    import csv

    rows = list(csv.reader(open(path)))
    assert rows[0] == [
        "layer", "rank", "component", "activation_variance",
        "mean_abs_outgoing_weight", "probe_0", "probe_1",
    ]
    assert len(rows) == 1 + 2 + 3
    top_hidden = [r for r in rows[1:] if r[0] == "1" and r[1] == "0"][0]
    assert top_hidden[2] == "2"
    assert float(top_hidden[3]) == pytest.approx(56.0 / 9.0)
    assert float(top_hidden[5]) == pytest.approx(20.0)


# ---------------------------------------------------------------------------
# serialization

def test_ensemble_round_trip(tmp_path):
    train, val = moons_sets()
    cfg = quick_config(max_epochs=5)
    ens = train_ensemble(train, val, NetworkSpec((2, 6, 1)), cfg, 2)
    path = tmp_path / "ens.json"
    save_ensemble(ens, path)
    back = load_ensemble(path)
    assert back.member_seeds == ens.member_seeds
    assert back.loss_kind is ens.loss_kind
    assert back.config.tau == cfg.tau
    assert back.config.lambda_mode == "always_off"
    for a, b in zip(ens.members, back.members):
        assert np.array_equal(a.theta, b.theta)
    # stable on-disk form
    blob = json.loads(path.read_text())
    assert set(blob) == {"loss_kind", "member_seeds", "members", "config"}


def test_ensemble_dict_round_trip_without_config():
    ens = hand_ensemble([[0.5], [0.25]])
    ens.config = None
    back = ensemble_from_dict(ensemble_to_dict(ens))
    assert back.config is None
    assert back.n_members == 2


def test_ensemble_rejects_duplicate_seeds():
    nets = [const_net([0.1]), const_net([0.2])]
    with pytest.raises(ConfigurationError):
        Ensemble(nets, LossKind.MSE, [3, 3])
