"""Metric implementations against hand calculations and brute-force oracles."""

import numpy as np
import pytest

from dare_lab.errors import ConfigurationError, ShapeError
from dare_lab.metrics import (
    EvalReport,
    SplitMetrics,
    accuracy_score,
    auroc,
    ece_classification,
    ece_regression,
    nll_regression,
    percentile_threshold_detect,
    reports_to_csv,
)

HALF_LOG_2PI = 0.9189385332046727


def test_nll_regression_hand_values():
    mu = np.zeros((10, 1))
    var = np.ones((10, 1))
    assert nll_regression((mu, var), mu) == pytest.approx(HALF_LOG_2PI)
    y = np.ones((10, 1))
    assert nll_regression((mu, var), y) == pytest.approx(HALF_LOG_2PI + 0.5)
    # variance 4, residual 2: 0.5*log(2*pi*4) + 4/8
    assert nll_regression((mu, 4.0 * var), 2.0 * y) == pytest.approx(
        0.5 * np.log(8.0 * np.pi) + 0.5
    )


def test_nll_regression_rejects_nonpositive_variance():
    with pytest.raises(ConfigurationError):
        nll_regression((np.zeros((2, 1)), np.zeros((2, 1))), np.zeros((2, 1)))


def test_ece_regression_degenerate_cases():
    n = 50
    mu = np.zeros((n, 1))
    # huge sigma: every central interval covers everything -> mean(1 - p)
    ece_wide = ece_regression((mu, 1e12 * np.ones((n, 1))), mu)
    assert ece_wide == pytest.approx(np.mean([1 - p for p in np.arange(0.1, 1.0, 0.1)]))
    # tiny sigma with off-target labels: zero coverage -> mean(p) = 0.5
    ece_narrow = ece_regression((mu, 1e-12 * np.ones((n, 1))), mu + 1.0)
    assert ece_narrow == pytest.approx(0.5)


def test_ece_regression_calibrated_gaussian_is_small():
    rng = np.random.default_rng(0)
    n = 40_000
    mu = rng.normal(size=(n, 1))
    sigma = rng.uniform(0.5, 2.0, size=(n, 1))
    y = mu + sigma * rng.normal(size=(n, 1))
    assert ece_regression((mu, sigma**2), y) < 0.01


def test_ece_regression_level_validation():
    mu = np.zeros((5, 1))
    var = np.ones((5, 1))
    with pytest.raises(ConfigurationError):
        ece_regression((mu, var), mu, levels=[0.0, 0.5])
    with pytest.raises(ConfigurationError):
        ece_regression((mu, var), mu, levels=[])


def test_ece_classification_hand_case():
    # two points in one bin: conf (0.8, 0.6), acc (1, 0) -> |0.5 - 0.7| * 1
    probs = np.array([[0.8, 0.2], [0.6, 0.4]])
    labels = np.array([0, 1])
    got = ece_classification(probs, labels, n_bins=1)
    assert got == pytest.approx(abs(0.5 - 0.7))
    # perfectly confident and correct -> 0
    sure = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert ece_classification(sure, np.array([0, 1]), n_bins=10) == 0.0


def test_ece_classification_binned_oracle():
    rng = np.random.default_rng(1)
    n, c = 500, 3
    probs = rng.dirichlet(np.ones(c), size=n)
    labels = rng.integers(0, c, size=n)
    n_bins = 7
    got = ece_classification(probs, labels, n_bins=n_bins)

    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    total = 0.0
    for b in range(n_bins):
        lo = b / n_bins
        hi = (b + 1) / n_bins
        if b == 0:
            sel = (conf >= lo) & (conf <= hi)
        else:
            sel = (conf > lo) & (conf <= hi)
        if sel.sum():
            total += sel.sum() / n * abs(correct[sel].mean() - conf[sel].mean())
    assert got == pytest.approx(total)


def test_auroc_hand_case_and_ties():
    # pairs: (2>1), (2>3 no), (4>1), (4>3) -> 3/4
    assert auroc([2.0, 4.0], [1.0, 3.0]) == pytest.approx(0.75)
    assert auroc([1.0], [1.0]) == pytest.approx(0.5)  # tie counts half
    assert auroc([5.0, 5.0], [5.0, 1.0]) == pytest.approx(0.75)


def test_auroc_complement_symmetry():
    rng = np.random.default_rng(2)
    a = rng.normal(size=37)
    b = rng.normal(size=23)
    assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0)


def test_auroc_rank_sum_matches_pair_counting():
    rng = np.random.default_rng(3)
    a = np.round(rng.normal(size=150), 1)  # rounding forces ties
    b = np.round(rng.normal(loc=0.3, size=150), 1)
    # 150*150 = 22500 > 10000: implementation takes the rank-sum path
    got = auroc(a, b)
    diff = a[:, None] - b[None, :]
    want = ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size
    assert got == pytest.approx(want, abs=1e-12)


def test_auroc_empty_rejected():
    with pytest.raises(ConfigurationError):
        auroc([], [1.0])


def test_percentile_threshold_detect():
    val = np.arange(1.0, 101.0)  # 1..100
    flags, threshold = percentile_threshold_detect(val, [50.0, 95.05, 96.0, 200.0], 95)
    # linear interpolation percentile of 1..100 at 95% -> 95.05
    assert threshold == pytest.approx(np.percentile(val, 95))
    assert threshold == pytest.approx(95.05)
    np.testing.assert_array_equal(flags, [False, False, True, True])  # strict >
    with pytest.raises(ConfigurationError):
        percentile_threshold_detect([], [1.0])
    with pytest.raises(ConfigurationError):
        percentile_threshold_detect([1.0], [1.0], percentile=101)


def test_accuracy_score():
    assert accuracy_score([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)
    with pytest.raises(ShapeError):
        accuracy_score([0, 1], [0, 1, 0])


def test_eval_report_round_trip():
    rep = EvalReport(
        method="dare",
        seed=3,
        config_hash="abc123",
        splits={
            "in_distribution": SplitMetrics(n=100, nll=1.2, ece=0.05),
            "ood": SplitMetrics(n=40, auroc=0.9),
        },
    )
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    # byte identity for identical content
    assert back.to_json() == rep.to_json()


def test_eval_report_validation():
    bad = EvalReport("m", 0, "h", {"s": SplitMetrics(n=10, auroc=1.5)})
    with pytest.raises(ConfigurationError):
        bad.to_json()
    bad2 = EvalReport("m", 0, "h", {"s": SplitMetrics(n=0)})
    with pytest.raises(ConfigurationError):
        bad2.to_json()


def test_reports_to_csv_layout(tmp_path):
    reports = [
        EvalReport("dare", s, "h", {"id": SplitMetrics(n=10, nll=1.0 + s)})
        for s in range(3)
    ]
    reports += [
        EvalReport("de_mse", s, "h", {"id": SplitMetrics(n=10, nll=2.0)})
        for s in range(3)
    ]
    path = tmp_path / "table.csv"
    reports_to_csv(reports, path)
    text = path.read_text().splitlines()
    assert text[0] == "method,id_nll"
    assert text[1].startswith("dare,2 ")
    assert text[2].startswith("de_mse,2 ")
