"""Evaluation metrics and the serializable per-run report.

Conventions: predictive distributions are (mean, variance) pairs or any
object exposing .mu and .var; uncertainty scores are oriented so that larger
means more out-of-distribution.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

from .errors import ConfigurationError, ShapeError


def _mu_var(pred_dist):
    if hasattr(pred_dist, "mu"):
        mu, var = pred_dist.mu, pred_dist.var
    else:
        mu, var = pred_dist
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mu.shape != var.shape:
        raise ShapeError("mean and variance shapes differ")
    if (var <= 0).any():
        raise ConfigurationError("predictive variances must be strictly positive")
    return mu, var


def nll_regression(pred_dist, targets) -> float:
    """Mean Gaussian negative log likelihood, normalization constant included."""
    mu, var = _mu_var(pred_dist)
    y = np.asarray(targets, dtype=np.float64).reshape(mu.shape)
    per = 0.5 * np.log(2.0 * np.pi * var) + (y - mu) ** 2 / (2.0 * var)
    return float(per.mean())


DEFAULT_COVERAGE_LEVELS = tuple(np.round(np.arange(0.1, 1.0, 0.1), 10))


def ece_regression(pred_dist, targets, levels=DEFAULT_COVERAGE_LEVELS) -> float:
    """Central-interval calibration error of a Gaussian predictor.

    For each nominal level p the predictor's central interval is
    mu +/- z_{(1+p)/2} * sigma; the score is the mean absolute gap between
    nominal and empirical coverage across levels.
    """
    mu, var = _mu_var(pred_dist)
    y = np.asarray(targets, dtype=np.float64).reshape(mu.shape)
    levels = np.asarray(levels, dtype=np.float64)
    if levels.size == 0 or (levels <= 0).any() or (levels >= 1).any():
        raise ConfigurationError("coverage levels must lie strictly inside (0, 1)")
    sigma = np.sqrt(var)
    gaps = []
    for p in levels:
        z = norm.ppf(0.5 * (1.0 + p))
        inside = np.abs(y - mu) <= z * sigma
        gaps.append(abs(float(inside.mean()) - p))
    return float(np.mean(gaps))


def ece_classification(probs, labels, n_bins: int = 10) -> float:
    """Confidence-binned calibration error: sum_b (n_b/n) |acc_b - conf_b|.

    Bins are equal-width over (0, 1] on the max predicted probability; the
    first bin is closed on the left so confidence 0 still lands somewhere.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).ravel().astype(np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ShapeError("probs must be (n, C) aligned with labels")
    if n_bins < 1:
        raise ConfigurationError("n_bins must be >= 1")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    n = labels.shape[0]
    total = 0.0
    for b in range(n_bins):
        lo, hi = edges[b], edges[b + 1]
        in_bin = (conf > lo) & (conf <= hi) if b > 0 else (conf >= lo) & (conf <= hi)
        if not in_bin.any():
            continue
        acc = correct[in_bin].mean()
        avg_conf = conf[in_bin].mean()
        total += (in_bin.sum() / n) * abs(acc - avg_conf)
    return float(total)


def auroc(scores_ood, scores_id) -> float:
    """P(random OOD score > random ID score), ties counted half.

    Exact pair counting for small problems, the tie-corrected rank-sum
    identity beyond; both give the same value.
    """
    a = np.asarray(scores_ood, dtype=np.float64).ravel()
    b = np.asarray(scores_id, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ConfigurationError("both score sets must be non-empty")
    if a.size * b.size <= 10_000:
        diff = a[:, None] - b[None, :]
        wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
        return float(wins / (a.size * b.size))
    ranks = rankdata(np.concatenate([a, b]))
    r_a = ranks[: a.size].sum()
    u = r_a - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def percentile_threshold_detect(val_scores, test_scores, percentile: float = 95.0):
    """Flag test points whose score strictly exceeds the validation percentile.

    Returns (flags, threshold); the threshold is the linear-interpolation
    percentile of the validation scores.
    """
    val = np.asarray(val_scores, dtype=np.float64).ravel()
    test = np.asarray(test_scores, dtype=np.float64).ravel()
    if val.size == 0:
        raise ConfigurationError("validation scores must be non-empty")
    if not 0.0 <= percentile <= 100.0:
        raise ConfigurationError("percentile must be in [0, 100]")
    threshold = float(np.percentile(val, percentile))
    return test > threshold, threshold


def accuracy_score(pred_labels, labels) -> float:
    pred = np.asarray(pred_labels).ravel()
    truth = np.asarray(labels).ravel()
    if pred.shape != truth.shape:
        raise ShapeError("prediction and label lengths differ")
    return float((pred == truth).mean())


@dataclass
class SplitMetrics:
    """Metrics of one evaluation split; irrelevant entries stay None."""

    n: int
    nll: float | None = None
    ece: float | None = None
    auroc: float | None = None
    accuracy: float | None = None

    def validate(self):
        if self.n <= 0:
            raise ConfigurationError("split size must be positive")
        if self.auroc is not None and not 0.0 <= self.auroc <= 1.0:
            raise ConfigurationError(f"auroc {self.auroc} outside [0, 1]")
        if self.ece is not None and self.ece < 0.0:
            raise ConfigurationError("ece must be >= 0")


@dataclass
class EvalReport:
    """Per-method, per-seed evaluation result with its config fingerprint."""

    method: str
    seed: int
    config_hash: str
    splits: dict = field(default_factory=dict)

    def validate(self):
        for metrics in self.splits.values():
            metrics.validate()

    def to_dict(self) -> dict:
        self.validate()
        return {
            "method": self.method,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "splits": {k: asdict(v) for k, v in self.splits.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, blob: dict) -> "EvalReport":
        report = cls(
            method=blob["method"],
            seed=int(blob["seed"]),
            config_hash=blob["config_hash"],
            splits={k: SplitMetrics(**v) for k, v in blob["splits"].items()},
        )
        report.validate()
        return report

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def reports_to_csv(reports, path) -> None:
    """Aggregate reports into a method-by-metric table: mean (std) over seeds."""
    import csv as _csv
    from collections import defaultdict

    cells = defaultdict(lambda: defaultdict(list))
    columns = []
    for rep in reports:
        for split, m in rep.splits.items():
            for metric in ("nll", "ece", "auroc", "accuracy"):
                value = getattr(m, metric)
                if value is None:
                    continue
                col = f"{split}_{metric}"
                cells[rep.method][col].append(value)
                if col not in columns:
                    columns.append(col)
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["method"] + columns)
        for method in sorted(cells):
            row = [method]
            for col in columns:
                vals = cells[method].get(col)
                if not vals:
                    row.append("")
                else:
                    arr = np.asarray(vals)
                    row.append(f"{arr.mean():.6g} ({arr.std():.2g})")
            w.writerow(row)
