"""Dataset construction: synthetic generators, CSV ingestion, OOD splits.

A Dataset is a plain (X, y) pair with optional feature names and, once
standardized, the means/stds that were used, so the same transform can be
replayed on any other split. Standardization statistics are always fit on
the in-distribution rows only; shifted rows get the in-distribution
transform applied to them, never their own.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, IngestionError
from .validation import as_float_matrix

REGRESSION_1D_INTERVALS = ((0.0, 2.0), (3.0, 5.0))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    name: str = ""
    feature_names: list = None
    feature_means: np.ndarray = None
    feature_stds: np.ndarray = None

    def __post_init__(self):
        self.X = as_float_matrix(self.X, "X")
        self.y = as_float_matrix(self.y, "y")
        if self.X.shape[0] != self.y.shape[0]:
            raise ConfigurationError(
                f"X has {self.X.shape[0]} rows, y has {self.y.shape[0]}"
            )
        if self.feature_names is not None and len(self.feature_names) != self.X.shape[1]:
            raise ConfigurationError("feature_names length does not match X")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def is_standardized(self) -> bool:
        return self.feature_means is not None

    def fit_standardization(self) -> "Dataset":
        """Z-score the features with stats fit on this set; stats retained."""
        means = self.X.mean(axis=0)
        stds = self.X.std(axis=0)
        if (stds == 0).any():
            bad = np.flatnonzero(stds == 0)
            raise ConfigurationError(f"constant feature(s) {bad.tolist()} cannot be standardized")
        return replace(self, X=(self.X - means) / stds, feature_means=means,
                       feature_stds=stds)

    def standardize_like(self, other: "Dataset") -> "Dataset":
        """Apply another (already standardized) dataset's transform to self."""
        if not other.is_standardized:
            raise ConfigurationError("reference dataset carries no standardization stats")
        return replace(self, X=(self.X - other.feature_means) / other.feature_stds,
                       feature_means=other.feature_means, feature_stds=other.feature_stds)

    def transform_points(self, X: np.ndarray) -> np.ndarray:
        """Standardize raw points with this dataset's stats (identity if none)."""
        X = as_float_matrix(X, "X")
        if not self.is_standardized:
            return X
        return (X - self.feature_means) / self.feature_stds


def split_train_val(dataset: Dataset, val_fraction: float = 0.2, seed: int = 0):
    """Shuffled train/validation split; defaults to 80/20."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError("val_fraction must be in (0, 1)")
    n_val = int(round(dataset.n * val_fraction))
    if n_val == 0 or n_val == dataset.n:
        raise ConfigurationError(
            f"val_fraction {val_fraction} leaves an empty split for n={dataset.n}"
        )
    perm = np.random.default_rng(seed).permutation(dataset.n)
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    train = replace(dataset, X=dataset.X[train_idx], y=dataset.y[train_idx])
    val = replace(dataset, X=dataset.X[val_idx], y=dataset.y[val_idx])
    return train, val


def two_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved half circles, n/2 points per class, labels 0/1 in y.

    Outer arc (cos t, sin t), inner arc (1 - cos t, 0.5 - sin t) with t
    evenly spaced on [0, pi], plus isotropic Gaussian noise of the given
    scale. n must be even so the classes balance exactly.
    """
    if n < 2 or n % 2 != 0:
        raise ConfigurationError(f"n must be even and >= 2, got {n}")
    if noise < 0:
        raise ConfigurationError("noise must be >= 0")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    X = np.concatenate([outer, inner], axis=0)
    if noise > 0:
        X = X + np.random.default_rng(seed).normal(scale=noise, size=X.shape)
    y = np.concatenate([np.zeros(half), np.ones(half)])[:, None]
    return Dataset(X, y, name="two_moons", feature_names=["x0", "x1"])


def regression_1d_true_mean(x: np.ndarray) -> np.ndarray:
    return x * np.sin(x)


def regression_1d(n: int, seed: int = 0, intervals=REGRESSION_1D_INTERVALS) -> Dataset:
    """Heteroscedastic 1-D regression with an empty gap inside the support.

    x is drawn uniformly from the configured disjoint intervals (defaults
    [0, 2] and [3, 5], leaving (2, 3) empty); targets are
    y = x*sin(x) + 0.3*e1 + 0.3*x*e2 with independent standard normal e1, e2,
    so the noise floor is 0.3 and grows with x.
    """
    if n < 2:
        raise ConfigurationError("n must be >= 2")
    ivs = [(float(a), float(b)) for a, b in intervals]
    if not ivs or any(b <= a for a, b in ivs):
        raise ConfigurationError(f"bad intervals {intervals!r}")
    rng = np.random.default_rng(seed)
    counts = np.full(len(ivs), n // len(ivs))
    counts[: n % len(ivs)] += 1
    xs = [rng.uniform(a, b, size=c) for (a, b), c in zip(ivs, counts)]
    x = np.concatenate(xs)
    e1 = rng.normal(size=n)
    e2 = rng.normal(size=n)
    y = regression_1d_true_mean(x) + 0.3 * e1 + 0.3 * x * e2
    return Dataset(x[:, None], y[:, None], name="regression_1d", feature_names=["x"])


def distance_to_intervals(x: np.ndarray, intervals=REGRESSION_1D_INTERVALS) -> np.ndarray:
    """Distance of scalar points to the nearest training interval (0 inside)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    d = np.full(x.shape, np.inf)
    for a, b in intervals:
        d = np.minimum(d, np.maximum(np.maximum(a - x, x - b), 0.0))
    return d


def load_csv(path, target_cols, standardize: bool = False) -> Dataset:
    """Read a numeric CSV with a header row into a Dataset.

    target_cols name the y columns; every other column becomes a feature.
    Parse problems raise IngestionError naming the offending cell.
    """
    target_cols = list(target_cols)
    if not target_cols:
        raise ConfigurationError("target_cols must name at least one column")
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise IngestionError(f"{path}: empty file") from None
            rows = list(reader)
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc

    header = [h.strip() for h in header]
    missing = [c for c in target_cols if c not in header]
    if missing:
        raise IngestionError(f"{path}: missing target column(s) {missing}")
    if not rows:
        raise IngestionError(f"{path}: no data rows")

    t_idx = [header.index(c) for c in target_cols]
    f_idx = [i for i in range(len(header)) if i not in t_idx]
    if not f_idx:
        raise IngestionError(f"{path}: no feature columns left")

    data = np.empty((len(rows), len(header)), dtype=np.float64)
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise IngestionError(
                f"{path}: row {r + 2} has {len(row)} cells, header has {len(header)}"
            )
        for c, cell in enumerate(row):
            try:
                data[r, c] = float(cell)
            except ValueError:
                raise IngestionError(
                    f"{path}: non-numeric cell {cell!r} at row {r + 2}, "
                    f"column {header[c]!r}"
                ) from None

    ds = Dataset(
        data[:, f_idx],
        data[:, t_idx],
        name=str(path),
        feature_names=[header[i] for i in f_idx],
    )
    if standardize:
        ds = ds.fit_standardization()
    return ds


def save_csv(dataset: Dataset, path, target_names=None) -> None:
    """Write features then targets with full float precision (repr round trip)."""
    names = dataset.feature_names or [f"f{i}" for i in range(dataset.p)]
    q = dataset.y.shape[1]
    t_names = list(target_names) if target_names else [f"y{i}" for i in range(q)]
    if len(t_names) != q:
        raise ConfigurationError("target_names length does not match y")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + t_names)
        for xi, yi in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])


@dataclass
class OodSplit:
    """In-distribution and shifted rows, both on the in-distribution scale."""

    in_distribution: Dataset
    out_of_distribution: Dataset
    split_rule: str


def feature_shift_split(dataset: Dataset, feature, quantile: float) -> OodSplit:
    """Split by a feature quantile: rows at or below the cut are in-distribution.

    The threshold uses the linear-interpolation quantile of the feature's
    values. Standardization is fit on the in-distribution rows and applied
    unchanged to the shifted rows.
    """
    if not 0.0 < quantile < 1.0:
        raise ConfigurationError("quantile must be in (0, 1)")
    if isinstance(feature, str):
        if not dataset.feature_names or feature not in dataset.feature_names:
            raise ConfigurationError(f"unknown feature {feature!r}")
        f = dataset.feature_names.index(feature)
    else:
        f = int(feature)
        if not 0 <= f < dataset.p:
            raise ConfigurationError(f"feature index {f} out of range")
    values = dataset.X[:, f]
    if values.min() == values.max():
        raise ConfigurationError(f"feature {feature!r} is constant; cannot split")
    threshold = float(np.quantile(values, quantile))
    mask_id = values <= threshold
    if mask_id.all() or not mask_id.any():
        raise ConfigurationError(
            f"quantile {quantile} puts every row on one side of the split"
        )
    raw_id = replace(dataset, X=dataset.X[mask_id], y=dataset.y[mask_id],
                     feature_means=None, feature_stds=None)
    raw_ood = replace(dataset, X=dataset.X[~mask_id], y=dataset.y[~mask_id],
                      feature_means=None, feature_stds=None)
    ds_id = raw_id.fit_standardization()
    ds_ood = raw_ood.standardize_like(ds_id)
    rule = (
        f"feature {dataset.feature_names[f] if dataset.feature_names else f}"
        f" <= {threshold!r} (quantile {quantile})"
    )
    return OodSplit(ds_id, ds_ood, rule)


def eval_grid(bounds, resolution) -> np.ndarray:
    """Row-major lattice over a box: bounds = [(lo, hi), ...], one per axis.

    resolution is an int shared by all axes or a per-axis sequence. Returns
    an (m, d) matrix with the first axis varying slowest.
    """
    bounds = [tuple(map(float, b)) for b in bounds]
    if not bounds:
        raise ConfigurationError("bounds must name at least one axis")
    for lo, hi in bounds:
        if not hi > lo:
            raise ConfigurationError(f"inverted bounds ({lo}, {hi})")
    if np.isscalar(resolution):
        res = [int(resolution)] * len(bounds)
    else:
        res = [int(r) for r in resolution]
        if len(res) != len(bounds):
            raise ConfigurationError("resolution length does not match bounds")
    if any(r < 2 for r in res):
        raise ConfigurationError("resolution must be >= 2 per axis")
    axes = [np.linspace(lo, hi, r) for (lo, hi), r in zip(bounds, res)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)
