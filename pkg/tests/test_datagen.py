"""Dataset generators, CSV ingestion, and shift splits."""

import numpy as np
import pytest

from dare_lab.datagen import (
    Dataset,
    OodSplit,
    distance_to_intervals,
    eval_grid,
    feature_shift_split,
    load_csv,
    regression_1d,
    regression_1d_true_mean,
    save_csv,
    split_train_val,
    two_moons,
)
from dare_lab.errors import ConfigurationError, IngestionError


def test_two_moons_noiseless_endpoints():
    ds = two_moons(4, noise=0.0, seed=0)
    # t in {0, pi}: outer (1,0), (-1,0); inner (0, 0.5), (2, 0.5)
    np.testing.assert_allclose(
        ds.X, [[1, 0], [-1, 0], [0, 0.5], [2, 0.5]], atol=1e-12
    )
    np.testing.assert_array_equal(ds.y.ravel(), [0, 0, 1, 1])


def test_two_moons_balance_and_determinism():
    a = two_moons(200, noise=0.1, seed=3)
    b = two_moons(200, noise=0.1, seed=3)
    c = two_moons(200, noise=0.1, seed=4)
    assert np.array_equal(a.X, b.X)
    assert not np.array_equal(a.X, c.X)
    assert (a.y == 0).sum() == (a.y == 1).sum() == 100


def test_two_moons_validation():
    with pytest.raises(ConfigurationError):
        two_moons(7)
    with pytest.raises(ConfigurationError):
        two_moons(10, noise=-0.1)


def test_regression_1d_support_and_formula():
    ds = regression_1d(101, seed=5)
    x = ds.X.ravel()
    assert ((x >= 0) & (x <= 5)).all()
    assert not ((x > 2) & (x < 3)).any()  # the gap stays empty
    # regenerate with the same rng sequence to confirm the target formula
    rng = np.random.default_rng(5)
    xs = [rng.uniform(0.0, 2.0, size=51), rng.uniform(3.0, 5.0, size=50)]
    want_x = np.concatenate(xs)
    e1 = rng.normal(size=101)
    e2 = rng.normal(size=101)
    want_y = want_x * np.sin(want_x) + 0.3 * e1 + 0.3 * want_x * e2
    np.testing.assert_allclose(x, want_x)
    np.testing.assert_allclose(ds.y.ravel(), want_y)


def test_regression_1d_distinct_seeds_differ():
    assert not np.array_equal(regression_1d(40, seed=0).X, regression_1d(40, seed=1).X)


def test_true_mean_helper():
    assert regression_1d_true_mean(np.array([0.0]))[0] == 0.0
    assert regression_1d_true_mean(np.array([np.pi / 2]))[0] == pytest.approx(np.pi / 2)


def test_distance_to_intervals():
    d = distance_to_intervals(np.array([-1.0, 0.5, 2.5, 3.5, 7.0]))
    np.testing.assert_allclose(d, [1.0, 0.0, 0.5, 0.0, 2.0])


def test_split_train_val_partition():
    ds = two_moons(50, noise=0.05, seed=1)
    train, val = split_train_val(ds, val_fraction=0.2, seed=2)
    assert train.n == 40 and val.n == 10
    merged = np.concatenate([train.X, val.X])
    assert np.array_equal(np.sort(merged, axis=0), np.sort(ds.X, axis=0))
    with pytest.raises(ConfigurationError):
        split_train_val(ds, val_fraction=0.0)


def test_standardization_stats_and_leakage_guard():
    rng = np.random.default_rng(6)
    ds = Dataset(rng.normal(loc=3.0, scale=2.0, size=(100, 2)), rng.normal(size=(100, 1)))
    std = ds.fit_standardization()
    np.testing.assert_allclose(std.X.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(std.X.std(axis=0), 1.0, atol=1e-12)
    other = Dataset(rng.normal(size=(20, 2)), rng.normal(size=(20, 1)))
    moved = other.standardize_like(std)
    np.testing.assert_allclose(moved.X, (other.X - std.feature_means) / std.feature_stds)
    with pytest.raises(ConfigurationError):
        other.standardize_like(ds)  # ds itself carries no stats


def test_standardize_constant_feature_rejected():
    X = np.stack([np.ones(10), np.arange(10.0)], axis=1)
    ds = Dataset(X, np.zeros((10, 1)))
    with pytest.raises(ConfigurationError):
        ds.fit_standardization()


def test_csv_round_trip_full_precision(tmp_path):
    rng = np.random.default_rng(7)
    ds = Dataset(rng.normal(size=(25, 3)) * 1e-7, rng.normal(size=(25, 2)),
                 feature_names=["a", "b", "c"])
    path = tmp_path / "data.csv"
    save_csv(ds, path, target_names=["t0", "t1"])
    back = load_csv(path, target_cols=["t0", "t1"])
    assert np.array_equal(back.X, ds.X)
    assert np.array_equal(back.y, ds.y)
    assert back.feature_names == ["a", "b", "c"]


def test_load_csv_standardize_flag(tmp_path):
    rng = np.random.default_rng(8)
    ds = Dataset(rng.normal(loc=5.0, size=(30, 2)), rng.normal(size=(30, 1)))
    path = tmp_path / "data.csv"
    save_csv(ds, path)
    std = load_csv(path, target_cols=["y0"], standardize=True)
    np.testing.assert_allclose(std.X.mean(axis=0), 0.0, atol=1e-12)
    assert std.is_standardized


def test_load_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,y\n1,2,3\n1,oops,3\n")
    with pytest.raises(IngestionError, match="oops"):
        load_csv(p, ["y"])
    p.write_text("a,b,y\n1,2\n")
    with pytest.raises(IngestionError, match="row 2"):
        load_csv(p, ["y"])
    p.write_text("a,b,y\n")
    with pytest.raises(IngestionError, match="no data rows"):
        load_csv(p, ["y"])
    p.write_text("")
    with pytest.raises(IngestionError, match="empty"):
        load_csv(p, ["y"])
    p.write_text("a,y\n1,2\n")
    with pytest.raises(IngestionError, match="missing target"):
        load_csv(p, ["z"])
    with pytest.raises(IngestionError):
        load_csv(tmp_path / "nope.csv", ["y"])
    p.write_text("y\n1\n")
    with pytest.raises(IngestionError, match="no feature columns"):
        load_csv(p, ["y"])


def test_feature_shift_split_threshold_and_stats():
    rng = np.random.default_rng(9)
    X = np.stack([rng.normal(size=200), rng.uniform(size=200)], axis=1)
    ds = Dataset(X, rng.normal(size=(200, 1)), feature_names=["keep", "shift"])
    split = feature_shift_split(ds, "shift", 0.7)
    assert isinstance(split, OodSplit)
    threshold = float(np.quantile(X[:, 1], 0.7))  # linear interpolation quantile
    assert repr(threshold) in split.split_rule
    assert split.in_distribution.n + split.out_of_distribution.n == 200
    # in-distribution standardized with its own stats...
    np.testing.assert_allclose(split.in_distribution.X.mean(axis=0), 0.0, atol=1e-12)
    # ...and the shifted rows share those exact stats (no leakage)
    np.testing.assert_array_equal(
        split.out_of_distribution.feature_means, split.in_distribution.feature_means
    )
    raw_ood = X[X[:, 1] > threshold]
    np.testing.assert_allclose(
        split.out_of_distribution.X,
        (raw_ood - split.in_distribution.feature_means) / split.in_distribution.feature_stds,
    )


def test_feature_shift_split_by_index_and_errors():
    rng = np.random.default_rng(10)
    ds = Dataset(rng.normal(size=(50, 2)), rng.normal(size=(50, 1)))
    split = feature_shift_split(ds, 0, 0.5)
    assert split.in_distribution.n == 25
    with pytest.raises(ConfigurationError):
        feature_shift_split(ds, 5, 0.5)
    with pytest.raises(ConfigurationError):
        feature_shift_split(ds, 0, 1.5)
    const = Dataset(np.ones((20, 1)), np.zeros((20, 1)))
    with pytest.raises(ConfigurationError):
        feature_shift_split(const, 0, 0.5)


def test_eval_grid_row_major_order():
    g = eval_grid([(0.0, 1.0), (10.0, 11.0)], 2)
    np.testing.assert_allclose(g, [[0, 10], [0, 11], [1, 10], [1, 11]])
    g1 = eval_grid([(0.0, 2.0)], 5)
    np.testing.assert_allclose(g1.ravel(), np.linspace(0, 2, 5))
    g2 = eval_grid([(0.0, 1.0), (0.0, 1.0)], (2, 3))
    assert g2.shape == (6, 2)
    with pytest.raises(ConfigurationError):
        eval_grid([(1.0, 0.0)], 5)
    with pytest.raises(ConfigurationError):
        eval_grid([(0.0, 1.0)], 1)


def test_dataset_validation():
    with pytest.raises(ConfigurationError):
        Dataset(np.zeros((3, 2)), np.zeros((4, 1)))
    with pytest.raises(ConfigurationError):
        Dataset(np.zeros((3, 2)), np.zeros((3, 1)), feature_names=["only_one"])
