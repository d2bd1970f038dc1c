"""Config-driven experiment pipelines behind the command-line interface.

Each pipeline trains method x seed ensembles, evaluates them, and emits a
self-describing artifact directory:

    out/
      config.yaml                resolved configuration, reproducible input
      manifest.json              config hash, code version, per-run status
      runs/{method}_seed{S}/
        report.json              split metrics
        detection.json           threshold-rule summary (where applicable)
        uncertainty_grid.csv     plot substrate (x, [y | mu, sigma], score)
        ensemble.json            serialized members (optional)
        telemetry/member_XX.csv  per-epoch training records

All files are written atomically (temp + rename) inside the output
directory; nothing else on disk is touched. No timestamps anywhere, so a
rerun of the same config is byte-identical.

Seed policy: evaluation draws come from the run seed plus fixed large
offsets, and optimizer seeds from an affine map of the run seed, so the
train/val/test/grid streams never collide with member seeds.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .datagen import (
    Dataset,
    distance_to_intervals,
    eval_grid,
    feature_shift_split,
    load_csv,
    regression_1d,
    split_train_val,
    two_moons,
)
from .ensemble import (
    binary_uncertainty_score,
    disagreement_score,
    ensemble_to_dict,
    internal_analysis,
    layer_weight_variance_correlation,
    load_ensemble,
    predict_labels,
    predict_regression,
    train_ensemble,
)
from .errors import ConfigurationError, ConvergenceError, EnsembleTrainingError
from .losses import LossKind
from .metrics import (
    EvalReport,
    SplitMetrics,
    auroc,
    ece_classification,
    ece_regression,
    nll_regression,
    percentile_threshold_detect,
)
from .network import NetworkSpec
from .presets import get_preset
from .training import TrainConfig, select_tau
from .waterfill import (
    WaterFillProblem,
    kkt_residuals,
    waterfill_oracle,
    waterfill_solve,
)

EXPERIMENT_KINDS = ("two_moons", "regression_1d", "tabular_ood",
                    "waterfill_verify", "delta_sweep", "layer_analysis")
METHODS = ("dare", "de_mse", "de_nll")

# evaluation streams must never collide with member seeds (base .. base + M)
VAL_SEED_OFFSET = 104729
TEST_SEED_OFFSET = 224737
OOD_SEED_OFFSET = 350377
TRAIN_SEED_MULT = 7919
TRAIN_SEED_SHIFT = 17

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_TOLERANCE = 4


# ---------------------------------------------------------------------------
# config plumbing

def deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_config(path=None, preset=None, overrides=None) -> dict:
    if path is None and preset is None:
        raise ConfigurationError("provide a config file, a preset name, or both")
    config = get_preset(preset) if preset else {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigurationError("config must be a mapping at top level")
        deep_update(config, loaded)
    if overrides:
        deep_update(config, overrides)
    return config


def validate_config(config: dict) -> dict:
    kind = config.get("experiment")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigurationError(
            f"experiment must be one of {EXPERIMENT_KINDS}, got {kind!r}"
        )
    if kind in ("waterfill_verify", "layer_analysis"):
        return config

    seeds = config.get("seeds")
    if not seeds:
        raise ConfigurationError("seeds must be a non-empty list")
    config["seeds"] = [int(s) for s in seeds]
    methods = config.get("methods", ["dare"])
    for m in methods:
        if m not in METHODS:
            raise ConfigurationError(f"unknown method {m!r}; known: {METHODS}")
    config["methods"] = list(methods)
    if int(config.get("n_members", 0)) < 1:
        raise ConfigurationError("n_members must be >= 1")
    train = config.get("train")
    if not isinstance(train, dict) or "tau" not in train:
        raise ConfigurationError("train section with a tau entry is required")
    if train["tau"] != "auto":
        train["tau"] = float(train["tau"])
    if kind == "tabular_ood":
        data = config.get("dataset", {})
        csv_path = data.get("csv_path")
        if not csv_path or not Path(csv_path).exists():
            raise ConfigurationError(f"csv_path not found: {csv_path!r}")
        if "target_cols" not in data or "shift_feature" not in data:
            raise ConfigurationError(
                "tabular experiments need dataset.target_cols and dataset.shift_feature"
            )
    if kind == "delta_sweep":
        deltas = config.get("deltas")
        if not deltas:
            raise ConfigurationError("delta sweeps need a non-empty deltas list")
        if any(float(d) < 0 for d in deltas):
            raise ConfigurationError("deltas must be >= 0")
        config["deltas"] = [float(d) for d in deltas]
    return config


def config_hash(config: dict) -> str:
    import hashlib

    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# artifact plumbing

def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_json(path, payload) -> None:
    write_atomic(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def write_csv_rows(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(
            [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row]
        )
    write_atomic(path, buf.getvalue())


def _run_dir(out_dir, method, seed) -> Path:
    path = Path(out_dir) / "runs" / f"{method}_seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit_common(run_dir: Path, ensemble, report: EvalReport, save_ensembles=True):
    write_atomic(run_dir / "report.json", report.to_json() + "\n")
    tel_dir = run_dir / "telemetry"
    tel_dir.mkdir(exist_ok=True)
    for i, tel in enumerate(ensemble.telemetries):
        write_atomic(tel_dir / f"member_{i:02d}.csv", tel.to_csv_string())
    if save_ensembles:
        write_atomic(
            run_dir / "ensemble.json",
            json.dumps(ensemble_to_dict(ensemble), sort_keys=True) + "\n",
        )


def min_distance_to(points: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the nearest reference point."""
    from scipy.spatial.distance import cdist

    return cdist(points, reference).min(axis=1)


# ---------------------------------------------------------------------------
# training helpers

def _train_config(config, tau, loss_kind, lambda_mode, seed) -> TrainConfig:
    train = config["train"]
    return TrainConfig(
        tau=tau,
        loss_kind=loss_kind,
        lambda_mode=lambda_mode,
        learning_rate=float(train.get("learning_rate", 1e-3)),
        batch_size=int(train.get("batch_size", 32)),
        max_epochs=int(train.get("max_epochs", 100)),
        seed=TRAIN_SEED_MULT * seed + TRAIN_SEED_SHIFT,
        param_scope=train.get("param_scope", "weights"),
        control_loss_source=train.get("control_loss_source", "current_batch"),
        checkpointing=bool(train.get("checkpointing", False)),
    )


def _reference_val_loss(ensemble) -> float:
    best = [min(r.val_loss for r in t.records) for t in ensemble.telemetries]
    return float(np.mean(best))


class _SeedTrainer:
    """Trains the methods of one seed, sharing the plain ensemble for tau."""

    def __init__(self, config, seed, train_set, val_set, spec, loss_kind, workers):
        self.config = config
        self.seed = seed
        self.train_set = train_set
        self.val_set = val_set
        self.spec = spec
        self.loss_kind = loss_kind
        self.workers = workers
        self._plain = None

    def plain_ensemble(self):
        if self._plain is None:
            cfg = _train_config(
                self.config, -np.inf, self.loss_kind, "always_off", self.seed
            )
            self._plain = train_ensemble(
                self.train_set, self.val_set, self.spec, cfg,
                int(self.config["n_members"]), self.workers,
            )
        return self._plain

    def run(self, method):
        if method in ("de_mse", "de_nll"):
            return self.plain_ensemble(), float("-inf")
        tau = self.config["train"]["tau"]
        if tau == "auto":
            delta = float(self.config["train"].get("delta", 0.25))
            tau = select_tau(_reference_val_loss(self.plain_ensemble()), delta)
        mode = self.config["train"].get("lambda_mode", "controlled")
        cfg = _train_config(self.config, tau, self.loss_kind, mode, self.seed)
        ens = train_ensemble(
            self.train_set, self.val_set, self.spec, cfg,
            int(self.config["n_members"]), self.workers,
        )
        return ens, tau


# ---------------------------------------------------------------------------
# per-experiment data and evaluation

def _moons_data(config, seed):
    data = config.get("dataset", {})
    noise = float(data.get("noise", 0.1))
    train = two_moons(int(data.get("n_train", 200)), noise, seed)
    val = two_moons(int(data.get("n_val", 50)), noise, seed + VAL_SEED_OFFSET)
    test = two_moons(int(data.get("n_test", 100)), noise, seed + TEST_SEED_OFFSET)
    grid_cfg = config.get("grid", {})
    grid = eval_grid(
        [tuple(b) for b in grid_cfg.get("bounds", [[-5.0, 6.0], [-4.5, 5.0]])],
        int(grid_cfg.get("resolution", 45)),
    )
    return train, val, test, grid


def _eval_two_moons(ensemble, config, seed, run_dir, chash, method):
    train, val, test, grid = _moons_data(config, seed)
    detection = config.get("detection", {})
    percentile = float(detection.get("percentile", 95.0))
    far_distance = float(detection.get("far_distance", 3.0))

    val_scores = binary_uncertainty_score(ensemble, val.X)
    test_scores = binary_uncertainty_score(ensemble, test.X)
    grid_scores = binary_uncertainty_score(ensemble, grid)
    far_mask = min_distance_to(grid, train.X) >= far_distance

    flags, threshold = percentile_threshold_detect(val_scores, grid_scores, percentile)
    preds = predict_labels(ensemble, test.X)
    labels = test.y[:, 0].astype(int)
    acc = float((preds == labels).mean())
    p1 = np.clip(member_mean_scalar(ensemble, test.X), 0.0, 1.0)
    ece = ece_classification(np.column_stack([1.0 - p1, p1]), labels, n_bins=10)

    report = EvalReport(
        method=method, seed=seed, config_hash=chash,
        splits={
            "in_distribution": SplitMetrics(
                n=test.X.shape[0], nll=None, ece=ece, auroc=None, accuracy=acc
            ),
            "out_of_distribution": SplitMetrics(
                n=int(far_mask.sum()), nll=None, ece=None,
                auroc=auroc(grid_scores[far_mask], test_scores), accuracy=None,
            ),
        },
    )
    write_json(run_dir / "detection.json", {
        "percentile": percentile,
        "threshold": float(threshold),
        "far_distance": far_distance,
        "n_far": int(far_mask.sum()),
        "frac_far_flagged": float(flags[far_mask].mean()),
        "frac_grid_flagged": float(flags.mean()),
    })
    rows = [
        (grid[i, 0], grid[i, 1], grid_scores[i], int(flags[i]), int(far_mask[i]))
        for i in range(grid.shape[0])
    ]
    write_csv_rows(run_dir / "uncertainty_grid.csv",
                   ["x0", "x1", "score", "flagged", "far"], rows)
    return report


def member_mean_scalar(ensemble, X) -> np.ndarray:
    from .ensemble import member_outputs

    return member_outputs(ensemble, X).mean(axis=0)[:, 0]


class _RegressionData:
    """Standardized splits plus the raw-unit grid for plotting artifacts."""

    def __init__(self, train, val, test, ood, grid, grid_raw, intervals,
                 y_mean, y_std):
        self.train = train
        self.val = val
        self.test = test
        self.ood = ood
        self.grid = grid          # network input scale
        self.grid_raw = grid_raw  # data units, for the x column and distances
        self.intervals = intervals
        self.y_mean = y_mean
        self.y_std = y_std


def _regression_data(config, seed) -> _RegressionData:
    data = config.get("dataset", {})
    intervals = tuple(tuple(iv) for iv in data.get("intervals", [[0.0, 2.0], [3.0, 5.0]]))
    ood_intervals = tuple(
        tuple(iv) for iv in data.get("ood_intervals", [[-1.0, 0.0], [2.0, 3.0], [5.0, 6.0]])
    )
    train = regression_1d(int(data.get("n_train", 200)), seed, intervals)
    val = regression_1d(int(data.get("n_val", 50)), seed + VAL_SEED_OFFSET, intervals)
    test = regression_1d(int(data.get("n_test", 100)), seed + TEST_SEED_OFFSET, intervals)
    ood = regression_1d(int(data.get("n_ood", 100)), seed + OOD_SEED_OFFSET, ood_intervals)
    # The network sees z-scored inputs and targets (stats fit on the training
    # split only). The heteroscedastic-likelihood thresholds assume this
    # scale: on raw targets the loss floor sits far above any sensible tau
    # and the control never engages.
    y_mean = train.y.mean(axis=0)
    y_std = train.y.std(axis=0)
    if (y_std == 0).any():
        raise ConfigurationError("constant target cannot be standardized")
    train = dataclasses.replace(train, y=(train.y - y_mean) / y_std).fit_standardization()
    val, test, ood = (
        dataclasses.replace(ds, y=(ds.y - y_mean) / y_std).standardize_like(train)
        for ds in (val, test, ood)
    )
    grid_cfg = config.get("grid", {})
    grid_raw = eval_grid(
        [tuple(b) for b in grid_cfg.get("bounds", [[-3.0, 8.0]])],
        int(grid_cfg.get("resolution", 221)),
    )
    return _RegressionData(train, val, test, ood, train.transform_points(grid_raw),
                           grid_raw, intervals, y_mean, y_std)


def _eval_regression_1d(ensemble, config, seed, run_dir, chash, method):
    rd = _regression_data(config, seed)
    test, ood = rd.test, rd.ood

    def dist(X):
        pred = predict_regression(ensemble, X)
        return pred.mu, pred.var

    mu_id, var_id = dist(test.X)
    mu_ood, var_ood = dist(ood.X)
    mu_grid, var_grid = dist(rd.grid)

    report = EvalReport(
        method=method, seed=seed, config_hash=chash,
        splits={
            "in_distribution": SplitMetrics(
                n=test.X.shape[0],
                nll=nll_regression((mu_id, var_id), test.y),
                ece=ece_regression((mu_id, var_id), test.y),
                auroc=None, accuracy=None,
            ),
            "out_of_distribution": SplitMetrics(
                n=ood.X.shape[0],
                nll=nll_regression((mu_ood, var_ood), ood.y),
                ece=ece_regression((mu_ood, var_ood), ood.y),
                auroc=auroc(var_ood.sum(axis=1), var_id.sum(axis=1)),
                accuracy=None,
            ),
        },
    )
    val_scores = dist(rd.val.X)[1].sum(axis=1)
    flags, threshold = percentile_threshold_detect(
        val_scores, var_grid.sum(axis=1),
        float(config.get("detection", {}).get("percentile", 95.0)),
    )
    write_json(run_dir / "detection.json", {
        "percentile": float(config.get("detection", {}).get("percentile", 95.0)),
        "threshold": float(threshold),
        "frac_grid_flagged": float(flags.mean()),
    })
    # plot substrate in data units: undo target standardization
    mu_raw = mu_grid[:, 0] * rd.y_std[0] + rd.y_mean[0]
    sigma_raw = np.sqrt(var_grid[:, 0]) * rd.y_std[0]
    score = var_grid.sum(axis=1)
    support_dist = distance_to_intervals(rd.grid_raw[:, 0], rd.intervals)
    rows = [
        (rd.grid_raw[i, 0], mu_raw[i], sigma_raw[i], score[i], float(support_dist[i]))
        for i in range(rd.grid_raw.shape[0])
    ]
    write_csv_rows(run_dir / "uncertainty_grid.csv",
                   ["x", "mu", "sigma", "score", "support_distance"], rows)
    return report


def _tabular_data(config, seed):
    data = config["dataset"]
    raw = load_csv(data["csv_path"], data["target_cols"], standardize=False)
    split = feature_shift_split(
        raw, data["shift_feature"], float(data.get("shift_quantile", 0.5))
    )
    rest, test = split_train_val(
        split.in_distribution, float(data.get("test_fraction", 0.2)),
        seed + TEST_SEED_OFFSET,
    )
    train, val = split_train_val(
        rest, float(data.get("val_fraction", 0.2)), seed + VAL_SEED_OFFSET
    )
    return train, val, test, split.out_of_distribution, split


def _eval_tabular(ensemble, config, seed, run_dir, chash, method):
    train, val, test, ood, split = _tabular_data(config, seed)
    id_scores = disagreement_score(ensemble, test.X)
    ood_scores = disagreement_score(ensemble, ood.X)
    val_scores = disagreement_score(ensemble, val.X)
    percentile = float(config.get("detection", {}).get("percentile", 95.0))
    ood_flags, threshold = percentile_threshold_detect(val_scores, ood_scores, percentile)
    id_flags, _ = percentile_threshold_detect(val_scores, id_scores, percentile)

    report = EvalReport(
        method=method, seed=seed, config_hash=chash,
        splits={
            "in_distribution": SplitMetrics(
                n=test.X.shape[0], nll=None, ece=None, auroc=None, accuracy=None
            ),
            "out_of_distribution": SplitMetrics(
                n=ood.X.shape[0], nll=None, ece=None,
                auroc=auroc(ood_scores, id_scores), accuracy=None,
            ),
        },
    )
    write_json(run_dir / "detection.json", {
        "percentile": percentile,
        "threshold": float(threshold),
        "split_rule": split.split_rule,
        "frac_ood_flagged": float(ood_flags.mean()),
        "frac_id_flagged": float(id_flags.mean()),
    })
    return report


_EXPERIMENT_TABLE = {
    "two_moons": (LossKind.MSE, _eval_two_moons),
    "regression_1d": (LossKind.GAUSSIAN_NLL, _eval_regression_1d),
    "tabular_ood": (LossKind.MSE, _eval_tabular),
}


def _build_sets(config, seed):
    kind = config["experiment"]
    if kind == "two_moons":
        train, val, _, _ = _moons_data(config, seed)
    elif kind == "regression_1d":
        rd = _regression_data(config, seed)
        train, val = rd.train, rd.val
    else:
        train, val = _tabular_data(config, seed)[:2]
    return (train.X, train.y), (val.X, val.y)


def _network_spec(config, train_set, loss_kind) -> NetworkSpec:
    X, y = train_set
    hidden = tuple(int(h) for h in config.get("hidden_dims", (100, 100, 100)))
    out = 2 * y.shape[1] if loss_kind is LossKind.GAUSSIAN_NLL else y.shape[1]
    return NetworkSpec((X.shape[1], *hidden, out))


# ---------------------------------------------------------------------------
# entry points

def run_experiment(config: dict, out_dir, workers: int = 1) -> int:
    """Train and evaluate every method x seed; emit the artifact tree.

    Returns the process exit code: 0 when every run completed, 3 when any
    member diverged (completed runs are still emitted).
    """
    config = validate_config(config)
    kind = config["experiment"]
    if kind not in _EXPERIMENT_TABLE:
        raise ConfigurationError(f"run_experiment does not handle {kind!r}")
    loss_kind, evaluate = _EXPERIMENT_TABLE[kind]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config)
    write_atomic(out_dir / "config.yaml", yaml.safe_dump(config, sort_keys=True))

    save_ensembles = bool(config.get("output", {}).get("save_ensembles", True))
    # plain baselines first so "auto" thresholds reuse them
    methods = sorted(config["methods"], key=lambda m: m == "dare")
    runs = []
    reports = []
    failed = False
    for seed in config["seeds"]:
        train_set, val_set = _build_sets(config, seed)
        spec = _network_spec(config, train_set, loss_kind)
        trainer = _SeedTrainer(config, seed, train_set, val_set, spec, loss_kind, workers)
        for method in methods:
            entry = {"method": method, "seed": seed}
            try:
                ensemble, tau = trainer.run(method)
            except EnsembleTrainingError as exc:
                failed = True
                entry.update(status="diverged", failed_seeds=exc.failed_seeds)
                runs.append(entry)
                continue
            run_dir = _run_dir(out_dir, method, seed)
            report = evaluate(ensemble, config, seed, run_dir, chash, method)
            _emit_common(run_dir, ensemble, report, save_ensembles)
            reports.append(report)
            entry.update(
                status="ok", tau=float(tau),
                path=str(run_dir.relative_to(out_dir)),
            )
            runs.append(entry)

    if reports:
        from .metrics import reports_to_csv

        tmp = out_dir / "summary.csv.tmp"
        reports_to_csv(reports, tmp)
        os.replace(tmp, out_dir / "summary.csv")
    write_json(out_dir / "manifest.json", {
        "config_hash": chash,
        "code_version": __version__,
        "experiment": kind,
        "runs": runs,
    })
    return EXIT_DIVERGED if failed else EXIT_OK


def run_delta_sweep(config: dict, out_dir, workers: int = 1) -> int:
    """Threshold-slack ablation on the 1-D regression task.

    For each seed one plain ensemble fixes the reference validation loss;
    each delta then trains an anti-regularized ensemble at
    tau = (1 + delta) * reference and reports in/out NLL.
    """
    config = validate_config(config)
    if config["experiment"] != "delta_sweep":
        raise ConfigurationError("run_delta_sweep needs experiment: delta_sweep")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config)
    write_atomic(out_dir / "config.yaml", yaml.safe_dump(config, sort_keys=True))

    loss_kind = LossKind.GAUSSIAN_NLL
    rows = []
    failed = False
    runs = []
    for seed in config["seeds"]:
        reg_config = dict(config, experiment="regression_1d")
        rd = _regression_data(reg_config, seed)
        train, val, test, ood = rd.train, rd.val, rd.test, rd.ood
        train_set, val_set = (train.X, train.y), (val.X, val.y)
        spec = _network_spec(config, train_set, loss_kind)
        trainer = _SeedTrainer(config, seed, train_set, val_set, spec, loss_kind, workers)
        try:
            reference = _reference_val_loss(trainer.plain_ensemble())
        except EnsembleTrainingError as exc:
            failed = True
            runs.append({"seed": seed, "status": "diverged",
                         "failed_seeds": exc.failed_seeds})
            continue
        for delta in config["deltas"]:
            tau = select_tau(reference, delta)
            cfg = _train_config(config, tau, loss_kind,
                                config["train"].get("lambda_mode", "controlled"), seed)
            try:
                ens = train_ensemble(train_set, val_set, spec, cfg,
                                     int(config["n_members"]), workers)
            except EnsembleTrainingError as exc:
                failed = True
                runs.append({"seed": seed, "delta": delta, "status": "diverged",
                             "failed_seeds": exc.failed_seeds})
                continue
            pid = predict_regression(ens, test.X)
            pood = predict_regression(ens, ood.X)
            rows.append((
                float(delta), int(seed), float(tau), float(reference),
                nll_regression((pid.mu, pid.var), test.y),
                nll_regression((pood.mu, pood.var), ood.y),
            ))
            runs.append({"seed": seed, "delta": delta, "status": "ok", "tau": tau})

    write_csv_rows(out_dir / "sweep.csv",
                   ["delta", "seed", "tau", "reference_val_loss", "nll_id", "nll_ood"],
                   rows)
    summary = []
    for delta in config["deltas"]:
        sub = [r for r in rows if r[0] == delta]
        if not sub:
            continue
        nid = np.array([r[4] for r in sub])
        nood = np.array([r[5] for r in sub])
        summary.append((float(delta), nid.mean(), nid.std(), nood.mean(), nood.std()))
    write_csv_rows(out_dir / "sweep_summary.csv",
                   ["delta", "nll_id_mean", "nll_id_std", "nll_ood_mean", "nll_ood_std"],
                   summary)
    write_json(out_dir / "manifest.json", {
        "config_hash": chash,
        "code_version": __version__,
        "experiment": "delta_sweep",
        "runs": runs,
    })
    return EXIT_DIVERGED if failed else EXIT_OK


def run_waterfill_verify(out_dir, n_problems=100, p_max=6, seed=0) -> int:
    """Check the closed-form budget allocator against the ascent oracle.

    Random problems plus one fixed clipping case; the report records worst
    discrepancies. Exit 0 only if every problem meets tolerance.
    """
    if n_problems < 1:
        raise ConfigurationError("n_problems must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    problems = [
        WaterFillProblem(
            s2=np.array([1.0, 0.01]), theta_star_sq=np.array([4.0, 0.0]), budget=1.0
        )
    ]
    for _ in range(n_problems):
        p = int(rng.integers(1, p_max + 1))
        theta = rng.uniform(0.0, 4.0, p)
        theta[rng.random(p) < 0.3] = 0.0
        problems.append(WaterFillProblem(
            s2=rng.uniform(0.05, 10.0, p),
            theta_star_sq=theta,
            budget=float(rng.uniform(0.2, 5.0)),
        ))

    worst = {"sigma2_gap": 0.0, "budget_residual": 0.0, "slackness": 0.0}
    worst_case = None
    failures = 0
    for idx, prob in enumerate(problems):
        try:
            sol = waterfill_solve(prob)
            x = waterfill_oracle(prob)
        except ConvergenceError:
            failures += 1
            worst_case = {"index": idx, "error": "no convergence",
                          "s2": prob.s2.tolist(),
                          "theta_star_sq": prob.theta_star_sq.tolist(),
                          "budget": prob.budget}
            continue
        gap = float(np.max(np.abs(sol.sigma2 - x)))
        res = kkt_residuals(prob, sol)
        budget_res = abs(float(res["budget"]))
        slack = float(res["max_abs_comp"])
        bad = gap >= 1e-6 or budget_res >= 1e-10 or slack >= 1e-8
        if bad:
            failures += 1
        if worst_case is None or gap > worst["sigma2_gap"] or bad:
            worst_case = {"index": idx, "sigma2_gap": gap,
                          "budget_residual": budget_res, "slackness": slack,
                          "s2": prob.s2.tolist(),
                          "theta_star_sq": prob.theta_star_sq.tolist(),
                          "budget": prob.budget}
        worst["sigma2_gap"] = max(worst["sigma2_gap"], gap)
        worst["budget_residual"] = max(worst["budget_residual"], budget_res)
        worst["slackness"] = max(worst["slackness"], slack)

    clip_sol = waterfill_solve(problems[0])
    report = {
        "n_problems": len(problems),
        "seed": seed,
        "tolerances": {"sigma2_gap": 1e-6, "budget_residual": 1e-10,
                       "slackness": 1e-8},
        "worst": worst,
        "failures": failures,
        "clipping_case_sigma2": clip_sol.sigma2.tolist(),
        "worst_case": worst_case,
    }
    write_json(out_dir / "waterfill_report.json", report)
    return EXIT_TOLERANCE if failures else EXIT_OK


def run_layer_analysis(config: dict, out_dir) -> int:
    """Reload a trained ensemble and rank layer components by activation
    variance against their mean absolute outgoing weight."""
    section = config.get("analysis")
    if not isinstance(section, dict):
        raise ConfigurationError("layer analysis needs an analysis section")
    run_root = Path(section.get("run_dir", ""))
    if not run_root.exists():
        raise ConfigurationError(f"run_dir not found: {run_root}")
    run_config = yaml.safe_load((run_root / "config.yaml").read_text())
    method = section.get("method", "dare")
    seed = int(section.get("seed", run_config["seeds"][0]))
    member = int(section.get("member", 0))
    ens_path = run_root / "runs" / f"{method}_seed{seed}" / "ensemble.json"
    if not ens_path.exists():
        raise ConfigurationError(f"no serialized ensemble at {ens_path}")
    ensemble = load_ensemble(ens_path)
    if not 0 <= member < ensemble.n_members:
        raise ConfigurationError(f"member index {member} out of range")

    train_set, _ = _build_sets(validate_config(run_config), seed)
    probe = section.get("probe_points")
    probe = np.asarray(probe, dtype=np.float64) if probe is not None else None
    analysis = internal_analysis(ensemble.members[member], train_set[0], probe)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "layers.csv.tmp"
    analysis.to_csv(tmp)
    os.replace(tmp, out_dir / "layers.csv")
    correlations = {
        str(layer.layer_index): layer_weight_variance_correlation(
            analysis, layer.layer_index
        )
        for layer in analysis.layers
    }
    write_json(out_dir / "analysis.json", {
        "method": method, "seed": seed, "member": member,
        "spearman_variance_vs_outgoing_weight": correlations,
    })
    return EXIT_OK
