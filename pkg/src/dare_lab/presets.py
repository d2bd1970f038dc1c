"""Named experiment configurations.

Both presets pin every knob of the synthetic benchmarks: the moons
classification setup (scalar 0/1 regression, threshold 0.001) and the 1-D
heteroscedastic regression setup (mean+variance heads, threshold 0.1).
Checkpointing stays off here: these runs train for a fixed budget and keep
the final parameters, with the validation draw reserved for the percentile
detection threshold.
"""

import copy

TWO_MOONS_PAPER = {
    "experiment": "two_moons",
    "dataset": {"n_train": 200, "n_val": 50, "n_test": 100, "noise": 0.1},
    "hidden_dims": [100, 100, 100],
    "n_members": 20,
    "methods": ["de_mse", "dare"],
    "train": {
        "tau": 0.001,
        "loss_kind": "mse",
        "learning_rate": 0.001,
        "batch_size": 32,
        "max_epochs": 500,
        "lambda_mode": "controlled",
        "param_scope": "weights",
        "control_loss_source": "current_batch",
        "checkpointing": False,
    },
    "grid": {"bounds": [[-5.0, 6.0], [-4.5, 5.0]], "resolution": 45},
    "detection": {"percentile": 95.0, "far_distance": 3.0},
    "seeds": [0, 1, 2, 3, 4],
}

REGRESSION1D_PAPER = {
    "experiment": "regression_1d",
    "dataset": {
        "n_train": 200,
        "n_val": 50,
        "n_test": 100,
        "n_ood": 100,
        "intervals": [[0.0, 2.0], [3.0, 5.0]],
        "ood_intervals": [[-1.0, 0.0], [2.0, 3.0], [5.0, 6.0]],
    },
    "hidden_dims": [100, 100, 100],
    "n_members": 20,
    "methods": ["de_nll", "dare"],
    "train": {
        "tau": 0.1,
        "loss_kind": "gaussian_nll",
        "learning_rate": 0.001,
        "batch_size": 32,
        "max_epochs": 500,
        "lambda_mode": "controlled",
        "param_scope": "weights",
        "control_loss_source": "current_batch",
        "checkpointing": False,
    },
    "grid": {"bounds": [[-3.0, 8.0]], "resolution": 221},
    "detection": {"percentile": 95.0},
    "seeds": [0, 1, 2, 3, 4],
}

PRESETS = {
    "two_moons_paper": TWO_MOONS_PAPER,
    "regression1d_paper": REGRESSION1D_PAPER,
}


def get_preset(name: str) -> dict:
    if name not in PRESETS:
        from .errors import ConfigurationError

        raise ConfigurationError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}"
        )
    return copy.deepcopy(PRESETS[name])
