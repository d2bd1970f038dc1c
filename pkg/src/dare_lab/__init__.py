"""dare-lab: deep anti-regularized ensembles with a verifiable linear theory.

Ensembles of small MLPs are trained with an extra reward for large weights
that switches on only while the training loss sits below a threshold; the
inflated weights blow up predictions away from the data, which makes the
ensemble's disagreement a usable out-of-distribution score. The waterfill
module solves the matching linear-model theory exactly so the package can
check itself against an independent optimizer.
"""

from .datagen import (
    Dataset,
    eval_grid,
    feature_shift_split,
    load_csv,
    regression_1d,
    save_csv,
    split_train_val,
    two_moons,
)
from .ensemble import (
    Ensemble,
    LayerAnalysis,
    PredictiveDistribution,
    binary_uncertainty_score,
    disagreement_score,
    entropy_score_softmax,
    internal_analysis,
    load_ensemble,
    member_outputs,
    ood_score_classification,
    predict_labels,
    predict_regression,
    save_ensemble,
    train_ensemble,
    train_softmax_nll_ensemble,
)
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DareError,
    DivergenceError,
    EnsembleTrainingError,
    IngestionError,
    InsufficientSampleError,
    LossKindError,
    ShapeError,
)
from .estimators import DareEnsembleClassifier, DareEnsembleRegressor
from .losses import LossKind, anti_reg, evaluate_loss, raw_to_variance, scaled_one_hot
from .metrics import (
    EvalReport,
    SplitMetrics,
    auroc,
    ece_classification,
    ece_regression,
    nll_regression,
    percentile_threshold_detect,
)
from .network import (
    ForwardTrace,
    Gradient,
    MlpNetwork,
    NetworkSpec,
    backward,
    forward,
    init_network,
    network_from_dict,
    network_to_dict,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainTelemetry,
    adam_apply,
    lambda_update,
    select_tau,
    train_network,
    train_step,
)
from .waterfill import (
    WaterFillProblem,
    WaterFillSolution,
    corollary_variance,
    empirical_weight_variance_vs_theory,
    kkt_residuals,
    log_identity_degeneracy_demo,
    waterfill_oracle,
    waterfill_solve,
)

__version__ = "0.1.0"
