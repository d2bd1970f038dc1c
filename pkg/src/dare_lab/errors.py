"""Exception types shared across the package."""


class DareError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(DareError, ValueError):
    """Invalid hyperparameter, option value, or experiment configuration."""


class ShapeError(DareError, ValueError):
    """Array shape inconsistent with the network or the companion arrays."""


class DivergenceError(DareError, RuntimeError):
    """Training produced a non-finite loss or gradient.

    Carries whatever telemetry was recorded up to the failing step.
    """

    def __init__(self, message, telemetry=None, step_info=None):
        super().__init__(message)
        self.telemetry = telemetry
        self.step_info = step_info


class EnsembleTrainingError(DareError, RuntimeError):
    """One or more ensemble members failed to train."""

    def __init__(self, message, failed_seeds=(), causes=()):
        super().__init__(message)
        self.failed_seeds = list(failed_seeds)
        self.causes = list(causes)


class IngestionError(DareError, ValueError):
    """CSV parsing or column validation failure; message names the offending cell."""


class ConvergenceError(DareError, RuntimeError):
    """Iterative solver did not reach its tolerance; carries diagnostics."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class LossKindError(DareError, ValueError):
    """Operation asked for a prediction type the ensemble's loss does not provide."""


class InsufficientSampleError(DareError, ValueError):
    """Too few members or rows for the requested statistic."""
