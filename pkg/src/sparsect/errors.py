"""Exception types shared across the package."""


class SparsectError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SparsectError):
    """Invalid geometry, layout or stage configuration."""


class ShapeError(SparsectError):
    """Array shape or container metadata inconsistent with the geometry."""


class FormatError(SparsectError):
    """Malformed tensor or model file."""


class DivergenceError(SparsectError):
    """Iterative solver produced a non-finite objective.

    Parameters
    ----------
    message : str
        Description of the failure.
    iteration : int
        Outer iteration index at which the objective became non-finite.
    """

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class TrainingDivergedError(SparsectError):
    """Training loss became non-finite.

    Parameters
    ----------
    message : str
        Description of the failure.
    epoch, batch : int
        Epoch and batch index at which the loss became non-finite.
    """

    def __init__(self, message, epoch, batch):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class UndefinedMetricError(SparsectError):
    """Metric is undefined for the given reference (e.g. zero-norm reference)."""
