"""Exception types raised across the package."""


class PanelSchemaError(ValueError):
    """A required column is missing or malformed in tabular input."""


class PanelValueError(ValueError):
    """A row-level validation failure (non-finite value, duplicate key)."""


class DegeneracyError(RuntimeError):
    """A covariance ratio or loading is too close to zero to use."""


class EstimationError(RuntimeError):
    """An estimator could not produce a usable fit."""
