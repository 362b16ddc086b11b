"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (misuse, not bad data)."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class NonFiniteError(FloatingPointError):
    """A forward or backward computation produced NaN or Inf."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, truncated, or version-mismatched."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. empty reference)."""
