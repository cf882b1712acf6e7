"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are inconsistent or too small for the requested operation."""


class InputError(ValueError):
    """Input values are invalid (non-finite pixels, undecodable files, ...)."""


class TapeError(RuntimeError):
    """A gradient tape was replayed after use or asked about an unrecorded value."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed or incompatible with the requested model."""


class TrainingError(ArithmeticError):
    """Training produced a non-finite loss."""
