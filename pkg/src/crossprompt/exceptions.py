"""Exception hierarchy used across the package."""



class ConfigurationError(ValueError):
    """Invalid configuration value or inconsistent dimensions."""


class ShapeError(ValueError):
    pass


class VocabError(ValueError):
    """Token id outside the vocabulary."""


class BoundsError(IndexError):
    pass


class EmptyBatchError(ValueError):
    pass


class DegenerateInputError(ValueError):
    """Input with no usable content (all-masked sequence, zero embedding, zero mean)."""


class EmptyStatisticsError(ValueError):
    pass


class MissingGradientError(RuntimeError):
    """Loss graph is not connected to any trainable parameter."""


class FrozenParameterError(RuntimeError):
    pass


class MissingCacheError(RuntimeError):
    """Prototype refinement requested after the instance cache was discarded."""


class SequencingError(RuntimeError):
    """Tasks presented out of order."""


class UndefinedStageError(ValueError):
    pass


class IncompleteMatrixError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


__all__ = [
    "BoundsError",
    "CheckpointError",
    "ConfigurationError",
    "DegenerateInputError",
    "EmptyBatchError",
    "EmptyStatisticsError",
    "FrozenParameterError",
    "IncompleteMatrixError",
    "MissingCacheError",
    "MissingGradientError",
    "NotFittedError",
    "SequencingError",
    "ShapeError",
    "UndefinedStageError",
    "VocabError",
]


def __getattr__(name):
    # re-exported lazily; importing sklearn costs most of the CLI start-up time
    if name == "NotFittedError":
        from sklearn.exceptions import NotFittedError

        return NotFittedError
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
